use classmap::autodiff::{grad_check, GradCheckConfig, Gradients, Objective, ParamStore, Tape};
use classmap::enhancer::{
    enhance, evaluate_loss, iteration_step, image_features, train_enhancer, unshare, EnhancementScene,
    EnhancerConfig, EnhancerSample, EnhancerTrainConfig, MlpMode,
};
use classmap::{seeded_rng, LabelMap, ScoreStack, Tensor};
use rand::Rng as _;

fn tiny(mlp: MlpMode) -> EnhancerConfig {
    EnhancerConfig {
        classes: 2,
        heat_filters: 3,
        image_filters: 2,
        kernel: 3,
        hidden: 4,
        iterations: 3,
        mlp,
        unshared: false,
    }
}

/// Initialized parameters with the zero output layers replaced by random
/// values, so that every iteration actually moves the heat maps.
fn active_params(config: &EnhancerConfig, seed: u64) -> ParamStore {
    let mut rng = seeded_rng(seed);
    let mut p = config.init(&mut rng).unwrap();
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for name in names {
        if name.ends_with(".w2") || name.ends_with(".b2") || name.ends_with(".b1") {
            for v in p.value_mut(&name).unwrap() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    p
}

fn random_scene(h: usize, w: usize, classes: usize, seed: u64) -> (Tensor, ScoreStack, LabelMap) {
    let mut rng = seeded_rng(seed);
    let image = Tensor::from_fn3(h, w, 3, |_, _, _| rng.gen_range(0.0..1.0));
    let u0 = ScoreStack::new(Tensor::from_fn3(h, w, classes, |_, _, _| rng.gen_range(0.0..1.0))).unwrap();
    let labels = LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..classes as u8)).collect()).unwrap();
    (image, u0, labels)
}

type Field = Vec<Vec<Vec<f64>>>;

fn to_field(t: &Tensor) -> Field {
    let [h, w, c] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    (0..h)
        .map(|y| (0..w).map(|x| (0..c).map(|k| t.at3(y, x, k) as f64).collect()).collect())
        .collect()
}

/// `same`-padded stride-1 convolution by direct summation (replicated border).
fn conv_direct(x: &Field, k: &Tensor) -> Field {
    let (h, w, cin) = (x.len(), x[0].len(), x[0][0].len());
    let [cout, _, ks, _] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let r = (ks / 2) as isize;
    let mut out = vec![vec![vec![0.0; cout]; w]; h];
    for y in 0..h {
        for xx in 0..w {
            for co in 0..cout {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                            let sx = (xx as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                            acc += k.data()[((co * cin + ci) * ks + ky) * ks + kx] as f64 * x[sy][sx][ci];
                        }
                    }
                }
                out[y][xx][co] = acc;
            }
        }
    }
    out
}

fn channel(u: &Field, k: usize) -> Field {
    u.iter().map(|row| row.iter().map(|px| vec![px[k]]).collect()).collect()
}

/// `b2 + w2 · relu(W1 phi + b1)`; pushes the activation signs to `pattern`.
fn mlp(phi: &[f64], p: &ParamStore, names: &[String; 4], pattern: &mut Vec<bool>) -> f64 {
    let v = |i: usize| p.value(&names[i]).unwrap().data();
    let (w1, b1, w2, b2) = (v(0), v(1), v(2), v(3));
    let mut out = b2[0] as f64;
    for j in 0..b1.len() {
        let mut a = b1[j] as f64;
        for (i, &f) in phi.iter().enumerate() {
            a += w1[j * phi.len() + i] as f64 * f;
        }
        pattern.push(a > 0.0);
        out += w2[j] as f64 * a.max(0.0);
    }
    out
}

/// Every state `u_0..u_T` of the enhancer, evaluated in `f64` from the
/// stated recurrence.
fn oracle_states(config: &EnhancerConfig, p: &ParamStore, u0: &Tensor, image: &Tensor, pattern: &mut Vec<bool>) -> Vec<Field> {
    let img = to_field(image);
    let mut states = vec![to_field(u0)];
    for t in 0..config.iterations {
        let names = config.names(t);
        let feats = conv_direct(&img, p.value(&names.n).unwrap());
        let u = states.last().unwrap();
        let (h, w) = (u.len(), u[0].len());
        let mut next = u.clone();
        for k in 0..config.classes {
            let heat = conv_direct(&channel(u, k), p.value(&names.m).unwrap());
            let group = &names.mlps[config.mlp_index(k)];
            for y in 0..h {
                for x in 0..w {
                    let phi: Vec<f64> = heat[y][x].iter().chain(&feats[y][x]).copied().collect();
                    next[y][x][k] += mlp(&phi, p, group, pattern);
                }
            }
        }
        states.push(next);
    }
    states
}

fn oracle_loss(config: &EnhancerConfig, p: &ParamStore, sample: &EnhancerSample, pattern: &mut Vec<bool>) -> f64 {
    let states = oracle_states(config, p, &sample.u0, &sample.image, pattern);
    let u = states.last().unwrap();
    let (h, w) = (u.len(), u[0].len());
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let px = &u[y][x];
            let m = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + px.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - px[sample.labels.get(y, x) as usize];
        }
    }
    total / (h * w) as f64
}

/// Finite differences of the `f64` oracle loss against the tape's adjoints.
struct OracleObjective<'a> {
    config: &'a EnhancerConfig,
    sample: &'a EnhancerSample,
}

impl Objective for OracleObjective<'_> {
    fn loss(&self, params: &ParamStore) -> classmap::Result<f64> {
        Ok(oracle_loss(self.config, params, self.sample, &mut Vec::new()))
    }

    fn loss_and_gradients(&self, params: &ParamStore) -> classmap::Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let loss = self.config.loss_graph(params, &mut tape, self.sample)?;
        Ok((tape.scalar(loss)?, tape.backward(loss)?))
    }

    fn loss_and_pattern(&self, params: &ParamStore) -> classmap::Result<(f64, Vec<bool>)> {
        let mut pattern = Vec::new();
        let loss = oracle_loss(self.config, params, self.sample, &mut pattern);
        Ok((loss, pattern))
    }
}

#[test]
fn one_iteration_matches_a_direct_evaluation() {
    for mlp in [MlpMode::PerClass, MlpMode::ClassAgnostic] {
        let config = tiny(mlp);
        let params = active_params(&config, 1);
        let (image, u0, _) = random_scene(5, 6, 2, 2);
        let names = config.names(0);
        let n = params.value(&names.n).unwrap();
        let m = params.value(&names.m).unwrap();
        let feats = image_features(&image, n).unwrap();
        let u1 = iteration_step(&config, &params, 0, &u0, &feats).unwrap();

        let img_resp = conv_direct(&to_field(&image), n);
        for k in 0..2 {
            let [w1, b1, w2, b2] = &names.mlps[if mlp == MlpMode::PerClass { k } else { 0 }];
            let (w1, b1, w2, b2) = (
                params.value(w1).unwrap().data(),
                params.value(b1).unwrap().data(),
                params.value(w2).unwrap().data(),
                params.value(b2).unwrap().data(),
            );
            let heat = conv_direct(&channel(&to_field(u0.tensor()), k), m);
            for y in 0..5 {
                for x in 0..6 {
                    let phi: Vec<f64> = heat[y][x].iter().chain(&img_resp[y][x]).copied().collect();
                    let mut delta = b2[0] as f64;
                    for j in 0..4 {
                        let mut a = b1[j] as f64;
                        for (i, &f) in phi.iter().enumerate() {
                            a += w1[j * 5 + i] as f64 * f;
                        }
                        delta += w2[j] as f64 * a.max(0.0);
                    }
                    let expected = u0.tensor().at3(y, x, k) as f64 + delta;
                    let got = u1.tensor().at3(y, x, k) as f64;
                    assert!((got - expected).abs() < 1e-5, "{mlp:?} ({y},{x},{k}): {got} vs {expected}");
                }
            }
        }
    }
}

#[test]
fn freshly_initialized_enhancer_is_the_identity() {
    let config = EnhancerConfig::default();
    let params = config.init(&mut seeded_rng(3)).unwrap();
    let (image, u0, _) = random_scene(16, 12, 3, 4);
    let states = enhance(&config, &params, &u0, &image).unwrap();
    assert_eq!(states.len(), 6);
    for s in &states {
        assert_eq!(s, &u0);
    }
}

#[test]
fn unshared_copy_computes_the_same_function() {
    let config = tiny(MlpMode::PerClass);
    let params = active_params(&config, 5);
    let (uconfig, uparams) = unshare(&config, &params).unwrap();
    assert_eq!(uparams.len(), config.iterations * params.len());
    let (image, u0, _) = random_scene(7, 7, 2, 6);
    assert_eq!(
        enhance(&config, &params, &u0, &image).unwrap(),
        enhance(&uconfig, &uparams, &u0, &image).unwrap()
    );
    assert!(unshare(&uconfig, &uparams).is_err());
}

#[test]
fn class_agnostic_enhancer_commutes_with_class_permutations() {
    let config = EnhancerConfig {
        classes: 3,
        ..tiny(MlpMode::ClassAgnostic)
    };
    let params = active_params(&config, 7);
    let (image, u0, _) = random_scene(6, 8, 3, 8);
    let perm = [2usize, 0, 1];
    let permute = |t: &Tensor| Tensor::from_fn3(6, 8, 3, |y, x, c| t.at3(y, x, perm[c]));
    let a = enhance(&config, &params, &u0, &image).unwrap();
    let b = enhance(&config, &params, &ScoreStack::new(permute(u0.tensor())).unwrap(), &image).unwrap();
    for (sa, sb) in a.iter().zip(&b) {
        assert_eq!(&permute(sa.tensor()), sb.tensor());
    }
}

#[test]
fn enhancement_is_translation_equivariant_away_from_borders() {
    let config = tiny(MlpMode::PerClass);
    let params = active_params(&config, 9);
    let (image, u0, _) = random_scene(30, 30, 2, 10);
    let (dy, dx) = (3, 2);
    let image_s = image.crop(dy, dx, 27, 28).unwrap();
    let u0_s = u0.crop(dy, dx, 27, 28).unwrap();
    let full = enhance(&config, &params, &u0, &image).unwrap();
    let shifted = enhance(&config, &params, &u0_s, &image_s).unwrap();
    let (a, b) = (full.last().unwrap().tensor(), shifted.last().unwrap().tensor());
    // Three 3x3 iterations reach at most 4 pixels; keep a wider margin.
    for y in 8..19 {
        for x in 8..20 {
            for c in 0..2 {
                assert!((a.at3(y + dy, x + dx, c) - b.at3(y, x, c)).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn oracle_reproduces_the_forward_pass() {
    let config = tiny(MlpMode::PerClass);
    let params = active_params(&config, 15);
    let (image, u0, _) = random_scene(6, 7, 2, 16);
    let states = enhance(&config, &params, &u0, &image).unwrap();
    let oracle = oracle_states(&config, &params, u0.tensor(), &image, &mut Vec::new());
    for (s, o) in states.iter().zip(&oracle) {
        for y in 0..6 {
            for x in 0..7 {
                for k in 0..2 {
                    assert!((s.tensor().at3(y, x, k) as f64 - o[y][x][k]).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn analytic_gradients_of_the_training_loss() {
    let configs = [
        tiny(MlpMode::PerClass),
        tiny(MlpMode::ClassAgnostic),
        EnhancerConfig {
            unshared: true,
            ..tiny(MlpMode::PerClass)
        },
        EnhancerConfig {
            iterations: 5,
            ..tiny(MlpMode::PerClass)
        },
    ];
    for (i, config) in configs.iter().enumerate() {
        let (mut checked, mut skipped) = (0, 0);
        for seed in 0..10u64 {
            let params = active_params(config, 100 * i as u64 + seed);
            let (image, u0, labels) = random_scene(6, 6, 2, 1000 + 100 * i as u64 + seed);
            let sample = EnhancerSample {
                image,
                u0: u0.into_tensor(),
                labels,
            };
            let report = grad_check(
                &OracleObjective {
                    config,
                    sample: &sample,
                },
                &params,
                GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-3, "config {i} seed {seed}: {:?}", report.per_param);
            checked += report.checked_entries;
            skipped += report.skipped_entries;
        }
        // Entries skipped for sitting on a ReLU kink must stay rare.
        assert!(skipped * 10 <= checked, "config {i}: {skipped} skipped, {checked} checked");
    }
}

#[test]
fn training_fits_a_separable_toy_scene() {
    // Left half class 0, right half class 1; the image shows the split, the
    // initial heat maps are uninformative.
    let (h, w) = (16, 16);
    let image = Tensor::from_fn3(h, w, 3, |_, x, _| if x < w / 2 { 0.1 } else { 0.9 });
    let u0 = ScoreStack::new(Tensor::filled(&[h, w, 2], 0.5)).unwrap();
    let labels = LabelMap::new(h, w, (0..h * w).map(|i| u8::from(i % w >= w / 2)).collect()).unwrap();
    let scene = EnhancementScene::new(image, u0, labels).unwrap();
    let config = tiny(MlpMode::PerClass);
    let mut rng = seeded_rng(40);
    let mut params = config.init(&mut rng).unwrap();
    let before = evaluate_loss(&config, &params, &scene).unwrap();
    let train = EnhancerTrainConfig {
        steps: 200,
        batch: 2,
        patch: 8,
        ..Default::default()
    };
    let losses = train_enhancer(&config, &mut params, std::slice::from_ref(&scene), &train, &mut rng, |_, _| {}).unwrap();
    assert_eq!(losses.len(), 200);
    let after = evaluate_loss(&config, &params, &scene).unwrap();
    assert!((before - 2f64.ln()).abs() < 1e-6);
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn mismatched_parameters_and_inputs_are_rejected() {
    let config = tiny(MlpMode::PerClass);
    let params = config.init(&mut seeded_rng(50)).unwrap();
    let (image, u0, _) = random_scene(5, 5, 2, 51);
    let agnostic = tiny(MlpMode::ClassAgnostic);
    assert!(enhance(&agnostic, &params, &u0, &image).is_err());
    let (_, u3, _) = random_scene(5, 5, 3, 52);
    assert!(enhance(&config, &params, &u3, &image).is_err());
    let (small, _, _) = random_scene(4, 5, 2, 53);
    assert!(enhance(&config, &params, &u0, &small).is_err());
}
