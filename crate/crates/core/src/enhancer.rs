//! The learned enhancement process.
//!
//! Every iteration filters each class heat map `u_k` with a shared bank `M`,
//! concatenates the responses with image responses `N * I` (computed once),
//! feeds the 64 values of every pixel through a per-class two-layer
//! perceptron and adds its output to `u_k`. Iterations share their weights;
//! the unshared variant gives every iteration its own copy of all filters
//! and perceptrons.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{minibatch_step, xavier_init, Optimizer, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::maps::{LabelMap, ScoreStack};
use crate::ops::{self, Padding};
use crate::synth::{sample_corners, NUM_CLASSES};
use crate::tensor::Tensor;
use crate::Rng;

const PREFIX: &str = "enh";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpMode {
    /// One perceptron per class.
    PerClass,
    /// A single perceptron applied to every class.
    ClassAgnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancerConfig {
    pub classes: usize,
    /// Number of `M` filters (applied to one heat map at a time).
    pub heat_filters: usize,
    /// Number of `N` filters (applied to the RGB image).
    pub image_filters: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub iterations: usize,
    pub mlp: MlpMode,
    /// Give every iteration its own parameters.
    pub unshared: bool,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        EnhancerConfig {
            classes: NUM_CLASSES,
            heat_filters: 32,
            image_filters: 32,
            kernel: 5,
            hidden: 32,
            iterations: 5,
            mlp: MlpMode::PerClass,
            unshared: false,
        }
    }
}

/// Parameter names used by one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationNames {
    pub m: String,
    pub n: String,
    /// `[w1, b1, w2, b2]` per perceptron (one, or one per class).
    pub mlps: Vec<[String; 4]>,
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("the enhancer needs at least two classes".into()));
        }
        if self.heat_filters == 0 || self.image_filters == 0 || self.hidden == 0 {
            return Err(Error::Config("filter banks and hidden layer must be non-empty".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        self.heat_filters + self.image_filters
    }

    fn mlp_count(&self) -> usize {
        match self.mlp {
            MlpMode::PerClass => self.classes,
            MlpMode::ClassAgnostic => 1,
        }
    }

    /// Index of the perceptron used for class `k`.
    pub fn mlp_index(&self, k: usize) -> usize {
        match self.mlp {
            MlpMode::PerClass => k,
            MlpMode::ClassAgnostic => 0,
        }
    }

    /// Distinct parameter sets: one when shared, one per iteration otherwise.
    fn param_sets(&self) -> usize {
        if self.unshared {
            self.iterations.max(1)
        } else {
            1
        }
    }

    pub fn names(&self, iteration: usize) -> IterationNames {
        let scope = if self.unshared {
            format!("{PREFIX}.it{iteration}")
        } else {
            PREFIX.to_string()
        };
        let mlps = (0..self.mlp_count())
            .map(|j| {
                let base = match self.mlp {
                    MlpMode::PerClass => format!("{scope}.mlp{j}"),
                    MlpMode::ClassAgnostic => format!("{scope}.mlp"),
                };
                ["w1", "b1", "w2", "b2"].map(|s| format!("{base}.{s}"))
            })
            .collect();
        IterationNames {
            m: format!("{scope}.M"),
            n: format!("{scope}.N"),
            mlps,
        }
    }

    /// Xavier-initialized filter banks and hidden layers; zero output layers,
    /// so the initial process is exactly the identity.
    pub fn init(&self, rng: &mut Rng) -> Result<ParamStore> {
        self.validate()?;
        let k = self.kernel;
        let mut store = ParamStore::new();
        for set in 0..self.param_sets() {
            let names = self.names(set);
            store.insert(&names.m, xavier_init(&[self.heat_filters, 1, k, k], k * k, rng)?)?;
            store.insert(&names.n, xavier_init(&[self.image_filters, 3, k, k], 3 * k * k, rng)?)?;
            for [w1, b1, w2, b2] in &names.mlps {
                let f = self.feature_width();
                store.insert(w1, xavier_init(&[self.hidden, f], f, rng)?)?;
                store.insert(b1, Tensor::zeros(&[self.hidden]))?;
                store.insert(w2, Tensor::zeros(&[1, self.hidden]))?;
                store.insert(b2, Tensor::zeros(&[1]))?;
            }
        }
        Ok(store)
    }

    /// Number of scalars a parameter store for this configuration holds.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let banks = self.heat_filters * k2 + self.image_filters * 3 * k2;
        let mlp = self.hidden * self.feature_width() + self.hidden + self.hidden + 1;
        self.param_sets() * (banks + self.mlp_count() * mlp)
    }

    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        self.validate()?;
        let k = self.kernel;
        let f = self.feature_width();
        for set in 0..self.param_sets() {
            let names = self.names(set);
            let mut expect = vec![
                (names.m.clone(), vec![self.heat_filters, 1, k, k]),
                (names.n.clone(), vec![self.image_filters, 3, k, k]),
            ];
            for [w1, b1, w2, b2] in names.mlps {
                expect.push((w1, vec![self.hidden, f]));
                expect.push((b1, vec![self.hidden]));
                expect.push((w2, vec![1, self.hidden]));
                expect.push((b2, vec![1]));
            }
            for (name, shape) in expect {
                match params.value(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Shape(format!("`{name}` is {:?}, expected {shape:?}", t.shape())))
                    }
                    None => return Err(Error::InvalidArgument(format!("missing parameter `{name}`"))),
                }
            }
        }
        Ok(())
    }

    /// Records the unrolled process on `tape` and returns `u_0 .. u_T`.
    ///
    /// Shared parameters get one tape instance per iteration, so their
    /// adjoints are averaged over iterations. The image bank is applied
    /// once and counts as one instance per iteration.
    pub fn graph(&self, params: &ParamStore, tape: &mut Tape, u0: Var, image: Var) -> Result<Vec<Var>> {
        let classes = tape.value(u0).grid()?.channels;
        if classes != self.classes {
            return Err(Error::Shape(format!(
                "heat maps have {classes} classes, the enhancer expects {}",
                self.classes
            )));
        }
        let mut states = vec![u0];
        let mut u = u0;
        let mut image_features = None;
        for t in 0..self.iterations {
            let names = self.names(t);
            let feats = match (self.unshared, image_features) {
                (false, Some(f)) => f,
                _ => {
                    let n = if self.unshared {
                        tape.param(params, &names.n)?
                    } else {
                        tape.param_repeated(params, &names.n, self.iterations)?
                    };
                    let f = tape.conv2d(image, n, 1, Padding::Same)?;
                    image_features = Some(f);
                    f
                }
            };
            let m = tape.param(params, &names.m)?;
            let mut mlps = Vec::with_capacity(names.mlps.len());
            for group in &names.mlps {
                let mut vars = [u0; 4];
                for (v, name) in vars.iter_mut().zip(group) {
                    *v = tape.param(params, name)?;
                }
                mlps.push(vars);
            }
            let mut next = Vec::with_capacity(classes);
            for k in 0..classes {
                let [w1, b1, w2, b2] = mlps[self.mlp_index(k)];
                let uk = tape.select_channel(u, k)?;
                let heat = tape.conv2d(uk, m, 1, Padding::Same)?;
                let phi = tape.concat(&[heat, feats])?;
                let hidden = tape.dense(phi, w1, b1)?;
                let hidden = tape.relu(hidden);
                let delta = tape.dense(hidden, w2, b2)?;
                next.push(tape.add(uk, delta)?);
            }
            u = tape.concat(&next)?;
            states.push(u);
        }
        Ok(states)
    }

    /// Softmax cross-entropy of the final state against `labels`.
    pub fn loss_graph(&self, params: &ParamStore, tape: &mut Tape, sample: &EnhancerSample) -> Result<Var> {
        let u0 = tape.input(sample.u0.clone());
        let image = tape.input(sample.image.clone());
        let states = self.graph(params, tape, u0, image)?;
        tape.softmax_cross_entropy(*states.last().expect("holds u_0"), &sample.labels)
    }
}

/// Copies shared parameters into the per-iteration layout of the unshared
/// variant, so both start from the same function. Returns the unshared
/// configuration and its parameters.
pub fn unshare(config: &EnhancerConfig, params: &ParamStore) -> Result<(EnhancerConfig, ParamStore)> {
    if config.unshared {
        return Err(Error::InvalidArgument("parameters are already unshared".into()));
    }
    config.check_params(params)?;
    let target = EnhancerConfig {
        unshared: true,
        ..config.clone()
    };
    let src = config.names(0);
    let mut out = ParamStore::new();
    for t in 0..target.param_sets() {
        let dst = target.names(t);
        out.insert(&dst.m, param(params, &src.m)?.clone())?;
        out.insert(&dst.n, param(params, &src.n)?.clone())?;
        for (d, s) in dst.mlps.iter().zip(&src.mlps) {
            for (dn, sn) in d.iter().zip(s) {
                out.insert(dn, param(params, sn)?.clone())?;
            }
        }
    }
    Ok((target, out))
}

/// `N * I`: image filter responses, `[H, W, image_filters]`.
pub fn image_features(image: &Tensor, n: &Tensor) -> Result<Tensor> {
    ops::conv2d(image, n, 1, Padding::Same)
}

/// `M * u_k`: heat-map filter responses of one class, `[H, W, heat_filters]`.
pub fn heat_features(uk: &Tensor, m: &Tensor) -> Result<Tensor> {
    if uk.grid()?.channels != 1 {
        return Err(Error::Shape(format!("expected one heat map, got {:?}", uk.shape())));
    }
    ops::conv2d(uk, m, 1, Padding::Same)
}

fn param<'a>(params: &'a ParamStore, name: &str) -> Result<&'a Tensor> {
    params
        .value(name)
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
}

/// The per-class updates `δu` of iteration `iteration`, `[H, W, K]`.
pub fn update_field(
    config: &EnhancerConfig,
    params: &ParamStore,
    iteration: usize,
    u: &Tensor,
    img_feats: &Tensor,
) -> Result<Tensor> {
    let g = u.grid()?;
    if g.channels != config.classes {
        return Err(Error::Shape(format!(
            "heat maps have {} classes, the enhancer expects {}",
            g.channels, config.classes
        )));
    }
    let names = config.names(iteration);
    let m = param(params, &names.m)?;
    let mut deltas = Vec::with_capacity(g.channels);
    for k in 0..g.channels {
        let [w1, b1, w2, b2] = &names.mlps[config.mlp_index(k)];
        let heat = heat_features(&u.channel(k)?, m)?;
        let phi = Tensor::concat_channels(&[&heat, img_feats])?;
        let hidden = ops::relu(&ops::dense(&phi, param(params, w1)?, param(params, b1)?)?);
        deltas.push(ops::dense(&hidden, param(params, w2)?, param(params, b2)?)?);
    }
    Tensor::stack_channels(&deltas)
}

/// One enhancement iteration: `u_{t+1} = u_t + δu_t`.
pub fn iteration_step(
    config: &EnhancerConfig,
    params: &ParamStore,
    iteration: usize,
    u: &ScoreStack,
    img_feats: &Tensor,
) -> Result<ScoreStack> {
    let delta = update_field(config, params, iteration, u.tensor(), img_feats)?;
    let next = u.tensor().zip_map(&delta, |a, b| a + b)?;
    if !next.all_finite() {
        return Err(Error::NonFinite(format!("heat maps after iteration {}", iteration + 1)));
    }
    ScoreStack::new(next)
}

/// Runs all iterations; returns `u_0 .. u_T` (the last entry is the result).
pub fn enhance(config: &EnhancerConfig, params: &ParamStore, u0: &ScoreStack, image: &Tensor) -> Result<Vec<ScoreStack>> {
    config.check_params(params)?;
    let (ug, ig) = (u0.grid(), image.grid()?);
    if (ug.height, ug.width) != (ig.height, ig.width) || ig.channels != 3 {
        return Err(Error::Shape(format!(
            "heat maps {}x{} vs image {:?}",
            ug.height,
            ug.width,
            image.shape()
        )));
    }
    let mut states = vec![u0.clone()];
    let mut feats = None;
    for t in 0..config.iterations {
        if feats.is_none() || config.unshared {
            feats = Some(image_features(image, param(params, &config.names(t).n)?)?);
        }
        let next = iteration_step(config, params, t, states.last().expect("non-empty"), feats.as_ref().expect("set"))?;
        states.push(next);
    }
    Ok(states)
}

/// A training window: image, initial heat maps and target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerSample {
    pub image: Tensor,
    pub u0: Tensor,
    pub labels: LabelMap,
}

/// A full scene prepared for enhancer training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancementScene {
    pub image: Tensor,
    /// Initial heat maps (class probabilities of the coarse stage).
    pub u0: ScoreStack,
    pub labels: LabelMap,
}

impl EnhancementScene {
    pub fn new(image: Tensor, u0: ScoreStack, labels: LabelMap) -> Result<Self> {
        let (ig, ug) = (image.grid()?, u0.grid());
        if (ig.height, ig.width) != (ug.height, ug.width) || (labels.height(), labels.width()) != (ug.height, ug.width) {
            return Err(Error::Shape("image, heat maps and labels must share their grid".into()));
        }
        labels.check_classes(ug.channels)?;
        Ok(EnhancementScene { image, u0, labels })
    }

    pub fn sample(&self, patch: usize, count: usize, rng: &mut Rng) -> Result<Vec<EnhancerSample>> {
        sample_corners(self.labels.height(), self.labels.width(), patch, count, rng)?
            .into_iter()
            .map(|(y, x)| {
                Ok(EnhancerSample {
                    image: self.image.crop(y, x, patch, patch)?,
                    u0: self.u0.tensor().crop(y, x, patch, patch)?,
                    labels: self.labels.crop(y, x, patch, patch)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub optimizer: Optimizer,
}

impl Default for EnhancerTrainConfig {
    fn default() -> Self {
        EnhancerTrainConfig {
            steps: 50_000,
            batch: 64,
            patch: 64,
            optimizer: Optimizer::enhancer_default(),
        }
    }
}

/// BPTT over random patches of the training scenes. Returns the mean
/// minibatch loss of every step. Aborts with [`Error::Diverged`] on a
/// non-finite loss.
pub fn train_enhancer(
    config: &EnhancerConfig,
    params: &mut ParamStore,
    scenes: &[EnhancementScene],
    train: &EnhancerTrainConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    config.check_params(params)?;
    if scenes.is_empty() || train.batch == 0 {
        return Err(Error::InvalidArgument("enhancer training needs scenes and a non-empty batch".into()));
    }
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut batch = Vec::with_capacity(train.batch);
        for _ in 0..train.batch {
            let s = rng.gen_range(0..scenes.len());
            batch.extend(scenes[s].sample(train.patch, 1, rng)?);
        }
        let loss = minibatch_step(params, &train.optimizer, &batch, |p, tape, sample| {
            config.loss_graph(p, tape, sample)
        })
        .map_err(|e| match e {
            Error::Diverged { loss, .. } => Error::Diverged { step, loss },
            other => other,
        })?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean cross-entropy of `softmax(u_T)` against the labels over whole scenes.
pub fn evaluate_loss(config: &EnhancerConfig, params: &ParamStore, scene: &EnhancementScene) -> Result<f64> {
    let states = enhance(config, params, &scene.u0, &scene.image)?;
    let probs = ops::softmax_channels(states.last().expect("non-empty").tensor())?;
    ops::cross_entropy(&probs, &scene.labels)
}
