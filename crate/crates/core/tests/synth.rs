use classmap::synth::{
    generate_scene, generate_with_reference, load_scene, rasterize, sample_corners, sample_patches, save_scene,
    Building, DatasetSpec, DegradationEdits, DegradationSpec, LabelSource, Layout, Road, SceneStyle, Split,
    BACKGROUND, BUILDING, ROAD,
};
use classmap::seeded_rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn square(cy: f64, cx: f64, half: f64) -> Building {
    Building {
        center: [cy, cx],
        half_extent: [half, half],
        angle: 0.0,
        roof: [0.5, 0.5, 0.5],
    }
}

/// Distance from `p` to segment `ab` by projecting onto the clamped line.
fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let l2 = d[0] * d[0] + d[1] * d[1];
    let t = if l2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * d[0], a[1] + t * d[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

#[test]
fn building_coverage_tracks_the_configured_density() {
    let style = SceneStyle::default();
    for seed in 0..10 {
        let scene = generate_scene(256, 256, &style, &mut seeded_rng(seed)).unwrap();
        let fraction = scene.truth.count(BUILDING) as f64 / (256.0 * 256.0);
        let d = style.building_density;
        assert!(
            (0.5 * d..=1.5 * d).contains(&fraction),
            "seed {seed}: building fraction {fraction}"
        );
    }
}

#[test]
fn road_pixels_lie_within_half_a_width_of_their_centerline() {
    for seed in 0..5 {
        let scene = generate_scene(128, 128, &SceneStyle::default(), &mut seeded_rng(100 + seed)).unwrap();
        assert!(!scene.layout.roads.is_empty());
        let mut road_pixels = 0;
        for y in 0..128 {
            for x in 0..128 {
                if scene.truth.get(y, x) != ROAD {
                    continue;
                }
                road_pixels += 1;
                let p = [y as f64 + 0.5, x as f64 + 0.5];
                let inside = scene.layout.roads.iter().any(|r| {
                    r.points
                        .windows(2)
                        .map(|s| seg_dist(p, s[0], s[1]))
                        .fold(f64::INFINITY, f64::min)
                        <= r.width / 2.0
                });
                assert!(inside, "seed {seed}: road pixel ({y},{x}) off every road");
            }
        }
        assert!(road_pixels > 0);
    }
}

#[test]
fn shifted_square_overlaps_by_the_rectangle_intersection() {
    let layout = Layout {
        buildings: vec![square(20.0, 20.0, 5.0)],
        roads: vec![],
    };
    let truth = rasterize(48, 48, &layout, None);
    assert_eq!(truth.count(BUILDING), 100);
    let edits = DegradationEdits {
        buildings: vec![Some((2, 3))],
        roads_kept: vec![],
    };
    let reference = rasterize(48, 48, &edits.apply(&layout).unwrap(), Some(7.0));
    let both = (0..48 * 48)
        .filter(|&i| truth.data()[i] == BUILDING && reference.data()[i] == BUILDING)
        .count();
    let either = (0..48 * 48)
        .filter(|&i| truth.data()[i] == BUILDING || reference.data()[i] == BUILDING)
        .count();
    let (overlap, union) = ((10 - 2) * (10 - 3), 2 * 100 - (10 - 2) * (10 - 3));
    assert_eq!((both, either), (overlap, union));
    assert!((both as f64 / either as f64 - 56.0 / 144.0).abs() < 1e-12);
}

#[test]
fn certain_omission_empties_the_reference() {
    let spec = DegradationSpec {
        omit_prob: 1.0,
        ..DegradationSpec::default()
    };
    let scene = generate_with_reference(96, 96, &SceneStyle::default(), &spec, 7).unwrap();
    assert!(scene.truth.count(BUILDING) > 0);
    assert_eq!(scene.noisy_ref.count(BACKGROUND), 96 * 96);
}

#[test]
fn zero_degradation_reproduces_the_truth() {
    let spec = DegradationSpec {
        max_shift: 0,
        omit_prob: 0.0,
        road_width_px: 7.0,
    };
    let style = SceneStyle {
        road_width: [7, 7],
        ..SceneStyle::default()
    };
    let scene = generate_with_reference(96, 96, &style, &spec, 8).unwrap();
    assert_eq!(scene.noisy_ref, scene.truth);
}

#[test]
fn reference_roads_use_the_fixed_width() {
    let road = Road {
        points: vec![[-2.0, 20.5], [50.0, 20.5]],
        width: 3.0,
        tone: 0.5,
    };
    let layout = Layout {
        buildings: vec![],
        roads: vec![road],
    };
    let thin = rasterize(40, 40, &layout, None);
    let wide = rasterize(40, 40, &layout, Some(9.0));
    let row = |m: &classmap::LabelMap| (0..40).filter(|&x| m.get(10, x) == ROAD).count();
    assert_eq!((row(&thin), row(&wide)), (3, 9));
}

#[test]
fn patch_corners_are_uniform() {
    let (size, patch, n) = (256, 64, 10_000);
    let corners = sample_corners(size, size, patch, n, &mut seeded_rng(9)).unwrap();
    let positions = size - patch + 1;
    let bins = 8;
    let bin = |v: usize| v * bins / positions;
    for axis in 0..2 {
        let mut observed = vec![0f64; bins];
        for c in &corners {
            observed[bin(if axis == 0 { c.0 } else { c.1 })] += 1.0;
        }
        let mut expected = vec![0f64; bins];
        for v in 0..positions {
            expected[bin(v)] += n as f64 / positions as f64;
        }
        let stat: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "axis {axis}: chi2 {stat}, p {p}");
    }
    assert!(corners.iter().all(|&(y, x)| y <= size - patch && x <= size - patch));
}

#[test]
fn minibatch_holds_the_requested_patches() {
    let scene = generate_scene(128, 128, &SceneStyle::default(), &mut seeded_rng(10)).unwrap();
    let batch = sample_patches(std::slice::from_ref(&scene), 64, 64, LabelSource::Reference, &mut seeded_rng(11)).unwrap();
    assert_eq!(batch.len(), 64);
    for p in &batch {
        assert_eq!(p.image.shape(), &[64, 64, 3]);
        assert_eq!((p.labels.height(), p.labels.width()), (64, 64));
        assert_eq!(p.labels, scene.noisy_ref.crop(p.y, p.x, 64, 64).unwrap());
    }
    assert!(sample_corners(32, 32, 33, 1, &mut seeded_rng(0)).is_err());
}

#[test]
fn generation_is_a_function_of_the_seed() {
    let style = SceneStyle::default();
    let spec = DegradationSpec::default();
    let a = generate_with_reference(64, 80, &style, &spec, 5).unwrap();
    let b = generate_with_reference(64, 80, &style, &spec, 5).unwrap();
    let c = generate_with_reference(64, 80, &style, &spec, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.truth, c.truth);
    assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn scenes_survive_a_disk_round_trip() {
    let spec = DatasetSpec {
        scene_size: 64,
        train_scenes: 1,
        ..DatasetSpec::default()
    };
    let scene = spec.scene(3, Split::Test, 0).unwrap();
    let sidecar = spec.sidecar(3, Split::Test, 0, &scene.layout);
    let dir = tempfile::tempdir().unwrap();
    save_scene(dir.path(), "test_000", &scene, &sidecar).unwrap();
    let (loaded, side) = load_scene(dir.path(), "test_000").unwrap();
    assert_eq!(loaded.truth, scene.truth);
    assert_eq!(loaded.noisy_ref, scene.noisy_ref);
    assert_eq!(side, sidecar);
    // 8-bit quantization of the image.
    for (a, b) in loaded.image.data().iter().zip(scene.image.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn dataset_splits_are_distinct_scenes() {
    let spec = DatasetSpec {
        scene_size: 64,
        train_scenes: 2,
        ..DatasetSpec::default()
    };
    let d = spec.generate(11).unwrap();
    assert_eq!(d.train.len(), 2);
    assert_ne!(d.train[0].truth, d.train[1].truth);
    assert_ne!(d.enhancement.truth, d.test.truth);
    assert_eq!(spec.generate(11).unwrap().test, d.test);
    assert!(DatasetSpec {
        scene_size: 32,
        ..DatasetSpec::default()
    }
    .generate(1)
    .is_err());
}
