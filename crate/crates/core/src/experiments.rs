//! End-to-end runs: the JSON run configuration, coarse heat-map providers,
//! baseline tuning, the benchmark table and the weight-sharing ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, ParamStore};
use crate::coarse::{coarse_forward, degrade_to_coarse, CoarseNetConfig, CoarseProviderConfig, CoarseTrainConfig};
use crate::enhancer::{
    enhance, evaluate_loss, train_enhancer, unshare, EnhancementScene, EnhancerConfig, EnhancerTrainConfig, MlpMode,
};
use crate::error::{Error, Result};
use crate::maps::ScoreStack;
use crate::metrics::{evaluate, evaluate_trajectory, MetricsReport, CSV_HEADER};
use crate::ops;
use crate::pde::{evolve_trajectory, EdgeStopKind, EdgeStopParams, EvolutionConfig, Scheme, MAX_EXPLICIT_DT};
use crate::synth::{DatasetSpec, LabelSource, Scene, Split, NUM_CLASSES};
use crate::{seeded_rng, Rng};

/// Environment variable that overrides `output_dir` of a run configuration.
pub const OUTPUT_DIR_ENV: &str = "CLASSMAP_OUTPUT_DIR";

/// Independent generator streams derived from the run seed by name.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    // FNV-1a of the stream name, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: &str) -> Rng {
    seeded_rng(derive_seed(seed, stream))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseSection {
    pub provider: CoarseProviderConfig,
    /// Label map the degrader provider blurs and corrupts. The reference map
    /// carries the misregistrations and omissions of the dataset; the ground
    /// truth gives image-aligned fuzzy maps.
    pub degrader_labels: LabelSource,
    pub network: CoarseNetConfig,
    pub training: CoarseTrainConfig,
}

impl Default for CoarseSection {
    fn default() -> Self {
        CoarseSection {
            provider: CoarseProviderConfig::default(),
            degrader_labels: LabelSource::Reference,
            network: CoarseNetConfig::default(),
            training: CoarseTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub schemes: Vec<Scheme>,
    /// Candidate step counts.
    pub steps: Vec<usize>,
    /// Candidate time steps; values a scheme cannot take are skipped.
    pub dt: Vec<f32>,
    /// Candidate multiples of the per-image default edge-stop parameter.
    pub lambda_scales: Vec<f32>,
    pub edge_stop: EdgeStopKind,
    pub presmooth_sigma: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            schemes: Scheme::ALL.to_vec(),
            steps: vec![5, 10, 20, 40],
            dt: vec![0.1, 0.25],
            lambda_scales: vec![0.5, 1.0, 2.0],
            edge_stop: EdgeStopKind::Rational,
            presmooth_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub repetitions: usize,
    /// Training steps of each variant in each repetition.
    pub steps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            repetitions: 3,
            steps: 1000,
        }
    }
}

/// Margins the benchmark results are judged by, in mean-IoU points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub ordering_margin: f64,
    pub monotone_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            ordering_margin: 2.0,
            monotone_slack: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub coarse: CoarseSection,
    pub enhancer: EnhancerConfig,
    pub enhancer_training: EnhancerTrainConfig,
    pub baselines: BaselineConfig,
    pub ablation: AblationConfig,
    pub tolerances: Tolerances,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2017,
            dataset: DatasetSpec::default(),
            coarse: CoarseSection::default(),
            enhancer: EnhancerConfig::default(),
            enhancer_training: EnhancerTrainConfig::default(),
            baselines: BaselineConfig::default(),
            ablation: AblationConfig::default(),
            tolerances: Tolerances::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON document; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.coarse.network.validate()?;
        if let CoarseProviderConfig::Degrader(d) = &self.coarse.provider {
            d.validate()?;
        }
        self.enhancer.validate()?;
        if self.enhancer.classes != NUM_CLASSES || self.coarse.network.classes != NUM_CLASSES {
            return Err(Error::Config(format!("scenes have {NUM_CLASSES} classes")));
        }
        let t = &self.enhancer_training;
        if t.batch == 0 || t.patch == 0 || t.patch > self.dataset.scene_size {
            return Err(Error::Config(format!(
                "enhancer patches of {} px must fit {} px scenes",
                t.patch, self.dataset.scene_size
            )));
        }
        let b = &self.baselines;
        if b.steps.is_empty() || b.dt.is_empty() || b.lambda_scales.is_empty() {
            return Err(Error::Config("baseline grids must be non-empty".into()));
        }
        if b.dt.iter().any(|&d| !(d > 0.0)) || b.lambda_scales.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("baseline dt and lambda scales must be positive".into()));
        }
        Ok(())
    }

    /// `output_dir`, unless the override variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

/// Initial heat maps (class probabilities) for a scene.
pub fn coarse_probabilities(config: &RunConfig, scene: &Scene, split: Split, index: usize) -> Result<ScoreStack> {
    let scores = match &config.coarse.provider {
        CoarseProviderConfig::Degrader(d) => {
            let mut rng = stream_rng(config.seed, &format!("degrader/{}/{index}", split.name()));
            let labels = match config.coarse.degrader_labels {
                LabelSource::Truth => &scene.truth,
                LabelSource::Reference => &scene.noisy_ref,
            };
            degrade_to_coarse(labels, NUM_CLASSES, d, &mut rng)?
        }
        CoarseProviderConfig::Network { checkpoint } => {
            let (params, _) = load_checkpoint(checkpoint)?;
            coarse_forward(&scene.image, &params, &config.coarse.network)?
        }
    };
    ScoreStack::new(ops::softmax_channels(scores.tensor())?)
}

/// Scene paired with its coarse heat maps and its exact labels.
pub fn prepare_scene(config: &RunConfig, scene: &Scene, split: Split, index: usize) -> Result<EnhancementScene> {
    let u0 = coarse_probabilities(config, scene, split, index)?;
    EnhancementScene::new(scene.image.clone(), u0, scene.truth.clone())
}

/// Trains an enhancer variant from seeded streams named after `tag`.
pub fn train_variant(
    config: &RunConfig,
    enhancer: &EnhancerConfig,
    scene: &EnhancementScene,
    tag: &str,
    steps: usize,
) -> Result<(ParamStore, Vec<f64>)> {
    let mut params = enhancer.init(&mut stream_rng(config.seed, &format!("{tag}/init")))?;
    let losses = train_with(enhancer, &mut params, config, scene, &format!("{tag}/batches"), steps)?;
    Ok((params, losses))
}

fn train_with(
    enhancer: &EnhancerConfig,
    params: &mut ParamStore,
    config: &RunConfig,
    scene: &EnhancementScene,
    stream: &str,
    steps: usize,
) -> Result<Vec<f64>> {
    let train = EnhancerTrainConfig {
        steps,
        ..config.enhancer_training.clone()
    };
    let mut rng = stream_rng(config.seed, stream);
    let every = (steps / 10).max(1);
    let mut window = 0.0;
    train_enhancer(enhancer, params, std::slice::from_ref(scene), &train, &mut rng, |step, loss| {
        window += loss;
        if (step + 1) % every == 0 {
            info!("{stream}: step {} mean loss {:.5}", step + 1, window / every as f64);
            window = 0.0;
        }
    })
}

/// Baseline parameters picked on the enhancement scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedBaseline {
    pub evolution: EvolutionConfig,
    pub edge_stop: EdgeStopParams,
    /// Mean IoU reached on the tuning scene.
    pub tuning_mean_iou: f64,
}

fn valid_dt(scheme: Scheme, dt: f32) -> bool {
    match scheme {
        Scheme::Heat | Scheme::PeronaMalik | Scheme::Anisotropic => dt <= MAX_EXPLICIT_DT,
        Scheme::Gac => true,
    }
}

/// Grid search over step count, time step and edge-stop scale; ties keep
/// the first candidate in grid order.
pub fn tune_baseline(scheme: Scheme, baselines: &BaselineConfig, scene: &EnhancementScene) -> Result<TunedBaseline> {
    let base = EdgeStopParams::for_image(&scene.image, baselines.edge_stop, baselines.presmooth_sigma)?;
    let max_steps = *baselines.steps.iter().max().expect("validated non-empty");
    // heat flow does not look at the image
    let scales: &[f32] = if scheme == Scheme::Heat { &[1.0] } else { &baselines.lambda_scales };
    let mut best: Option<TunedBaseline> = None;
    for &dt in baselines.dt.iter().filter(|&&d| valid_dt(scheme, d)) {
        for &scale in scales {
            let edge_stop = EdgeStopParams::new(baselines.edge_stop, base.lambda * scale, baselines.presmooth_sigma)?;
            let evolution = EvolutionConfig {
                dt,
                steps: max_steps,
                scheme,
            };
            let states = evolve_trajectory(&scene.u0, &scene.image, &evolution, &edge_stop)?;
            for &steps in &baselines.steps {
                let m = evaluate(&states[steps].argmax(), &scene.labels, NUM_CLASSES)?.mean_iou;
                if best.as_ref().map_or(true, |b| m > b.tuning_mean_iou) {
                    best = Some(TunedBaseline {
                        evolution: EvolutionConfig { steps, ..evolution },
                        edge_stop,
                        tuning_mean_iou: m,
                    });
                }
            }
        }
    }
    best.ok_or_else(|| Error::Config(format!("no admissible time step for {scheme}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: String,
    /// Iterations (enhancer) or time steps (baselines) applied.
    pub iteration: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub methods: Vec<MethodResult>,
    /// Per-iteration test metrics of the two enhancer variants.
    pub trajectories: Vec<(String, Vec<MetricsReport>)>,
    pub losses: Vec<(String, Vec<f64>)>,
    pub baselines: Vec<TunedBaseline>,
}

pub const RNN: &str = "rnn";
pub const RNN_CLASS_AGNOSTIC: &str = "rnn_class_agnostic";
pub const COARSE: &str = "coarse";

impl BenchmarkReport {
    pub fn get(&self, method: &str) -> Option<&MetricsReport> {
        self.methods.iter().find(|m| m.method == method).map(|m| &m.report)
    }

    /// Highest test mean IoU among the diffusion baselines.
    pub fn best_baseline(&self) -> Option<&MethodResult> {
        self.methods
            .iter()
            .filter(|m| Scheme::ALL.iter().any(|s| s.name() == m.method))
            .max_by(|a, b| a.report.mean_iou.total_cmp(&b.report.mean_iou))
    }

    pub fn table_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for m in &self.methods {
            out += &m.report.csv_row(&m.method, m.iteration);
            out.push('\n');
        }
        out
    }

    pub fn trajectory_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (name, reports) in &self.trajectories {
            for (t, r) in reports.iter().enumerate() {
                out += &r.csv_row(name, t);
                out.push('\n');
            }
        }
        out
    }
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{},{l}", i + 1).expect("string write");
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Generates the enhancement and test scenes and their coarse heat maps.
pub fn benchmark_scenes(config: &RunConfig) -> Result<(EnhancementScene, EnhancementScene)> {
    let d = &config.dataset;
    let enh = d.scene(config.seed, Split::Enhancement, 0)?;
    let test = d.scene(config.seed, Split::Test, 0)?;
    Ok((
        prepare_scene(config, &enh, Split::Enhancement, 0)?,
        prepare_scene(config, &test, Split::Test, 0)?,
    ))
}

/// The comparison table: coarse input, tuned diffusion baselines and the
/// two enhancer variants, all evaluated on the test scene. With `out`, the
/// CSVs, loss curves and enhancer checkpoints are written there.
pub fn run_benchmark(config: &RunConfig, out: Option<&Path>) -> Result<BenchmarkReport> {
    config.validate()?;
    info!("generating scenes");
    let (enh, test) = benchmark_scenes(config)?;
    let mut methods = vec![MethodResult {
        method: COARSE.into(),
        iteration: 0,
        report: evaluate(&test.u0.argmax(), &test.labels, NUM_CLASSES)?,
    }];

    let mut baselines = Vec::new();
    for &scheme in &config.baselines.schemes {
        let tuned = tune_baseline(scheme, &config.baselines, &enh)?;
        let states = evolve_trajectory(&test.u0, &test.image, &tuned.evolution, &tuned.edge_stop)?;
        let report = evaluate(&states.last().expect("non-empty").argmax(), &test.labels, NUM_CLASSES)?;
        info!("{scheme}: tuned {:?}, test mean IoU {:.4}", tuned.evolution, report.mean_iou);
        methods.push(MethodResult {
            method: scheme.name().into(),
            iteration: tuned.evolution.steps,
            report,
        });
        baselines.push(tuned);
    }

    let mut trajectories = Vec::new();
    let mut losses = Vec::new();
    for (name, mode) in [(RNN, MlpMode::PerClass), (RNN_CLASS_AGNOSTIC, MlpMode::ClassAgnostic)] {
        let enhancer = EnhancerConfig {
            mlp: mode,
            unshared: false,
            ..config.enhancer.clone()
        };
        info!("training {name}");
        let (params, curve) = train_variant(config, &enhancer, &enh, name, config.enhancer_training.steps)?;
        let states = enhance(&enhancer, &params, &test.u0, &test.image)?;
        let reports = evaluate_trajectory(&states, &test.labels)?;
        info!("{name}: test mean IoU {:.4}", reports.last().expect("non-empty").mean_iou);
        methods.push(MethodResult {
            method: name.into(),
            iteration: enhancer.iterations,
            report: reports.last().expect("non-empty").clone(),
        });
        if let Some(dir) = out {
            save_checkpoint(
                dir.join("checkpoints").join(name),
                &params,
                serde_json::json!({ "enhancer": enhancer }),
            )?;
        }
        trajectories.push((name.to_string(), reports));
        losses.push((name.to_string(), curve));
    }

    let report = BenchmarkReport {
        methods,
        trajectories,
        losses,
        baselines,
    };
    if let Some(dir) = out {
        write_file(&dir.join("benchmark.csv"), &report.table_csv())?;
        write_file(&dir.join("trajectory.csv"), &report.trajectory_csv())?;
        for (name, curve) in &report.losses {
            write_file(&dir.join(format!("loss_{name}.csv")), &loss_csv(curve))?;
        }
        let tuned = serde_json::to_string_pretty(&report.baselines)? + "\n";
        write_file(&dir.join("baselines.json"), &tuned)?;
    }
    Ok(report)
}

/// One paired repetition of the weight-sharing ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub repetition: usize,
    pub shared_train_loss: f64,
    pub unshared_train_loss: f64,
    pub shared_test_mean_iou: f64,
    pub unshared_test_mean_iou: f64,
}

impl AblationRun {
    /// The unshared variant fits the training scene at least as well and
    /// generalizes no better.
    pub fn shows_overfitting(&self) -> bool {
        self.unshared_train_loss <= self.shared_train_loss && self.unshared_test_mean_iou <= self.shared_test_mean_iou
    }
}

pub fn ablation_csv(runs: &[AblationRun]) -> String {
    let mut out =
        String::from("repetition,shared_train_loss,unshared_train_loss,shared_test_mean_iou,unshared_test_mean_iou\n");
    for r in runs {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.repetition, r.shared_train_loss, r.unshared_train_loss, r.shared_test_mean_iou, r.unshared_test_mean_iou
        )
        .expect("string write");
    }
    out
}

/// Trains shared and unshared enhancers from the same initial function on
/// the same patch sequence, `repetitions` times with different seeds.
/// Training loss is the full-scene loss on the enhancement scene.
pub fn run_ablation(config: &RunConfig, out: Option<&Path>) -> Result<Vec<AblationRun>> {
    config.validate()?;
    let (enh, test) = benchmark_scenes(config)?;
    let shared_cfg = EnhancerConfig {
        unshared: false,
        ..config.enhancer.clone()
    };
    let mut runs = Vec::with_capacity(config.ablation.repetitions);
    for r in 0..config.ablation.repetitions {
        let tag = format!("ablation/{r}");
        let mut shared = shared_cfg.init(&mut stream_rng(config.seed, &format!("{tag}/init")))?;
        let (unshared_cfg, mut unshared) = unshare(&shared_cfg, &shared)?;
        let batches = format!("{tag}/batches");
        train_with(&shared_cfg, &mut shared, config, &enh, &batches, config.ablation.steps)?;
        train_with(&unshared_cfg, &mut unshared, config, &enh, &batches, config.ablation.steps)?;
        let test_miou = |c: &EnhancerConfig, p: &ParamStore| -> Result<f64> {
            let states = enhance(c, p, &test.u0, &test.image)?;
            Ok(evaluate(&states.last().expect("non-empty").argmax(), &test.labels, NUM_CLASSES)?.mean_iou)
        };
        let run = AblationRun {
            repetition: r,
            shared_train_loss: evaluate_loss(&shared_cfg, &shared, &enh)?,
            unshared_train_loss: evaluate_loss(&unshared_cfg, &unshared, &enh)?,
            shared_test_mean_iou: test_miou(&shared_cfg, &shared)?,
            unshared_test_mean_iou: test_miou(&unshared_cfg, &unshared)?,
        };
        info!("{run:?}");
        runs.push(run);
    }
    if let Some(dir) = out {
        write_file(&dir.join("ablation.csv"), &ablation_csv(&runs))?;
    }
    Ok(runs)
}

/// Coarse heat maps for a stored dataset split (used by the CLI).
pub fn scene_probabilities(config: &RunConfig, scenes: &[Scene], split: Split) -> Result<Vec<ScoreStack>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| coarse_probabilities(config, s, split, i))
        .collect()
}

/// Writes `data/{train,enhancement,test}` under `root`.
pub fn write_dataset(config: &RunConfig, root: &Path) -> Result<()> {
    let dataset = config.dataset.generate(config.seed)?;
    config.dataset.write(config.seed, &dataset, root)
}

/// Loads a checkpoint written by the benchmark or the training command and
/// the enhancer configuration stored in its manifest.
pub fn load_enhancer(dir: &Path) -> Result<(EnhancerConfig, ParamStore)> {
    let (params, manifest) = load_checkpoint(dir)?;
    let config: EnhancerConfig = serde_json::from_value(
        manifest
            .meta
            .get("enhancer")
            .cloned()
            .ok_or_else(|| Error::Format {
                kind: "checkpoint",
                reason: "manifest lacks the enhancer configuration".into(),
            })?,
    )?;
    config.check_params(&params)?;
    Ok((config, params))
}

pub fn coarse_train_scenes(config: &RunConfig) -> Result<Vec<Scene>> {
    (0..config.dataset.train_scenes)
        .map(|i| config.dataset.scene(config.seed, Split::Train, i))
        .collect()
}

pub fn default_checkpoint_dir(config: &RunConfig, name: &str) -> PathBuf {
    config.resolved_output_dir().join("checkpoints").join(name)
}
