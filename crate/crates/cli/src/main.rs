//! `classmap`: scene synthesis, coarse and enhancer training, enhancement,
//! diffusion baselines, evaluation and the benchmark table.
//!
//! Exit codes: 0 on success, 1 for usage, configuration and input errors,
//! 2 when a computation fails numerically (divergence, non-finite values).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use classmap::autodiff::{load_checkpoint, save_checkpoint, ParamStore};
use classmap::coarse::{degrade_to_coarse, train_coarse, CoarseProviderConfig, CoarseTrainConfig};
use classmap::enhancer::{enhance, train_enhancer, EnhancerConfig, EnhancerTrainConfig, MlpMode};
use classmap::experiments::{
    ablation_csv, loss_csv, prepare_scene, run_ablation, run_benchmark, stream_rng, write_file, RunConfig,
};
use classmap::metrics::{evaluate, CSV_HEADER};
use classmap::pde::{evolve_trajectory, EdgeStopKind, EdgeStopParams, EvolutionConfig, Scheme};
use classmap::synth::{load_split, Split, NUM_CLASSES};
use classmap::{netpbm, ops, Error, LabelMap, Result, Rng, ScoreStack, Tensor};

#[derive(Parser)]
#[command(name = "classmap", version, about = "Learned iterative refinement of coarse classification maps")]
struct Cli {
    /// Sequential, bit-reproducible execution (the only mode this build
    /// implements; accepted for interface compatibility).
    #[arg(long, global = true)]
    strict: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train, enhancement and test scenes to <output_dir>/data.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the coarse network on the training scenes' reference labels.
    TrainCoarse {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from the checkpoint in <output_dir>/checkpoints/coarse.
        #[arg(long)]
        resume: bool,
        /// Save a checkpoint every this many steps.
        #[arg(long, default_value_t = 250)]
        checkpoint_every: usize,
    },
    /// Train the enhancer on the enhancement scene.
    TrainRnn {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        /// One perceptron shared by all classes.
        #[arg(long)]
        class_agnostic: bool,
        /// Separate parameters for every iteration.
        #[arg(long)]
        unshared: bool,
        #[arg(long, default_value_t = 250)]
        checkpoint_every: usize,
    },
    /// Run a trained enhancer and dump every iteration.
    Enhance {
        /// Enhancer checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: MapInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a diffusion baseline on coarse heat maps.
    Baseline {
        #[arg(long, value_parser = parse_scheme)]
        scheme: Scheme,
        #[command(flatten)]
        input: MapInput,
        #[arg(long, default_value_t = 0.1)]
        dt: f32,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Edge-stop scale; defaults to the 90th percentile of the image
        /// gradient magnitude.
        #[arg(long)]
        lambda: Option<f32>,
        #[arg(long, value_enum, default_value_t = EdgeStop::Rational)]
        edge_stop: EdgeStop,
        /// Gaussian presmoothing of the luminance before differentiation.
        #[arg(long, default_value_t = 1.0)]
        presmooth: f64,
        /// Ground truth; when given, a metrics row is written.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Dump per-step heat maps.
        #[arg(long)]
        snapshots: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted label map with the ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "eval")]
        run_id: String,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coarse input, tuned baselines and both enhancer variants on the test
    /// scene; writes benchmark.csv and trajectory.csv.
    Benchmark {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also run the weight-sharing ablation (ablation.csv).
        #[arg(long)]
        ablation: bool,
    },
}

#[derive(clap::Args)]
struct MapInput {
    /// RGB image (binary PPM).
    #[arg(long)]
    image: PathBuf,
    /// Initial heat maps as a TSR tensor [H, W, K] of class probabilities.
    #[arg(long, conflicts_with = "labels", required_unless_present = "labels")]
    scores: Option<PathBuf>,
    /// Label map (PGM) turned into heat maps by the configured degrader.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Run configuration supplying the degrader settings and seed.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EdgeStop {
    Rational,
    Exponential,
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn snapshot_config(config: &RunConfig, out: &Path) -> Result<()> {
    write_file(&out.join("config.json"), &config.to_json())
}

/// Generator position stored in checkpoint metadata so that a resumed run
/// draws the same batches as an uninterrupted one.
fn rng_meta(rng: &Rng) -> serde_json::Value {
    serde_json::Value::String(rng.get_word_pos().to_string())
}

fn restore_rng(rng: &mut Rng, meta: &serde_json::Value) -> Result<()> {
    let pos = meta
        .get("rng_word_pos")
        .and_then(|v| v.as_str())
        .and_then(|s| s.parse::<u128>().ok())
        .ok_or_else(|| Error::Format {
            kind: "checkpoint",
            reason: "missing generator position".into(),
        })?;
    rng.set_word_pos(pos);
    Ok(())
}

fn append_losses(path: &Path, first_step: usize, losses: &[f64]) -> Result<()> {
    let mut text = if first_step == 0 || !path.exists() {
        String::from("step,loss\n")
    } else {
        std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?
    };
    let body = loss_csv(losses);
    for (i, line) in body.lines().skip(1).enumerate() {
        let loss = line.split_once(',').map_or("", |(_, l)| l);
        text += &format!("{},{loss}\n", first_step + i + 1);
    }
    write_file(path, &text)
}

fn cmd_synth(config: &RunConfig) -> Result<()> {
    let out = config.resolved_output_dir();
    classmap::experiments::write_dataset(config, &out.join("data"))?;
    snapshot_config(config, &out)?;
    info!("wrote scenes to {}", out.join("data").display());
    Ok(())
}

fn cmd_train_coarse(config: &RunConfig, resume: bool, every: usize) -> Result<()> {
    let out = config.resolved_output_dir();
    let scenes = load_split(&out.join("data"), Split::Train)?;
    let net = &config.coarse.network;
    let ckpt = out.join("checkpoints").join("coarse");
    let mut rng = stream_rng(config.seed, "coarse/batches");
    let mut params = if resume {
        let (p, manifest) = load_checkpoint(&ckpt)?;
        restore_rng(&mut rng, &manifest.meta)?;
        p
    } else {
        net.init(&mut stream_rng(config.seed, "coarse/init"))?
    };
    let total = config.coarse.training.steps;
    let mut done = params.step_count() as usize;
    let loss_path = out.join("loss_coarse.csv");
    while done < total {
        let chunk = every.max(1).min(total - done);
        let train = CoarseTrainConfig {
            steps: chunk,
            ..config.coarse.training.clone()
        };
        let start = done;
        let losses = train_coarse(&mut params, net, &scenes, &train, &mut rng, |s, l| {
            log::debug!("coarse step {} loss {l:.5}", start + s + 1)
        })?;
        append_losses(&loss_path, done, &losses)?;
        done += chunk;
        let meta = serde_json::json!({ "network": net, "rng_word_pos": rng_meta(&rng) });
        save_checkpoint(&ckpt, &params, meta)?;
        info!("coarse: {done}/{total} steps, last loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
    }
    snapshot_config(config, &out)
}

fn cmd_train_rnn(config: &RunConfig, resume: bool, agnostic: bool, unshared: bool, every: usize) -> Result<()> {
    let out = config.resolved_output_dir();
    let scene = load_split(&out.join("data"), Split::Enhancement)?
        .into_iter()
        .next()
        .expect("load_split returns at least one scene");
    let prepared = prepare_scene(config, &scene, Split::Enhancement, 0)?;
    let enhancer = EnhancerConfig {
        mlp: if agnostic { MlpMode::ClassAgnostic } else { config.enhancer.mlp },
        unshared: unshared || config.enhancer.unshared,
        ..config.enhancer.clone()
    };
    let name = match (enhancer.mlp, enhancer.unshared) {
        (MlpMode::PerClass, false) => "rnn",
        (MlpMode::ClassAgnostic, false) => "rnn_class_agnostic",
        (MlpMode::PerClass, true) => "rnn_unshared",
        (MlpMode::ClassAgnostic, true) => "rnn_class_agnostic_unshared",
    };
    let ckpt = out.join("checkpoints").join(name);
    let mut rng = stream_rng(config.seed, &format!("{name}/batches"));
    let mut params: ParamStore = if resume {
        let (p, manifest) = load_checkpoint(&ckpt)?;
        restore_rng(&mut rng, &manifest.meta)?;
        enhancer.check_params(&p)?;
        p
    } else {
        enhancer.init(&mut stream_rng(config.seed, &format!("{name}/init")))?
    };
    let total = config.enhancer_training.steps;
    let mut done = params.step_count() as usize;
    let loss_path = out.join(format!("loss_{name}.csv"));
    while done < total {
        let chunk = every.max(1).min(total - done);
        let train = EnhancerTrainConfig {
            steps: chunk,
            ..config.enhancer_training.clone()
        };
        let losses = train_enhancer(&enhancer, &mut params, std::slice::from_ref(&prepared), &train, &mut rng, |_, _| {})?;
        append_losses(&loss_path, done, &losses)?;
        done += chunk;
        let meta = serde_json::json!({ "enhancer": enhancer, "rng_word_pos": rng_meta(&rng) });
        save_checkpoint(&ckpt, &params, meta)?;
        info!("{name}: {done}/{total} steps, last loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
    }
    snapshot_config(config, &out)
}

/// Image and initial heat maps (class probabilities) from the command line.
fn read_input(input: &MapInput) -> Result<(Tensor, ScoreStack)> {
    let image = netpbm::load_image(&input.image)?;
    let g = image.grid()?;
    let u0 = match (&input.scores, &input.labels) {
        (Some(path), _) => ScoreStack::new(Tensor::load(path)?)?,
        (None, Some(path)) => {
            let config = load_config(input.config.as_deref())?;
            let labels = netpbm::load_labels(path)?;
            let CoarseProviderConfig::Degrader(d) = &config.coarse.provider else {
                return Err(Error::Config("--labels needs a degrader coarse provider".into()));
            };
            let mut rng = stream_rng(config.seed, "degrader/cli");
            let logits = degrade_to_coarse(&labels, NUM_CLASSES, d, &mut rng)?;
            ScoreStack::new(ops::softmax_channels(logits.tensor())?)?
        }
        (None, None) => return Err(Error::InvalidArgument("give --scores or --labels".into())),
    };
    let ug = u0.grid();
    if (ug.height, ug.width) != (g.height, g.width) {
        return Err(Error::Shape(format!(
            "heat maps {}x{} do not match the {}x{} image",
            ug.height, ug.width, g.height, g.width
        )));
    }
    Ok((image, u0))
}

/// Heat maps (PGM per class), argmax colours (PPM) and the raw tensor.
fn dump_state(out: &Path, t: usize, u: &ScoreStack) -> Result<()> {
    for k in 0..u.classes() {
        netpbm::save_unit_map(out.join(format!("u_t{t}_class{k}.pgm")), &u.tensor().channel(k)?)?;
    }
    netpbm::save_label_colors(out.join(format!("argmax_t{t}.ppm")), &u.argmax())?;
    u.tensor().save(out.join(format!("u_t{t}.tsr")))
}

fn cmd_enhance(checkpoint: &Path, input: &MapInput, out: &Path) -> Result<()> {
    let (enhancer, params) = classmap::experiments::load_enhancer(checkpoint)?;
    let (image, u0) = read_input(input)?;
    let states = enhance(&enhancer, &params, &u0, &image)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (t, u) in states.iter().enumerate() {
        dump_state(out, t, u)?;
    }
    info!("wrote {} states to {}", states.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_baseline(
    scheme: Scheme,
    input: &MapInput,
    dt: f32,
    steps: usize,
    lambda: Option<f32>,
    edge_stop: EdgeStop,
    presmooth: f64,
    truth: Option<&Path>,
    snapshots: bool,
    out: &Path,
) -> Result<()> {
    let (image, u0) = read_input(input)?;
    let kind = match edge_stop {
        EdgeStop::Rational => EdgeStopKind::Rational,
        EdgeStop::Exponential => EdgeStopKind::Exponential,
    };
    let params = match lambda {
        Some(l) => EdgeStopParams::new(kind, l, presmooth)?,
        None => EdgeStopParams::for_image(&image, kind, presmooth)?,
    };
    let evolution = EvolutionConfig { dt, steps, scheme };
    let states = evolve_trajectory(&u0, &image, &evolution, &params)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if snapshots {
        for (t, u) in states.iter().enumerate() {
            dump_state(out, t, u)?;
        }
    }
    let last = states.last().expect("trajectory holds the input");
    last.tensor().save(out.join("final.tsr"))?;
    netpbm::save_labels(out.join("final_labels.pgm"), &last.argmax())?;
    netpbm::save_label_colors(out.join("final.ppm"), &last.argmax())?;
    if let Some(path) = truth {
        let truth = netpbm::load_labels(path)?;
        let report = evaluate(&last.argmax(), &truth, NUM_CLASSES)?;
        let csv = format!("{CSV_HEADER}\n{}\n", report.csv_row(scheme.name(), steps));
        write_file(&out.join("metrics.csv"), &csv)?;
        print!("{csv}");
    }
    Ok(())
}

fn cmd_eval(pred: &Path, truth: &Path, run_id: &str, out: Option<&Path>) -> Result<()> {
    let pred: LabelMap = netpbm::load_labels(pred)?;
    let truth = netpbm::load_labels(truth)?;
    let report = evaluate(&pred, &truth, NUM_CLASSES)?;
    let csv = format!("{CSV_HEADER}\n{}\n", report.csv_row(run_id, 0));
    match out {
        Some(p) => write_file(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_benchmark(config: &RunConfig, ablation: bool) -> Result<()> {
    let out = config.resolved_output_dir();
    snapshot_config(config, &out)?;
    let report = run_benchmark(config, Some(&out))?;
    print!("{}", report.table_csv());
    if ablation {
        let runs = run_ablation(config, Some(&out))?;
        print!("{}", ablation_csv(&runs));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if !cli.strict {
        log::debug!("execution is sequential; --strict changes nothing");
    }
    match cli.command {
        Command::Synth { config } => cmd_synth(&load_config(config.as_deref())?),
        Command::TrainCoarse {
            config,
            resume,
            checkpoint_every,
        } => cmd_train_coarse(&load_config(config.as_deref())?, resume, checkpoint_every),
        Command::TrainRnn {
            config,
            resume,
            class_agnostic,
            unshared,
            checkpoint_every,
        } => cmd_train_rnn(
            &load_config(config.as_deref())?,
            resume,
            class_agnostic,
            unshared,
            checkpoint_every,
        ),
        Command::Enhance { checkpoint, input, out } => cmd_enhance(&checkpoint, &input, &out),
        Command::Baseline {
            scheme,
            input,
            dt,
            steps,
            lambda,
            edge_stop,
            presmooth,
            truth,
            snapshots,
            out,
        } => cmd_baseline(
            scheme,
            &input,
            dt,
            steps,
            lambda,
            edge_stop,
            presmooth,
            truth.as_deref(),
            snapshots,
            &out,
        ),
        Command::Eval {
            pred,
            truth,
            run_id,
            out,
        } => cmd_eval(&pred, &truth, &run_id, out.as_deref()),
        Command::Benchmark { config, ablation } => cmd_benchmark(&load_config(config.as_deref())?, ablation),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
