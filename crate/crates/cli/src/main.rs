use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use casseg::grid::BinaryMap;
use casseg::harness::{
    evaluate, image_net, network_gradient_error, predict, run_experiment, run_property_checks, salient_channel, train,
    EvalItem, ExperimentConfig, ExperimentKind, ExperimentOutcome, LossKind, Table, TrainItem, TrainLog,
    NETWORK_GRADIENT_TOLERANCE,
};
use casseg::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_atomic, write_json};
use casseg::metrics::{select_salient_channel, MetricsReport};
use casseg::nnet::NetSpec;
use casseg::synth::{gen_shapes, gen_toy_gaussians, toy_as_grid, ShapesConfig, SynthSample};

const OUT_ENV: &str = "CASSEG_OUT_DIR";
/// Written next to a checkpoint: the loss it was trained with and the
/// output channel read as the saliency map.
const TRAIN_INFO: &str = "train.json";

#[derive(Parser)]
#[command(name = "casseg", version, about = "Class-agnostic segmentation loss experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train the per-pixel network on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run an experiment preset and write its result files.
    Experiment(ExperimentArgs),
    /// Finite-difference check of the network gradient under every loss.
    GradCheck(GradCheckArgs),
    /// Run the property checks (the `properties` preset).
    CheckProperties(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Shapes,
    Toy,
}

#[derive(Args)]
struct Common {
    /// Output directory; defaults to a subdirectory of $CASSEG_OUT_DIR, or of
    /// `runs` when that is unset.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    preset: Option<ExperimentKind>,
    /// JSON config; fields it omits keep the preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.loss=ce`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    /// Images for shapes; majority-class points for toy.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: Option<u64>,
    /// Minority-class points (toy only).
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    minority: u64,
    /// Image height and width (shapes only).
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Regions per image, 2 or 3 (shapes only).
    #[arg(long, default_value_t = 2)]
    regions: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output channel read as the saliency map; defaults to the one chosen
    /// at training time.
    #[arg(long)]
    channel: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Maximum experiment cells run in parallel.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failures split by exit code: bad input is the caller's fault (2), anything
/// else means the run itself failed (1).
enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<casseg::Error> for Failure {
    fn from(e: casseg::Error) -> Self {
        Failure::Run(e.into())
    }
}

trait UsageContext<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageContext<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Experiment(a) => experiment_cmd(a, None),
        Command::GradCheck(a) => grad_check(a),
        Command::CheckProperties(a) => experiment_cmd(a, Some(ExperimentKind::Properties)),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn out_dir(common: &Common, default_name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(default_name)
    })
}

fn resolve_config(args: &ConfigArgs, seed: Option<u64>, fallback: ExperimentKind) -> Result<ExperimentConfig, Failure> {
    let preset = match (args.preset, &args.config) {
        (None, None) => Some(fallback),
        (p, _) => p,
    };
    let mut overrides = args.overrides.clone();
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    ExperimentConfig::resolve(preset, args.config.as_deref(), &overrides).usage()
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode, Failure> {
    let seed = a.common.seed.unwrap_or(0);
    let dir = out_dir(&a.common, "data");
    let (kind, samples) = match a.kind {
        DataKind::Shapes => {
            let cfg = ShapesConfig {
                count: a.count.unwrap_or(20) as usize,
                height: a.size,
                width: a.size,
                regions_per_image: a.regions,
                ..ShapesConfig::default()
            };
            cfg.validate().usage()?;
            ("shapes", gen_shapes(&cfg, seed)?)
        }
        DataKind::Toy => {
            let n1 = a.count.unwrap_or(10_000) as usize;
            let data = gen_toy_gaussians(n1, a.minority as usize, 0.2, seed).usage()?;
            // Sample 0 is the training set, sample 1 the test set.
            let samples = [data.train, data.test]
                .iter()
                .map(|points| {
                    let (image, regions, _) = toy_as_grid(points)?;
                    Ok(SynthSample {
                        image,
                        regions,
                        class_labels: vec![0, 1],
                        low_fidelity: false,
                        seed,
                    })
                })
                .collect::<casseg::Result<Vec<_>>>()?;
            ("toy", samples)
        }
    };
    save_dataset(&dir, kind, seed, &samples)?;
    eprintln!("wrote {} {kind} samples to {}", samples.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

/// Network inputs of a dataset: shapes images are standardized, toy points
/// are used as they are.
fn train_items(kind: &str, samples: &[SynthSample]) -> casseg::Result<Vec<TrainItem>> {
    samples
        .iter()
        .map(|s| {
            if kind == "toy" {
                Ok(TrainItem {
                    input: s.image.clone(),
                    regions: s.regions.clone(),
                    labels: s.class_map()?,
                })
            } else {
                TrainItem::from_sample(s)
            }
        })
        .collect()
}

fn eval_items(kind: &str, samples: &[SynthSample]) -> casseg::Result<Vec<EvalItem>> {
    train_items(kind, samples)?
        .into_iter()
        .map(|t| {
            Ok(EvalItem {
                mask: BinaryMap::from_class_map(&t.labels)?,
                input: t.input,
                regions: t.regions,
            })
        })
        .collect()
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode, Failure> {
    let cfg = resolve_config(&a.config, a.common.seed, ExperimentKind::FidelitySweep)?;
    let (index, samples) = load_dataset(&a.data).usage()?;
    if index.kind == "toy" {
        // Train on the training set only.
        let items = train_items(&index.kind, &samples[..1])?;
        let spec = NetSpec::mlp(2, cfg.train.hidden, cfg.train.channels);
        return finish_training(&a.common, &cfg, &items, &items_as_eval(&items)?, spec);
    }
    if samples.len() < 2 {
        return Err(Failure::Usage(anyhow::anyhow!("need at least 2 images to hold out a validation split")));
    }
    let validation = cfg.validation_count().min(samples.len() - 1);
    let (fit, held_out) = samples.split_at(samples.len() - validation);
    let items = train_items(&index.kind, fit)?;
    let spec = image_net(items[0].input.shape().channels, &cfg.train);
    finish_training(&a.common, &cfg, &items, &eval_items(&index.kind, held_out)?, spec)
}

fn items_as_eval(items: &[TrainItem]) -> casseg::Result<Vec<EvalItem>> {
    items
        .iter()
        .map(|t| {
            Ok(EvalItem {
                input: t.input.clone(),
                regions: t.regions.clone(),
                mask: BinaryMap::from_class_map(&t.labels)?,
            })
        })
        .collect()
}

fn finish_training(
    common: &Common,
    cfg: &ExperimentConfig,
    items: &[TrainItem],
    validation: &[EvalItem],
    spec: NetSpec,
) -> Result<ExitCode, Failure> {
    let dir = out_dir(common, "checkpoint");
    let (params, log) = train(items, &spec, &cfg.train, cfg.seed)?;
    let channel = salient_channel(cfg.train.loss, &params, &spec, validation)?;
    save_checkpoint(&dir, &spec, &params, log.steps())?;
    write_atomic(&dir.join("trainlog.csv"), single_log_csv(&log).as_bytes())?;
    write_json(
        &dir.join(TRAIN_INFO),
        &json!({ "loss": cfg.train.loss, "salient_channel": channel, "config": cfg }),
    )?;
    write_json(&dir.join("meta.json"), &json!({ "wall_seconds": log.wall_seconds }))?;
    eprintln!(
        "trained {} steps, final loss {:.6}, salient channel {channel}; checkpoint in {}",
        log.steps(),
        log.final_loss().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn single_log_csv(log: &TrainLog) -> String {
    let outcome = ExperimentOutcome {
        config: ExperimentConfig::preset(ExperimentKind::FidelitySweep),
        metrics: Table::default(),
        logs: vec![("train".into(), log.clone())],
        results: serde_json::Value::Null,
        checks: Vec::new(),
        curve_cell: None,
    };
    outcome.trainlog_csv()
}

fn eval_cmd(a: EvalArgs) -> Result<ExitCode, Failure> {
    let (spec, params, _) = load_checkpoint(&a.checkpoint).usage()?;
    let (index, samples) = load_dataset(&a.data).usage()?;
    // Toy datasets are evaluated on their test set.
    let samples = if index.kind == "toy" { &samples[1..] } else { &samples[..] };
    let items = eval_items(&index.kind, samples)?;
    if items.iter().any(|i| i.input.shape().channels != spec.input_channels()) {
        return Err(Failure::Usage(anyhow::anyhow!(
            "dataset has {} input channels, checkpoint expects {}",
            items[0].input.shape().channels,
            spec.input_channels()
        )));
    }
    let channel = match a.channel {
        Some(c) => Some(c),
        None => stored_channel(&a.checkpoint).or_else(|| {
            // No training record: fall back to aligning on the data itself.
            let outputs = predict(&params, &spec, items.iter().map(|i| &i.input)).ok()?;
            let masks: Vec<_> = items.iter().map(|i| i.mask.clone()).collect();
            select_salient_channel(&outputs, &masks).ok()
        }),
    }
    .context("could not determine the salient channel; pass --channel")
    .usage()?;
    if channel >= spec.output_channels() {
        return Err(Failure::Usage(anyhow::anyhow!(
            "channel {channel} out of range for {} outputs",
            spec.output_channels()
        )));
    }
    let report = evaluate(&params, &spec, channel, &items)?;
    let dir = out_dir(&a.common, "eval");
    let mut csv = MetricsReport::csv_header();
    csv.push('\n');
    csv.push_str(&report.csv_row());
    csv.push('\n');
    write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;
    write_json(
        &dir.join("report.json"),
        &json!({ "channel": channel, "images": items.len(), "metrics": report }),
    )?;
    eprintln!("F_beta {:.4}, MAE {:.4}; results in {}", report.f_beta, report.mae, dir.display());
    Ok(ExitCode::SUCCESS)
}

fn stored_channel(checkpoint: &Path) -> Option<usize> {
    let info: serde_json::Value = casseg::io::read_json(&checkpoint.join(TRAIN_INFO)).ok()?;
    info.get("salient_channel")?.as_u64().map(|c| c as usize)
}

fn experiment_cmd(a: ExperimentArgs, fixed: Option<ExperimentKind>) -> Result<ExitCode, Failure> {
    if let (Some(f), Some(p)) = (fixed, a.config.preset) {
        if f != p {
            return Err(Failure::Usage(anyhow::anyhow!("check-properties only runs the {f} preset")));
        }
    }
    let config_args = ConfigArgs {
        preset: fixed.or(a.config.preset),
        config: a.config.config.clone(),
        overrides: a.config.overrides.clone(),
    };
    if config_args.preset.is_none() && config_args.config.is_none() {
        return Err(Failure::Usage(anyhow::anyhow!("experiment needs --preset or --config")));
    }
    let cfg = resolve_config(&config_args, a.common.seed, ExperimentKind::Properties)?;
    let dir = out_dir(&a.common, cfg.experiment.name());
    let jobs = a.jobs as usize;
    let start = Instant::now();
    let outcome = match cfg.experiment {
        ExperimentKind::Properties => run_property_checks(&cfg, jobs)?,
        _ => run_experiment(&cfg, jobs)?,
    };
    outcome.write(&dir, start.elapsed().as_secs_f64(), jobs)?;
    for c in &outcome.checks {
        eprintln!("{}", c.line());
    }
    eprintln!("results in {}", dir.display());
    if outcome.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Failure::Run(anyhow::anyhow!("one or more checks failed")))
    }
}

fn grad_check(a: GradCheckArgs) -> Result<ExitCode, Failure> {
    let mut worst = 0.0f64;
    for loss in LossKind::ALL {
        let err = network_gradient_error(loss, a.seed)?;
        eprintln!("{loss}: max relative error {err:.3e}");
        worst = worst.max(err);
    }
    println!("{worst:.6e}");
    if worst < NETWORK_GRADIENT_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {worst:.3e} >= {NETWORK_GRADIENT_TOLERANCE:e}");
        Ok(ExitCode::from(1))
    }
}
