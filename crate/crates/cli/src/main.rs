//! `cprc`: generate shape-scene corpora, train and evaluate captioners,
//! run the ablation suite and the built-in verification checks.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cprc::checkpoint::Checkpoint;
use cprc::data::{build_dataset, load_dataset, save_dataset, SceneSpec, SemiDataset};
use cprc::train::{ablation_csv, ablation_suite, check_compatible, evaluate, AblationMode, TrainConfig, Trainer};
use cprc::verify::{self, Fault, Suite, VerifyOptions};

use crate::config::{resolve, Overrides};

/// Version tag written into every JSON document the CLI produces.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "cprc", version, about = "Semi-supervised captioning on synthetic shape scenes")]
struct Cli {
    /// Seed for every random stream the command uses.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (computation is currently sequential; values above 1 are accepted).
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a corpus and write it as JSON lines.
    GenData(GenDataArgs),
    /// Train a captioner.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train one model per ablation mode and tabulate the metrics.
    Ablate(AblateArgs),
    /// Print greedy captions for dataset images.
    Caption(CaptionArgs),
    /// Run gradient, metric and invariant checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
    #[arg(long, default_value_t = 0.01, value_parser = parse_ratio)]
    labeled_ratio: f64,
    #[arg(long, default_value_t = 200)]
    test_scenes: usize,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML file with training options; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one option by dotted key, e.g. `--set loss.tau=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Number of strong augmentations per undescribed image.
    #[arg(long)]
    k_augment: Option<usize>,
    /// Keep only this share of the undescribed pool.
    #[arg(long, value_parser = parse_fraction)]
    unlabeled_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<AblationMode>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write a checkpoint every this many epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["test", "described"])]
    split: String,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated modes; all modes when omitted.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<AblationMode>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["test", "described", "undescribed"])]
    split: String,
    /// Caption only this item of the split.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, default_value_t = 10)]
    limit: usize,
    /// Also write the captions as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Run only these suites (gradients, metrics, invariants).
    #[arg(long, value_delimiter = ',')]
    only: Vec<Suite>,
    /// Deliberately break a component to show the checks catch it.
    #[arg(long = "inject-fault", alias = "fault")]
    fault: Option<Fault>,
    /// Also write the report as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1], got {v}"))
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1], got {v}"))
    }
}

/// Failure classes, mapped to exit codes 1 and 2.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(f) => {
            let code = f.code();
            let (Failure::Usage(e) | Failure::Runtime(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    if cli.threads > 1 {
        log::info!("--threads {} requested; training runs on one thread", cli.threads);
    }
    match cli.command {
        Command::GenData(a) => gen_data(a, cli.seed.unwrap_or(0)),
        Command::Train(a) => train(a, cli.seed),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a, cli.seed),
        Command::Caption(a) => caption(a),
        Command::Verify(a) => verify(a, cli.seed),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> anyhow::Result<SemiDataset> {
    let ds = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    ds.validate()?;
    Ok(ds)
}

fn gen_data(a: GenDataArgs, seed: u64) -> CliResult<ExitCode> {
    let spec = SceneSpec::default();
    let ds = build_dataset(&spec, a.scenes, a.labeled_ratio, a.test_scenes, seed).map_err(|e| match e {
        cprc::Error::Config(_) => usage(e),
        other => Failure::Runtime(other.into()),
    })?;
    save_dataset(&ds, &a.out)?;
    println!("N_l={} N_u={} N_test={}", ds.described.len(), ds.undescribed.len(), ds.test.len());
    Ok(ExitCode::SUCCESS)
}

fn overrides(c: &ConfigArgs, mode: Option<AblationMode>, seed: Option<u64>) -> Overrides {
    Overrides {
        epochs: c.epochs,
        lambda1: c.lambda1,
        lambda2: c.lambda2,
        tau: c.tau,
        k_augment: c.k_augment,
        mode,
        seed,
    }
}

/// Resolves the config and prints it to stderr before any training starts.
fn resolved_config(c: &ConfigArgs, mode: Option<AblationMode>, seed: Option<u64>) -> CliResult<TrainConfig> {
    let config = resolve(c.config.as_deref(), &c.sets, &overrides(c, mode, seed)).map_err(usage)?;
    let text = toml::to_string(&config).map_err(|e| Failure::Runtime(e.into()))?;
    eprintln!("# resolved config (hash {})\n{text}", config.hash());
    Ok(config)
}

fn config_json(config: &TrainConfig) -> serde_json::Value {
    json!({ "schema_version": SCHEMA_VERSION, "config_hash": config.hash(), "config": config })
}

fn train(a: TrainArgs, seed: Option<u64>) -> CliResult<ExitCode> {
    let config = resolved_config(&a.config, a.mode, seed)?;
    if a.checkpoint_every == Some(0) {
        return Err(usage(anyhow!("--checkpoint-every must be >= 1")));
    }
    let mut ds = load_data(&a.data)?;
    if let Some(f) = a.config.unlabeled_fraction {
        ds = ds.with_unlabeled_fraction(f)?;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("config.json"), &config_json(&config))?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            Trainer::resume(config.clone(), &ds, ck)?
        }
        None => Trainer::<f32>::new(config.clone(), &ds)?,
    };
    let log_path = a.out.join("train_log.jsonl");
    let log_file = if a.resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);

    while trainer.epochs_done() < config.epochs {
        let outcome = trainer.run_epoch(Some(&mut log));
        log.flush().context("flushing the training log")?;
        let e = outcome?;
        let cider = e.metrics.map(|m| format!(" CIDEr-D {:.4}", m.cider_d)).unwrap_or_default();
        eprintln!("epoch {:>3} lr {:.3e} total {:.4}{cider}", e.epoch, e.learning_rate, e.total);
        let done = trainer.epochs_done();
        if a.checkpoint_every.is_some_and(|n| done % n == 0) && done < config.epochs {
            trainer.checkpoint().save(&a.out.join(format!("epoch-{done:03}.ckpt")))?;
        }
    }
    trainer.checkpoint().save(&a.out.join("model.ckpt"))?;
    let record = trainer.record();
    write_json(&a.out.join("record.json"), &serde_json::to_value(record)?)?;
    if let Some(m) = record.final_metrics() {
        println!("{}", serde_json::to_string(&json!({ "schema_version": SCHEMA_VERSION, "metrics": m }))?);
    }
    Ok(ExitCode::SUCCESS)
}

fn split_scenes<'a>(ds: &'a SemiDataset, split: &str) -> &'a [cprc::data::Scene] {
    match split {
        "described" => &ds.described,
        _ => &ds.test,
    }
}

fn eval(a: EvalArgs) -> CliResult<ExitCode> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ds = load_data(&a.data)?;
    check_compatible(ck.model.config(), &ds)?;
    let scenes = split_scenes(&ds, &a.split);
    let (metrics, _) = evaluate(&ck.model, scenes, &ds.vocabulary)?;
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "split": a.split,
        "items": scenes.len(),
        "epoch": ck.epoch,
        "metrics": metrics,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: AblateArgs, seed: Option<u64>) -> CliResult<ExitCode> {
    let config = resolved_config(&a.config, None, seed)?;
    let modes = if a.modes.is_empty() { AblationMode::ALL.to_vec() } else { a.modes.clone() };
    let mut ds = load_data(&a.data)?;
    if let Some(f) = a.config.unlabeled_fraction {
        ds = ds.with_unlabeled_fraction(f)?;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("config.json"), &config_json(&config))?;
    let mut log = BufWriter::new(File::create(a.out.join("train_log.jsonl")).context("creating the training log")?);
    let rows = ablation_suite(&ds, &config, &modes, Some(&mut log))?;
    log.flush().context("flushing the training log")?;
    let csv = ablation_csv(&rows);
    fs::write(a.out.join("ablation.csv"), &csv).context("writing ablation.csv")?;
    write_json(&a.out.join("ablation.json"), &json!({ "schema_version": SCHEMA_VERSION, "rows": rows }))?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn caption(a: CaptionArgs) -> CliResult<ExitCode> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ds = load_data(&a.data)?;
    check_compatible(ck.model.config(), &ds)?;
    let items: Vec<(&cprc::Image, Option<&Vec<String>>)> = match a.split.as_str() {
        "undescribed" => ds.undescribed.iter().map(|i| (i, None)).collect(),
        split => split_scenes(&ds, split).iter().map(|s| (&s.image, Some(&s.caption))).collect(),
    };
    let chosen: Vec<usize> = match a.index {
        Some(i) if i >= items.len() => {
            return Err(usage(anyhow!("--index {i} is out of range for the {} split ({} items)", a.split, items.len())))
        }
        Some(i) => vec![i],
        None => (0..items.len().min(a.limit)).collect(),
    };
    let mut out = Vec::with_capacity(chosen.len());
    for i in chosen {
        let (image, reference) = items[i];
        let words = cprc::train::caption_image(&ck.model, image, &ds.vocabulary)?;
        let text = words.join(" ");
        match reference {
            Some(r) => println!("{i}\t{text}\t(reference: {})", r.join(" ")),
            None => println!("{i}\t{text}"),
        }
        out.push(json!({ "index": i, "caption": text, "reference": reference.map(|r| r.join(" ")) }));
    }
    if let Some(path) = &a.out {
        write_json(path, &json!({ "schema_version": SCHEMA_VERSION, "split": a.split, "captions": out }))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs, seed: Option<u64>) -> CliResult<ExitCode> {
    let report = verify::run(&VerifyOptions { only: a.only, fault: a.fault, seed })?;
    for c in &report.checks {
        println!("{c}");
    }
    let failed = report.failures().count();
    println!("{} checks, {failed} failed, {:.2}s", report.checks.len(), report.seconds);
    if let Some(path) = &a.out {
        let checks: Vec<_> = report
            .checks
            .iter()
            .map(|c| json!({ "suite": c.suite.name(), "name": c.name, "passed": c.passed, "detail": c.detail }))
            .collect();
        write_json(path, &json!({ "schema_version": SCHEMA_VERSION, "passed": report.passed(), "checks": checks }))?;
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
