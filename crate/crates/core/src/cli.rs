//! Command-line front end: argument parsing and the five commands.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, RunConfig, VariantSpec};
use crate::data::{generate_toy, load_csv, write_csv, Dataset, DatasetMeta, Sample};
use crate::error::{invalid, io_err, Error, Result};
use crate::nets::ModelBundle;
use crate::theory::BOUND_TOLERANCE;
use crate::trainer::{evaluate, run_experiment, run_experiment_with, MetricsRecord, Preset};

pub const SOURCE_FILE: &str = "source.csv";
pub const TARGET_FILE: &str = "target.csv";
pub const TARGET_ORACLE_FILE: &str = "target_oracle.csv";
pub const META_FILE: &str = "meta.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const STEP_LOSSES_FILE: &str = "losses.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const MODEL_FILE: &str = "model.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";

/// Column order of the bound trace table.
pub const BOUND_TRACE_COLUMNS: [&str; 10] = [
    "epoch",
    "w_error_l1",
    "delta_bar",
    "e_type1",
    "e_tgt_shared",
    "e_src_shared",
    "d_hdh_proxy",
    "rhs_intermediate",
    "rhs_full",
    "target_accuracy",
];

#[derive(Debug, Parser)]
#[command(name = "pdalab", version, about = "Partial domain adaptation experiments on toy data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic source/target CSV files and metadata.
    GenerateData(RunArgs),
    /// Train one variant and write metrics, confusion matrix and model.
    Train(TrainArgs),
    /// Tabulate the bound terms stored in a metrics file.
    BoundTrace(BoundTraceArgs),
    /// Run the component ablation over several seeds.
    Ablate(AblateArgs),
    /// Score a saved model on a labeled CSV file.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overriding the configured one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub variant: Option<Preset>,
}

#[derive(Debug, Clone, Args)]
pub struct BoundTraceArgs {
    /// Metrics file written by `train`.
    pub metrics: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of consecutive seeds per variant, starting at the configured seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled CSV file.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for the confusion matrix.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(args: &RunArgs, variant: Option<Preset>) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(v) = variant {
        cfg.variant = VariantSpec::Preset(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(args) => {
            let cfg = resolve_config(&args, None)?;
            for p in cmd_generate_data(&cfg)? {
                log::info!("wrote {}", p.display());
            }
        }
        Command::Train(args) => {
            let cfg = resolve_config(&args.run, args.variant)?;
            let rec = cmd_train(&cfg)?;
            println!(
                "epoch {} target accuracy {:.4} w_error_l1 {:.4}",
                rec.epoch, rec.target_accuracy, rec.bound.w_error_l1
            );
        }
        Command::BoundTrace(args) => {
            let table = cmd_bound_trace(&args.metrics)?;
            match &args.out {
                Some(path) => fs::write(path, table).map_err(io_err(path))?,
                None => print!("{table}"),
            }
        }
        Command::Ablate(args) => {
            let cfg = resolve_config(&args.run, None)?;
            let rows = cmd_ablate(&cfg, args.seeds, args.workers)?;
            for r in rows {
                println!("{:<24} {:.2} ± {:.2}", r.variant, 100.0 * r.mean, 100.0 * r.std);
            }
        }
        Command::Eval(args) => {
            let (acc, confusion) = cmd_eval(&args.model, &args.data)?;
            if let Some(dir) = &args.out {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                write_confusion(&dir.join(CONFUSION_FILE), &confusion)?;
            }
            println!("accuracy {acc:.4}");
        }
    }
    Ok(())
}

/// Writes the synthetic dataset. Validation happens before anything touches
/// the file system.
pub fn cmd_generate_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let DataSource::Synthetic(spec) = &cfg.data else {
        return Err(Error::Config("generate-data needs a synthetic data section".into()));
    };
    let toy = generate_toy(spec, cfg.seed)?;
    let labeled_target = Dataset {
        dim: toy.target.dim,
        samples: toy
            .target
            .samples
            .iter()
            .zip(&toy.oracle.target_labels)
            .map(|(s, &y)| Sample { y: Some(y), ..s.clone() })
            .collect(),
    };
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let paths: Vec<PathBuf> = [SOURCE_FILE, TARGET_FILE, TARGET_ORACLE_FILE, META_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_csv(&paths[0], &toy.source)?;
    write_csv(&paths[1], &toy.target)?;
    write_csv(&paths[2], &labeled_target)?;
    DatasetMeta {
        num_source_classes: spec.num_source_classes,
        shared_classes: Some(spec.shared_classes.clone()),
    }
    .save(&paths[3])?;
    Ok(paths)
}

/// Trains, streaming one metrics line per epoch, and returns the last record.
pub fn cmd_train(cfg: &RunConfig) -> Result<MetricsRecord> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let metrics_path = dir.join(METRICS_FILE);
    let timings_path = dir.join(TIMINGS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let mut timings = BufWriter::new(File::create(&timings_path).map_err(io_err(&timings_path))?);
    writeln!(timings, "epoch,wall_clock_seconds").map_err(io_err(&timings_path))?;
    let trace = run_experiment_with(cfg, |rec| {
        let seconds = rec.wall_clock_seconds.unwrap_or(0.0);
        let line = MetricsRecord {
            wall_clock_seconds: None,
            ..rec.clone()
        }
        .to_json_line()?;
        writeln!(metrics, "{line}").map_err(io_err(&metrics_path))?;
        metrics.flush().map_err(io_err(&metrics_path))?;
        writeln!(timings, "{},{seconds}", rec.epoch).map_err(io_err(&timings_path))?;
        log::info!(
            "epoch {} accuracy {:.4} w_error_l1 {:.4}",
            rec.epoch,
            rec.target_accuracy,
            rec.bound.w_error_l1
        );
        Ok(())
    })?;
    timings.flush().map_err(io_err(&timings_path))?;

    let losses_path = dir.join(STEP_LOSSES_FILE);
    let mut w = csv::Writer::from_path(&losses_path)?;
    w.write_record(["step", "l_sup", "l_self", "l_adv", "objective"])?;
    for (step, l) in &trace.step_losses {
        w.write_record([step.to_string(), l.l_sup.to_string(), l.l_self.to_string(), l.l_adv.to_string(), l.objective.to_string()])?;
    }
    w.flush().map_err(io_err(&losses_path))?;

    write_confusion(&dir.join(CONFUSION_FILE), &trace.confusion)?;
    let model_path = dir.join(MODEL_FILE);
    fs::write(&model_path, serde_json::to_string(&trace.bundle)?).map_err(io_err(&model_path))?;
    Ok(trace.final_record().clone())
}

/// Confusion matrix as CSV; rows are true classes, columns predicted ones.
pub fn write_confusion(path: &Path, confusion: &[Vec<usize>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true".to_string()];
    header.extend((0..confusion.len()).map(|j| format!("pred_{j}")));
    w.write_record(&header)?;
    for (i, row) in confusion.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = MetricsRecord::from_json_line(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// One row per stored record in [`BOUND_TRACE_COLUMNS`] order. Nothing is
/// recomputed; the stored inequality is re-checked on every row.
pub fn cmd_bound_trace(metrics: &Path) -> Result<String> {
    let records = read_metrics(metrics)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(BOUND_TRACE_COLUMNS)?;
    for r in &records {
        let b = &r.bound;
        if b.w_error_l1 > b.rhs_intermediate + BOUND_TOLERANCE {
            return Err(Error::BoundViolation {
                epoch: r.epoch,
                lhs: b.w_error_l1,
                rhs: b.rhs_intermediate,
            });
        }
        let vals = [
            b.w_error_l1,
            b.delta_bar,
            b.e_type1,
            b.e_tgt_shared,
            b.e_src_shared,
            b.d_hdh_proxy,
            b.rhs_intermediate,
            b.rhs_full,
            r.target_accuracy,
        ];
        let mut rec = vec![r.epoch.to_string()];
        rec.extend(vals.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

/// Mean and sample standard deviation of final target accuracy for one row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Preset,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(variant: Preset, accuracies: Vec<f64>) -> AblationRow {
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    AblationRow {
        variant,
        accuracies,
        mean,
        std,
    }
}

/// Final target accuracy of each preset over `seeds` consecutive seeds,
/// runs fanned out over `workers` threads.
pub fn run_variants(cfg: &RunConfig, presets: &[Preset], seeds: usize, workers: Option<usize>) -> Result<Vec<AblationRow>> {
    if seeds == 0 {
        return invalid("at least one seed is needed");
    }
    let jobs: Vec<(Preset, u64)> = presets
        .iter()
        .flat_map(|&p| (0..seeds as u64).map(move |i| (p, cfg.seed + i)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return invalid("workers must be positive");
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Invalid(e.to_string()))?;
    let accs: Vec<f64> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, seed)| {
                let run_cfg = RunConfig {
                    seed,
                    variant: VariantSpec::Preset(p),
                    ..cfg.clone()
                };
                let trace = run_experiment(&run_cfg)?;
                log::info!("{p} seed {seed}: {:.4}", trace.final_record().target_accuracy);
                Ok(trace.final_record().target_accuracy)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(presets
        .iter()
        .zip(accs.chunks(seeds))
        .map(|(&p, a)| summarize(p, a.to_vec()))
        .collect())
}

/// The six ablation rows, written as a summary table and a per-run table.
pub fn cmd_ablate(cfg: &RunConfig, seeds: usize, workers: Option<usize>) -> Result<Vec<AblationRow>> {
    let rows = run_variants(cfg, &Preset::ABLATION_ROWS, seeds, workers)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    cfg.save(&dir.join(CONFIG_FILE))?;

    let path = dir.join(ABLATION_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["variant", "instance", "class", "self_training", "entropy", "shared", "mean", "std", "seeds"])?;
    for r in &rows {
        let f = r.variant.variant().flags;
        w.write_record([
            r.variant.name().to_string(),
            f.instance_sel.to_string(),
            f.class_sel.to_string(),
            f.self_training.to_string(),
            f.entropy_min.to_string(),
            f.shared_trunk.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.accuracies.len().to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(ABLATION_RUNS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["variant", "seed", "target_accuracy"])?;
    for r in &rows {
        for (i, a) in r.accuracies.iter().enumerate() {
            w.write_record([r.variant.name().to_string(), (cfg.seed + i as u64).to_string(), a.to_string()])?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    Ok(rows)
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bundle: ModelBundle = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    bundle.arch.validate()?;
    Ok(bundle)
}

pub fn cmd_eval(model: &Path, data: &Path) -> Result<(f64, Vec<Vec<usize>>)> {
    let bundle = load_model(model)?;
    let set = load_csv(data)?;
    if set.dim != bundle.arch.input_dim {
        return Err(Error::Format {
            path: data.display().to_string(),
            msg: format!("{} features but the model expects {}", set.dim, bundle.arch.input_dim),
        });
    }
    let labels = set.labels()?;
    evaluate(&bundle, &set.features()?, &labels)
}
