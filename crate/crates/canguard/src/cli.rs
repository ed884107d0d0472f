//! Command-line surface: synth, preprocess, train, evaluate, ablate,
//! explain, detect.
//!
//! Every subcommand echoes the seed in its outputs, writes files only under
//! `--output-dir`, and emits machine-readable JSON alongside any
//! human-readable rendering. Exit codes: 0 success, 1 usage error, 2 data
//! error, 3 numerical instability.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::explain::{
    build_attribution_report, export_attention, heatmap_csv, render_attribution,
    AttributionMethod, AttributionParams,
};
use crate::ingest::{parse_csv, synthesize, write_csv, ClassLabel, ColumnMap, ColumnRole, SynthConfig};
use crate::model::{self, Model, ModelConfig, TrainMeta};
use crate::preprocess::{
    load_dataset, prepare, save_dataset, PipelineConfig, SmoteTargets, WindowConfig,
    WindowedDataset,
};
use crate::seeds;
use crate::stream::{replay, DetectorSession};
use crate::training::{
    evaluate, render_ablation_table, render_report, run_ablation, train, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "canguard",
    version,
    about = "CAN bus intrusion detection: synthesis, preprocessing, training, evaluation, attribution, online detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Master seed; all component seeds derive from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Directory for all file outputs.
    #[arg(long, global = true, default_value = "out")]
    output_dir: PathBuf,

    /// Output rendering for reports.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct TrainFlags {
    /// Maximum training epochs.
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Early-stopping patience in epochs.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Architecture switch: single pool/dropout after the conv stack.
    #[arg(long = "ablation-switch", value_parser = ["single_pool"])]
    ablation_switch: Option<String>,
}

impl TrainFlags {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            early_stop_patience: self.patience.min(self.epochs.max(1)),
            seed,
            ..TrainConfig::default()
        }
    }

    fn apply_switches(&self, config: &mut ModelConfig) {
        if self.ablation_switch.as_deref() == Some("single_pool") {
            config.single_pool = true;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic labeled CAN traffic as CSV.
    Synth {
        /// Per-class record counts, e.g. benign=5000,dos=500,speed=100.
        #[arg(long)]
        counts: String,
        /// Attack burst length.
        #[arg(long, default_value_t = 32)]
        burst_len: usize,
        /// Output file name (under the output directory).
        #[arg(long, default_value = "synthetic.csv")]
        name: String,
    },
    /// Parse a CSV log and produce persisted train/test window datasets.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "window-length", default_value_t = 16)]
        window_length: usize,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        /// Column holding the six-class labels (e.g. specific_class).
        #[arg(long)]
        label_column: Option<String>,
        /// SMOTE targets: "majority", "off", or dos=16000,speed=8000,...
        #[arg(long, default_value = "majority")]
        smote: String,
    },
    /// Train a model on a preprocessed dataset and write a checkpoint.
    Train {
        /// Dataset stem written by preprocess (path without extension).
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a checkpoint on a preprocessed dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate the four component-ablation variants.
    Ablate {
        /// Raw CSV input (the pipeline is run once, shared by all rows).
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "window-length", default_value_t = 16)]
        window_length: usize,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Attribution: per-byte importance and attention heatmap export.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["shap", "permutation", "both"], default_value = "both")]
        method: String,
        /// Windows sampled for SHAP aggregation.
        #[arg(long, default_value_t = 32)]
        samples: usize,
        /// Windows exported to the attention heatmap.
        #[arg(long, default_value_t = 64)]
        heatmap_windows: usize,
    },
    /// Replay records through the online detector, emitting alerts.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input file; "-" reads newline-delimited records from stdin.
        #[arg(long)]
        input: String,
        /// Alert probability threshold.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Replay rate limit in frames/second (unlimited when absent).
        #[arg(long)]
        rate: Option<f64>,
        /// Treat the first line as a header row.
        #[arg(long, default_value_t = true)]
        header: bool,
    },
}

/// Parses argv and runs one subcommand. Usage problems surface as
/// `Error::Config` so the caller can map them to exit code 1.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        // --help / --version land here; print and succeed.
        if e.use_stderr() {
            Error::Config(e.to_string())
        } else {
            print!("{e}");
            Error::Config(String::new())
        }
    });
    let cli = match cli {
        Ok(c) => c,
        Err(Error::Config(msg)) if msg.is_empty() => return Ok(()),
        Err(e) => return Err(e),
    };

    std::fs::create_dir_all(&cli.output_dir)?;
    match &cli.command {
        Command::Synth {
            counts,
            burst_len,
            name,
        } => cmd_synth(&cli, counts, *burst_len, name),
        Command::Preprocess {
            input,
            window_length,
            test_fraction,
            label_column,
            smote,
        } => cmd_preprocess(&cli, input, *window_length, *test_fraction, label_column, smote),
        Command::Train { data, flags } => cmd_train(&cli, data, flags),
        Command::Evaluate { checkpoint, data } => cmd_evaluate(&cli, checkpoint, data),
        Command::Ablate {
            input,
            window_length,
            flags,
        } => cmd_ablate(&cli, input, *window_length, flags),
        Command::Explain {
            checkpoint,
            data,
            method,
            samples,
            heatmap_windows,
        } => cmd_explain(&cli, checkpoint, data, method, *samples, *heatmap_windows),
        Command::Detect {
            checkpoint,
            input,
            threshold,
            rate,
            header,
        } => cmd_detect(&cli, checkpoint, input, *threshold, *rate, *header),
    }
}

fn parse_counts(spec: &str) -> Result<BTreeMap<ClassLabel, usize>> {
    let mut counts = BTreeMap::new();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("counts entry {part:?} is not name=value")))?;
        let class = ClassLabel::parse(name)
            .ok_or_else(|| Error::Config(format!("unknown class {name:?} in counts")))?;
        let n: usize = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("invalid count {value:?} for {name}")))?;
        counts.insert(class, n);
    }
    if counts.is_empty() {
        return Err(Error::Config("counts must name at least one class".into()));
    }
    Ok(counts)
}

fn cmd_synth(cli: &Cli, counts: &str, burst_len: usize, name: &str) -> Result<()> {
    let config = SynthConfig {
        seed: seeds::derive(cli.seed, "synth"),
        counts: parse_counts(counts)?,
        burst_len,
        ..SynthConfig::default()
    };
    let records = synthesize(&config)?;
    let path = cli.output_dir.join(name);
    let file = std::fs::File::create(&path)?;
    write_csv(&records, file)?;

    #[derive(Serialize)]
    struct Echo<'a> {
        seed: u64,
        records: usize,
        config: &'a SynthConfig,
    }
    let echo = Echo {
        seed: cli.seed,
        records: records.len(),
        config: &config,
    };
    std::fs::write(
        path.with_extension("config.json"),
        serde_json::to_vec_pretty(&echo)?,
    )?;
    println!("seed: {}", cli.seed);
    println!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

fn parse_smote(spec: &str) -> Result<SmoteTargets> {
    match spec {
        "majority" => Ok(SmoteTargets::MatchMajority),
        "off" => Ok(SmoteTargets::Disabled),
        other => {
            let counts = parse_counts(other)?;
            Ok(SmoteTargets::Explicit(counts))
        }
    }
}

fn cmd_preprocess(
    cli: &Cli,
    input: &Path,
    window_length: usize,
    test_fraction: f64,
    label_column: &Option<String>,
    smote: &str,
) -> Result<()> {
    let mut column_map = ColumnMap::default();
    if let Some(column) = label_column {
        column_map.assign("LABEL", ColumnRole::Ignore);
        column_map.assign(column, ColumnRole::Label);
    }
    let records = parse_csv(std::fs::File::open(input)?, &column_map)?;
    let config = PipelineConfig {
        window: WindowConfig {
            t: window_length,
            f: 8,
        },
        test_fraction,
        seed: cli.seed,
        smote_targets: parse_smote(smote)?,
        ..PipelineConfig::default()
    };
    let prepared = prepare(&records, &config)?;

    let train_stem = cli.output_dir.join("train");
    let test_stem = cli.output_dir.join("test");
    save_dataset(&prepared.train, Some(&prepared.scaler), cli.seed, &train_stem)?;
    save_dataset(&prepared.test, Some(&prepared.scaler), cli.seed, &test_stem)?;

    println!("seed: {}", cli.seed);
    println!(
        "train: {} windows ({:?}), test: {} windows",
        prepared.train.len(),
        prepared.train.class_counts(),
        prepared.test.len()
    );
    println!("wrote {}.{{json,f32}} and {}.{{json,f32}}", train_stem.display(), test_stem.display());
    Ok(())
}

fn load_dataset_checked(stem: &Path) -> Result<(WindowedDataset, crate::preprocess::Scaler)> {
    let (ds, scaler, _) = load_dataset(stem)?;
    let scaler = scaler.ok_or_else(|| {
        Error::Data(format!(
            "dataset {} carries no scaler; run preprocess first",
            stem.display()
        ))
    })?;
    Ok((ds, scaler))
}

fn cmd_train(cli: &Cli, data: &Path, flags: &TrainFlags) -> Result<()> {
    let (ds, scaler) = load_dataset_checked(data)?;
    let mut model_config = ModelConfig {
        t: ds.t(),
        f: ds.f(),
        ..ModelConfig::default()
    };
    flags.apply_switches(&mut model_config);
    let mut model = Model::build(model_config, seeds::derive(cli.seed, "init"))?;
    let weights = crate::preprocess::class_weights(&ds);
    let train_config = flags.train_config(cli.seed);
    let history = train(&mut model, &ds, &train_config, &weights)?;

    let meta = TrainMeta {
        epoch: history.best_epoch.unwrap_or(history.epochs.len()),
        best_val_loss: history
            .best_epoch
            .and_then(|e| history.epochs.get(e - 1))
            .map(|s| s.val_loss)
            .unwrap_or(f64::NAN),
    };
    let ckpt_path = cli.output_dir.join("model.ckpt");
    model::save(&model, Some(&scaler), Some(&meta), &ckpt_path)?;
    std::fs::write(
        cli.output_dir.join("history.json"),
        serde_json::to_vec_pretty(&history)?,
    )?;

    println!("seed: {}", cli.seed);
    if let Some(last) = history.epochs.last() {
        println!(
            "trained {} epochs (best {:?}); final val loss {:.5} acc {:.4}",
            history.epochs.len(),
            history.best_epoch,
            last.val_loss,
            last.val_accuracy
        );
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn cmd_evaluate(cli: &Cli, checkpoint: &Path, data: &Path) -> Result<()> {
    let (model, _, _) = model::load(checkpoint)?;
    let (ds, _) = load_dataset_checked(data)?;
    let report = evaluate(&model, &ds)?;

    #[derive(Serialize)]
    struct Echo<'a> {
        seed: u64,
        report: &'a crate::training::MetricsReport,
    }
    let json = serde_json::to_vec_pretty(&Echo {
        seed: cli.seed,
        report: &report,
    })?;
    std::fs::write(cli.output_dir.join("evaluation.json"), &json)?;
    match cli.format {
        Format::Json => println!("{}", String::from_utf8_lossy(&json)),
        Format::Text => {
            println!("seed: {}", cli.seed);
            print!("{}", render_report(&report));
        }
    }
    Ok(())
}

fn cmd_ablate(cli: &Cli, input: &Path, window_length: usize, flags: &TrainFlags) -> Result<()> {
    let records = parse_csv(std::fs::File::open(input)?, &ColumnMap::default())?;
    let config = PipelineConfig {
        window: WindowConfig {
            t: window_length,
            f: 8,
        },
        seed: cli.seed,
        ..PipelineConfig::default()
    };
    let prepared = prepare(&records, &config)?;
    let mut base = ModelConfig {
        t: window_length,
        f: 8,
        ..ModelConfig::default()
    };
    flags.apply_switches(&mut base);
    let rows = run_ablation(&prepared, &base, &flags.train_config(cli.seed))?;

    #[derive(Serialize)]
    struct Echo<'a> {
        seed: u64,
        rows: &'a [crate::training::AblationRow],
    }
    let json = serde_json::to_vec_pretty(&Echo {
        seed: cli.seed,
        rows: &rows,
    })?;
    std::fs::write(cli.output_dir.join("ablation.json"), &json)?;
    match cli.format {
        Format::Json => println!("{}", String::from_utf8_lossy(&json)),
        Format::Text => {
            println!("seed: {}", cli.seed);
            print!("{}", render_ablation_table(&rows));
        }
    }
    Ok(())
}

fn cmd_explain(
    cli: &Cli,
    checkpoint: &Path,
    data: &Path,
    method: &str,
    samples: usize,
    heatmap_windows: usize,
) -> Result<()> {
    let (model, _, _) = model::load(checkpoint)?;
    let (ds, _) = load_dataset_checked(data)?;
    let params = AttributionParams {
        n_samples: samples,
        ..AttributionParams::default()
    };
    let seed = seeds::derive(cli.seed, "explain");

    let mut reports = Vec::new();
    if method == "shap" || method == "both" {
        reports.push(build_attribution_report(
            &model,
            &ds,
            AttributionMethod::KernelShap,
            &params,
            seed,
        )?);
    }
    if method == "permutation" || method == "both" {
        reports.push(build_attribution_report(
            &model,
            &ds,
            AttributionMethod::Permutation,
            &params,
            seed,
        )?);
    }

    #[derive(Serialize)]
    struct Echo<'a> {
        seed: u64,
        reports: &'a [crate::explain::AttributionReport],
    }
    let json = serde_json::to_vec_pretty(&Echo {
        seed: cli.seed,
        reports: &reports,
    })?;
    std::fs::write(cli.output_dir.join("attribution.json"), &json)?;

    if model.config.use_attention {
        let n = ds.len().min(heatmap_windows);
        let subset = ds.subset(&(0..n).collect::<Vec<_>>());
        let (_, heatmap) = export_attention(&model, &subset.windows)?;
        std::fs::write(cli.output_dir.join("attention_heatmap.csv"), heatmap_csv(&heatmap))?;
    }

    match cli.format {
        Format::Json => println!("{}", String::from_utf8_lossy(&json)),
        Format::Text => {
            println!("seed: {}", cli.seed);
            for report in &reports {
                print!("{}", render_attribution(report));
            }
        }
    }
    Ok(())
}

fn cmd_detect(
    cli: &Cli,
    checkpoint: &Path,
    input: &str,
    threshold: f64,
    rate: Option<f64>,
    header: bool,
) -> Result<()> {
    let (model, scaler, _) = model::load(checkpoint)?;
    let scaler = scaler.ok_or_else(|| {
        Error::Checkpoint("checkpoint carries no scaler; cannot scale live frames".into())
    })?;
    let mut session = DetectorSession::new(model, scaler, threshold)?;

    let stdout = std::io::stdout();
    let emit = |alert: &crate::stream::Alert| {
        let mut lock = stdout.lock();
        if let Ok(line) = serde_json::to_string(alert) {
            let _ = writeln!(lock, "{line}");
        }
    };
    let summary = if input == "-" {
        let stdin = std::io::stdin();
        replay(stdin.lock(), &mut session, rate, header, emit)?
    } else {
        let file = BufReader::new(std::fs::File::open(input)?);
        replay(file, &mut session, rate, header, emit)?
    };

    #[derive(Serialize)]
    struct Echo<'a> {
        seed: u64,
        summary: &'a crate::stream::ReplaySummary,
    }
    let json = serde_json::to_vec_pretty(&Echo {
        seed: cli.seed,
        summary: &summary,
    })?;
    std::fs::write(cli.output_dir.join("detect_summary.json"), &json)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// Maps an error to the documented process exit code.
pub fn exit_code(err: &Error) -> i32 {
    err.exit_code()
}

#[allow(dead_code)]
fn _assert_bufread_bounds<R: BufRead>(_r: R) {}
