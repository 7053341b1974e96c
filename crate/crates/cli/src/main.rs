mod commands;
mod config;
mod plot;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use hypnos_core::diagnosis::RfeConfig;
use hypnos_core::encoding::EncodingMode;
use hypnos_core::neuralnet::{Complexity, HeadMode, NetworkConfig};

use crate::commands::SynthArgs;
use crate::config::{require, PipelineConfig};

#[derive(Parser)]
#[command(name = "hypnos", version, about = "Sleep staging, hypnodensity features and narcolepsy diagnosis")]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Pipeline configuration JSON; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Octave,
    Cc,
}

impl From<Mode> for EncodingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Octave => EncodingMode::Octave,
            Mode::Cc => EncodingMode::Cc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Head {
    Ff,
    Lstm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Low,
    High,
}

#[derive(Clone, Copy, ValueEnum)]
enum Hla {
    Positive,
    Negative,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic recording and its hypnogram.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synth")]
        id: String,
        #[arg(long, default_value_t = 10.0)]
        minutes: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128.0)]
        fs: f64,
    },
    /// Fit the EEG channel-selection reference from training recordings.
    FitReference {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select channels, filter and resample recordings.
    Preprocess {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Encode preprocessed recordings as octave or CC tensors.
    Encode {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Train a stage-classifier ensemble.
    Train(TrainArgs),
    /// Score encoded recordings into ensemble hypnodensities.
    Score {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resolution: Option<u32>,
    },
    /// Extract the 481 hypnodensity features.
    Features {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CSV with `recording_id,hla_positive`.
        #[arg(long)]
        hla_table: Option<PathBuf>,
    },
    /// Fit or apply the narcolepsy classifiers.
    #[command(subcommand)]
    Diagnose(DiagnoseCmd),
    /// Evaluate diagnoses or staging.
    #[command(subcommand)]
    Evaluate(EvaluateCmd),
    /// Render a hypnodensity CSV as SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recording in, hypnodensity, plot, features and diagnosis out.
    RunAll {
        #[arg(long)]
        recording: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        classifiers: Option<PathBuf>,
        #[arg(long, value_enum)]
        hla: Option<Hla>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resolution: Option<u32>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, required = true, num_args = 1..)]
    encoded: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    hypnograms: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "ff")]
    head: Head,
    #[arg(long, value_enum, default_value = "low")]
    complexity: Size,
    #[arg(long, default_value_t = 15)]
    segment_s: u32,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    ensemble_size: Option<usize>,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum DiagnoseCmd {
    /// Fit one GP classifier per feature table.
    Fit {
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        /// CSV with `recording_id,narcolepsy`.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        cutoff: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score feature tables with a fitted classifier set.
    Predict {
        #[arg(long)]
        classifiers: Option<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        ignore_hla: bool,
    },
}

#[derive(Subcommand)]
enum EvaluateCmd {
    /// ROC, AUC and operating points of diagnosis reports.
    Diagnosis {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        threshold: Vec<f64>,
    },
    /// Agreement of a hypnodensity with one or more scorers.
    Staging {
        #[arg(long)]
        hypnodensity: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        scorers: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("HYPNOS_LOG")
        .format(|buf, record| {
            let stage = record.target().rsplit("::").next().unwrap_or("");
            writeln!(buf, "level={} stage={} msg={}", record.level().as_str().to_lowercase(), stage, record.args())
        })
        .init();
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<hypnos_core::Error>() {
            return if e.is_io() {
                2
            } else if e.is_numeric() {
                4
            } else {
                3
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            if e.is_io_error() {
                return 2;
            }
        }
    }
    3
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global().context("starting worker pool")?;
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;

    match cli.command {
        Command::Synth { out, id, minutes, seed, fs } => commands::synth(&SynthArgs { out, id, minutes, fs, seed }),
        Command::FitReference { inputs, out } => commands::fit_reference_cmd(&inputs, &out),
        Command::Preprocess { inputs, out, reference } => {
            commands::preprocess_cmd(&inputs, &out, reference.or(cfg.paths.reference).as_deref())
        }
        Command::Encode { inputs, out, mode } => commands::encode_cmd(&inputs, &out, mode.map_or(cfg.encoding, Into::into)),
        Command::Train(a) => {
            if let Some(m) = a.mode {
                cfg.encoding = m.into();
            }
            if let Some(n) = a.ensemble_size {
                cfg.ensemble_size = n;
            }
            if let Some(b) = a.max_batches {
                cfg.train.max_batches = b;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let head = match a.head {
                Head::Ff => HeadMode::Ff,
                Head::Lstm => HeadMode::Lstm,
            };
            let complexity = match a.complexity {
                Size::Low => Complexity::Low,
                Size::High => Complexity::High,
            };
            let template = cfg
                .network
                .clone()
                .unwrap_or_else(|| NetworkConfig::new(cfg.encoding, head, complexity, a.segment_s, cfg.seed));
            cfg.validate()?;
            commands::train_cmd(&a.encoded, &a.hypnograms, &a.out, &template, &cfg)
        }
        Command::Score { inputs, ensemble, out, resolution } => {
            let ensemble = require(ensemble, &cfg.paths.ensemble, "ensemble")?;
            if let Some(r) = resolution {
                cfg.resolution_s = r;
                cfg.validate()?;
            }
            commands::score_cmd(&inputs, &ensemble, &out, cfg.resolution_s)
        }
        Command::Features { inputs, out, hla_table } => commands::features_cmd(&inputs, &out, hla_table.as_deref()),
        Command::Diagnose(DiagnoseCmd::Fit { features, labels, out, target, folds, cutoff, seed }) => {
            let mut rfe = RfeConfig { seed: cfg.seed, ..RfeConfig::default() };
            if let Some(t) = target {
                rfe.target = t;
            }
            if let Some(f) = folds {
                rfe.folds = f;
            }
            if let Some(c) = cutoff {
                rfe.cutoff = c;
            }
            if let Some(s) = seed {
                rfe.seed = s;
            }
            commands::diagnose_fit_cmd(&features, &labels, &out, &rfe)
        }
        Command::Diagnose(DiagnoseCmd::Predict { classifiers, features, out, ignore_hla }) => {
            let manifest = require(classifiers, &cfg.paths.classifiers, "classifier set")?;
            commands::diagnose_predict_cmd(&manifest, &features, out.as_deref(), !ignore_hla, &cfg)
        }
        Command::Evaluate(EvaluateCmd::Diagnosis { reports, labels, out, threshold }) => {
            let thresholds =
                if threshold.is_empty() { vec![cfg.thresholds.narcolepsy, cfg.thresholds.hla] } else { threshold };
            commands::evaluate_diagnosis_cmd(&reports, &labels, &out, &thresholds)
        }
        Command::Evaluate(EvaluateCmd::Staging { hypnodensity, scorers, out }) => {
            commands::evaluate_staging_cmd(&hypnodensity, &scorers, out.as_deref())
        }
        Command::Plot { input, out } => commands::plot_cmd(&input, &out),
        Command::RunAll { recording, out, reference, ensemble, classifiers, hla, mode, seed, resolution } => {
            let p = &mut cfg.paths;
            p.recording = recording.or(p.recording.take());
            p.output_dir = out.or(p.output_dir.take());
            p.reference = reference.or(p.reference.take());
            p.ensemble = ensemble.or(p.ensemble.take());
            p.classifiers = classifiers.or(p.classifiers.take());
            if let Some(h) = hla {
                cfg.hla_positive = Some(matches!(h, Hla::Positive));
            }
            if let Some(m) = mode {
                cfg.encoding = m.into();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = resolution {
                cfg.resolution_s = r;
            }
            commands::run_all(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!(target: "hypnos", "{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
