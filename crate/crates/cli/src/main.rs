//! `snnreg`: data generation, training phases, registration, evaluation,
//! energy and statistics reports.
//!
//! Exit codes: 0 success, 1 user error (bad flags, config, missing files),
//! 2 internal error. Failures print one line to stderr:
//! `error {"code":1,"kind":"config","message":"..."}`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "snnreg", version, about = "Spiking U-Net deformable registration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by the commands that read a run configuration.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides `data.dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides `run.seed` and the phase optimiser seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of leading pairs used for training (overrides `data.train_pairs`).
    #[arg(long)]
    pub train_pairs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate synthetic deformable pairs.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Cubic volume side, or three comma-separated sides.
        #[arg(long, default_value = "32")]
        shape: String,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 2.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 4.0)]
        smoothness: f64,
        /// Shape divisor enforced on the volumes.
        #[arg(long, default_value_t = 8)]
        divisor: usize,
    },
    /// Train the analog teacher.
    TrainAnn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Report per-layer calibration thresholds of a teacher.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a teacher into a spiking student.
    Convert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long)]
        timesteps: Option<usize>,
    },
    /// Surrogate-gradient fine-tuning of a converted student.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Teacher checkpoint for displacement distillation.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        lambda_distill: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a spiking network from random initialisation.
    TrainScratch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Register one pair and write the field, warped image and metrics.
    Register {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed_seg: Option<PathBuf>,
        #[arg(long)]
        moving_seg: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model (or the identity field) on a dataset split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; omit together with --identity.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Score the zero displacement field (initial alignment).
        #[arg(long)]
        identity: bool,
        /// Evaluate every pair rather than the held-out split.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Operation counts and the energy proxy for a spiking model.
    EnergyReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired comparison of two pair-result CSV files.
    StatsCompare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "dice_mean")]
        metric: String,
        /// Family size for the Bonferroni correction.
        #[arg(long, default_value_t = 1)]
        k_tests: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Timestep by percentile grid; writes the accuracy-energy table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6")]
        timesteps: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "50,75,90")]
        percentiles: Vec<f64>,
        /// Fine-tuning epochs per grid point (0 evaluates raw conversion).
        #[arg(long, default_value_t = 0)]
        finetune_epochs: usize,
        /// Worker threads for independent grid points.
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn user(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            kind,
            message: message.into(),
        }
    }
}

impl From<snnreg::Error> for CliError {
    fn from(e: snnreg::Error) -> Self {
        use snnreg::Error as E;
        let (code, kind) = match &e {
            E::Io { .. } => (1, "io"),
            E::Config(_) => (1, "config"),
            E::InvalidArgument(_) => (1, "invalid_argument"),
            E::Nifti(_) => (1, "nifti"),
            E::Checkpoint(_) => (1, "checkpoint"),
            E::SilentLayer { .. } => (1, "silent_layer"),
            E::Shape { .. } => (1, "shape"),
            E::Json(_) => (1, "json"),
            E::NonFinite { .. } => (2, "non_finite"),
            E::Training(_) => (2, "training"),
        };
        CliError {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    code: u8,
    kind: &'a str,
    message: &'a str,
}

fn report(e: &CliError) {
    let line = ErrorLine {
        code: e.code,
        kind: e.kind,
        message: &e.message.replace('\n', " "),
    };
    eprintln!("error {}", serde_json::to_string(&line).expect("error line serialises"));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            report(&CliError::user("usage", first));
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.code)
        }
    }
}
