mod commands;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use itarflow::io::{CheckpointError, ConfigError, IoError};
use itarflow::sampler::{parse_threads, Guidance, THREADS_ENV};

#[derive(Parser)]
#[command(
    name = "itarflow",
    version,
    about = "Train, sample and check noise-amortized autoregressive flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate samples: autoregressive inversion at t_max, then ODE denoising.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        class: Option<usize>,
        /// Guidance scale w >= 1.
        #[arg(long, default_value_t = 1.0)]
        cfg: f64,
        #[arg(long, value_enum, default_value = "mu-and-log-sigma")]
        guidance: GuidanceArg,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Noise level to sample at; defaults to the training t_max.
        #[arg(long)]
        tmax: Option<f64>,
        /// Final noise level of the ODE; defaults to the training t_min.
        #[arg(long)]
        tmin: Option<f64>,
        #[arg(long)]
        no_final_tweedie: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise external samples given as an image grid or a CSV file.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Noise level of the input.
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        tmin: Option<f64>,
        #[arg(long)]
        no_final_tweedie: bool,
        /// Output path; defaults to `denoised.<ext>` beside the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check invertibility, log-determinants, causality and scores of a checkpoint.
    Verify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare a checkpoint against the analytic target of a procedural task.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GuidanceArg {
    MuAndLogSigma,
    MuOnly,
}

impl From<GuidanceArg> for Guidance {
    fn from(g: GuidanceArg) -> Self {
        match g {
            GuidanceArg::MuAndLogSigma => Guidance::MuAndLogSigma,
            GuidanceArg::MuOnly => Guidance::MuOnly,
        }
    }
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self {
            code: e.code() as u8,
            message: e.to_string(),
        }
    }
}

macro_rules! generic_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::new(e.to_string())
            }
        }
    )*};
}

generic_error!(
    ConfigError,
    IoError,
    std::io::Error,
    itarflow::trainer::TrainError,
    itarflow::sampler::SampleError,
    itarflow::flow::FlowError,
    itarflow::eval::EvalError,
    itarflow::oracle::OracleError
);

fn run(cli: Cli) -> Result<(), CliError> {
    parse_threads(std::env::var(THREADS_ENV).ok().as_deref()).map_err(CliError::new)?;
    match cli.command {
        Command::Train {
            config,
            resume,
            seed,
            out,
        } => commands::train(&config, resume.as_deref(), seed, out),
        Command::Sample {
            ckpt,
            count,
            class,
            cfg,
            guidance,
            steps,
            tmax,
            tmin,
            no_final_tweedie,
            seed,
            out,
        } => commands::sample(commands::SampleArgs {
            ckpt,
            count,
            class,
            cfg,
            guidance: guidance.into(),
            steps,
            t_max: tmax,
            t_min: tmin,
            final_tweedie: !no_final_tweedie,
            seed,
            out,
        }),
        Command::Denoise {
            ckpt,
            input,
            t,
            steps,
            class,
            tmin,
            no_final_tweedie,
            out,
        } => commands::denoise(&ckpt, &input, t, steps, class, tmin, !no_final_tweedie, out),
        Command::Verify { ckpt, seed } => verify::run(&ckpt, seed),
        Command::Eval {
            ckpt,
            task,
            samples,
            steps,
            seed,
        } => commands::eval(&ckpt, &task, samples, steps, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
