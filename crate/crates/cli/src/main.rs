//! `bbs`: dataset generation, training, inference, evaluation and reporting.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Profile;

#[derive(Debug, Parser)]
#[command(name = "bbs", version, about = "Generative beam search pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Root seed for every random stream.
    #[arg(long, global = true, env = "BBS_SEED")]
    pub seed: Option<u64>,
    /// Default parameter set.
    #[arg(long, global = true, value_enum, env = "BBS_PROFILE")]
    pub profile: Option<Profile>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "BBS_THREADS")]
    pub threads: Option<usize>,
    /// TOML file overriding profile defaults.
    #[arg(long, global = true, env = "BBS_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic clustered site.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        antennas: Option<usize>,
    },
    /// Train (or resume training) the denoiser for one prompt length.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "Q", alias = "q")]
        q: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Ignore an existing checkpoint and start over.
        #[arg(long)]
        fresh: bool,
    },
    /// Brainstorm beams for the test users.
    Infer {
        /// Checkpoint file or training directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "Q", alias = "q")]
        q: usize,
        #[arg(long = "M", alias = "m")]
        m: usize,
        /// Prompt SNR in dB; noiseless when omitted.
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_users: Option<usize>,
    },
    /// Sweep every method over the configured grid.
    Eval {
        /// Directory holding `q<Q>/checkpoint.bin` per prompt length.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        q_list: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        m_list: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr_list: Option<Vec<f64>>,
        #[arg(long)]
        max_users: Option<usize>,
    },
    /// Summaries, the overhead table and figures from a gains CSV.
    Report {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "svg")]
        format: FigureFormat,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FigureFormat {
    Svg,
    Png,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
