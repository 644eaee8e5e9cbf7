//! The `varprop` command line.
//!
//! ```text
//! varprop theory|finite-width|gradients|init-check|dump-net
//!     [--depth N] [--widths a,b,c] [--samples T] [--networks K] [--seed S]
//!     [--batchnorm] [--scheme NAME[,NAME]] [--nodes Q] [--out DIR] [--fast]
//!     [--config PATH]
//! ```
//!
//! `--config` reads the same keys from a JSON object; flags given on the
//! command line win over file values.

mod commands;
pub mod table;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use commands::{
    cmd_dump_net, cmd_finite_width, cmd_gradients, cmd_init_check, cmd_theory, CommandReport,
};

#[derive(Debug, Parser)]
#[command(
    name = "varprop",
    version,
    about = "Sample mean / variance propagation in random ReLU MLPs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mean-field m, v and ratio per layer.
    Theory(ConfigArgs),
    /// Ensemble mean-to-std ratio of Kaiming MLPs across widths.
    FiniteWidth(ConfigArgs),
    /// Activation-gradient magnitudes per layer and their log slopes.
    Gradients(ConfigArgs),
    /// Post-conditions of the scale / scale+bias initializers.
    InitCheck(ConfigArgs),
    /// Writes one initialized network in the binary dump format.
    DumpNet(ConfigArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub depth: Option<usize>,
    /// Width sweep (finite-width), network width (gradients, init-check) or
    /// full architecture n^0,...,n^L (dump-net).
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub networks: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batchnorm: bool,
    #[arg(long, value_delimiter = ',')]
    pub scheme: Option<Vec<String>>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub fast: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub calib_batches: Option<usize>,
    #[arg(long)]
    pub calib_batch_size: Option<usize>,
    #[arg(long)]
    pub heldout: Option<usize>,
    /// Treat batch statistics as constants in the backward pass.
    #[arg(long)]
    pub frozen_bn_stats: bool,
}

/// Every knob any command reads. Unset fields take command defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub depth: Option<usize>,
    pub widths: Option<Vec<usize>>,
    pub samples: Option<usize>,
    pub networks: Option<usize>,
    pub seed: Option<u64>,
    pub batchnorm: Option<bool>,
    pub scheme: Option<Vec<String>>,
    pub nodes: Option<usize>,
    pub out: Option<PathBuf>,
    pub fast: Option<bool>,
    pub calib_batches: Option<usize>,
    pub calib_batch_size: Option<usize>,
    pub heldout: Option<usize>,
    pub frozen_bn_stats: Option<bool>,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Values present in `args` replace those in `self`.
    pub fn overridden_by(mut self, args: &ConfigArgs) -> Self {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if args.$field.is_some() { self.$field = args.$field.clone(); })*
            };
        }
        take!(
            depth,
            widths,
            samples,
            networks,
            seed,
            scheme,
            nodes,
            out,
            calib_batches,
            calib_batch_size,
            heldout
        );
        if args.batchnorm {
            self.batchnorm = Some(true);
        }
        if args.fast {
            self.fast = Some(true);
        }
        if args.frozen_bn_stats {
            self.frozen_bn_stats = Some(true);
        }
        self
    }

    pub fn resolve(args: &ConfigArgs) -> Result<Self> {
        let base = match &args.config {
            Some(path) => Self::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        let cfg = base.overridden_by(args);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("samples", self.samples),
            ("networks", self.networks),
            ("nodes", self.nodes),
            ("calib_batches", self.calib_batches),
            ("calib_batch_size", self.calib_batch_size),
            ("heldout", self.heldout),
        ];
        for (name, value) in positive {
            if value == Some(0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(widths) = &self.widths {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::Config(
                    "widths must be a non-empty list of positive integers".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn fast(&self) -> bool {
        self.fast.unwrap_or(false)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Parses `args` (program name first) and runs the chosen command.
pub fn run<I, T>(args: I) -> Result<CommandReport>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    dispatch(&cli.command)
}

pub fn dispatch(command: &Command) -> Result<CommandReport> {
    let (args, f): (&ConfigArgs, fn(&ExperimentConfig) -> Result<CommandReport>) = match command {
        Command::Theory(a) => (a, cmd_theory),
        Command::FiniteWidth(a) => (a, cmd_finite_width),
        Command::Gradients(a) => (a, cmd_gradients),
        Command::InitCheck(a) => (a, cmd_init_check),
        Command::DumpNet(a) => (a, cmd_dump_net),
    };
    let cfg = ExperimentConfig::resolve(args)?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    f(&cfg)
}

/// Process exit code for an error category.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::Format(_) => 4,
        _ => 1,
    }
}

/// Entry point for the binary: returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(report) => {
            for line in &report.summary {
                println!("{line}");
            }
            for path in &report.files {
                println!("wrote {}", path.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            exit_code(&e)
        }
    }
}
