mod config;
mod run;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use opsearch_core::energy::Budget;
use opsearch_core::network::SearchMode;
use opsearch_core::search::Strategy;

use config::RunConfig;

/// Energy-aware per-layer operator and compute-mode search.
#[derive(Parser)]
#[command(name = "opsearch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one search and write a run directory.
    Search(RunFlags),
    /// Sweep λ and write a CSV and SVG of energy against accuracy.
    Pareto {
        #[command(flatten)]
        flags: RunFlags,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,1,10")]
        lambdas: Vec<f64>,
    },
    /// Print the energy report of an assignment.
    Energy(EnergyArgs),
    /// Evaluate a stored run on a dataset split.
    Eval(EvalArgs),
    /// Print the built-in energy table and configuration defaults.
    DumpDefaults,
}

/// Flags shared by `search` and `pareto`; each overrides the config file.
#[derive(Args, Debug, Default)]
struct RunFlags {
    /// TOML file with any of the flat config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    mode: Option<SearchMode>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Weight-bits, or a percentage of the network's total such as `25%`.
    #[arg(long)]
    cim_budget: Option<Budget>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    relearn_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_theta: Option<f64>,
    #[arg(long)]
    lr_alpha: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Re-initialize weights before relearning.
    #[arg(long)]
    reinit: bool,
    /// `synthetic:blobs`, `synthetic:rings`, `synthetic:digits`, `idx:<images>,<labels>` or `csv:<path>`.
    #[arg(long)]
    dataset: Option<String>,
    /// Preset (`mini-cnn`, `mini-squeeze`) or network spec path.
    #[arg(long)]
    net: Option<String>,
    /// CSV overriding entries of the built-in energy table.
    #[arg(long)]
    energy_table: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunFlags {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let s = &mut cfg.search;
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    s.$field = v;
                }
            )*};
        }
        set!(strategy, mode, lambda, gamma, samples, epochs, relearn_epochs, seed, lr_theta, lr_alpha, batch_size, patience);
        if self.cim_budget.is_some() {
            s.cim_budget = self.cim_budget;
        }
        if self.reinit {
            s.reinit = true;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = &self.net {
            cfg.net = v.clone();
        }
        if let Some(v) = &self.energy_table {
            cfg.energy_table = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        cfg.search.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct EnergyArgs {
    /// Read the network, assignment, table and budget from a run directory.
    #[arg(long, conflicts_with_all = ["net", "assignment"])]
    run: Option<PathBuf>,
    #[arg(long, default_value = "mini-cnn")]
    net: String,
    /// Sample shape `h,w,c` for presets.
    #[arg(long, value_delimiter = ',', default_value = "8,8,1")]
    input: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// `T,MF,B:CiM,...` in layer order, or `all:<choice>`.
    #[arg(long)]
    assignment: Option<String>,
    #[arg(long)]
    cim_budget: Option<Budget>,
    #[arg(long)]
    energy_table: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Dataset source; defaults to the run's own.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Fake-quantize weights and activations (8-bit digital, 4-bit CiM).
    #[arg(long)]
    quantized: bool,
}

/// How a command failed, mapped to the process exit status.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
    Infeasible(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Run(_) => 2,
            Failure::Infeasible(_) => 3,
        }
    }
}

pub trait Classify<T> {
    fn config_err(self) -> Result<T, Failure>;
    fn run_err(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn run_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Run(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search(flags) => flags.resolve().config_err().and_then(|cfg| run::search(&cfg)),
        Command::Pareto { flags, lambdas } => flags.resolve().config_err().and_then(|cfg| run::pareto(&cfg, &lambdas)),
        Command::Energy(args) => run::energy(&args),
        Command::Eval(args) => run::eval(&args),
        Command::DumpDefaults => {
            run::dump_defaults();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("config error: {e:#}"),
                Failure::Run(e) => eprintln!("run failed: {e:#}"),
                Failure::Infeasible(msg) => eprintln!("infeasible: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
