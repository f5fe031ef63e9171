//! Driver behind the `mixdens` binary. Each subcommand writes its artifacts and a
//! `manifest.json` into `--out-dir`.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod estimate;
pub mod io;
pub mod manifest;
pub mod opts;

pub use estimate::{Dataset, Estimate, PriorEstimate};
pub use manifest::RunManifest;
pub use opts::{FitSettings, Method, Opts};

#[derive(Debug, Parser)]
#[command(name = "mixdens", version, about = "Mixing-density estimation for latent mixture models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads [default: available cores].
    #[arg(long, global = true, env = "MIXDENS_THREADS")]
    pub threads: Option<usize>,
    /// TOML or JSON file of option defaults (a run manifest also works); flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from one of the five models.
    Simulate(Opts),
    /// Fit one estimator: npmle, boot, smooth or gb.
    Fit(Opts),
    /// Score fitted priors against the true prior; writes metrics.json and table.csv.
    Eval(EvalArgs),
    /// K-fold log predictive score of boot and/or gb.
    Lps(Opts),
    /// Wall-clock timing over sample sizes, methods and B.
    Bench(Opts),
    /// Generator architecture sweep over --layers x --hidden.
    Sweep(Opts),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub opts: Opts,
    /// Output directory of a `fit` run; repeatable.
    #[arg(long = "fit")]
    pub fits: Vec<PathBuf>,
    /// `theta,density` CSV to score as an estimate; repeatable.
    #[arg(long = "estimate")]
    pub estimates: Vec<PathBuf>,
    /// `theta,density` CSV of the true prior, used instead of --model.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Fit(_) => "fit",
            Command::Eval(_) => "eval",
            Command::Lps(_) => "lps",
            Command::Bench(_) => "bench",
            Command::Sweep(_) => "sweep",
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("could not set {t} threads: {e}");
        }
    }
    let base = match &cli.config {
        Some(p) => opts::load_config(p)?,
        None => Opts::default(),
    };
    let name = cli.command.name();
    let res = match cli.command {
        Command::Simulate(o) => commands::simulate(&o.overlay(base)),
        Command::Fit(o) => commands::fit(&o.overlay(base)),
        Command::Eval(mut a) => {
            a.opts = a.opts.overlay(base);
            commands::eval(&a)
        }
        Command::Lps(o) => commands::lps(&o.overlay(base)),
        Command::Bench(o) => commands::bench(&o.overlay(base)),
        Command::Sweep(o) => commands::sweep(&o.overlay(base)),
    };
    res.with_context(|| format!("{name} failed"))
}
