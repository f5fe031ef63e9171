use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use mixdens::bootstrap::BootstrapOptions;
use mixdens::npmle::DEFAULT_GRID_COUNT;
use mixdens::{EmOptions, SimModel, TrainConfig, WeightScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Discrete NPMLE on a fixed grid.
    Npmle,
    /// Bootstrapped NPMLE.
    Boot,
    /// Kernel-smoothed NPMLE.
    Smooth,
    /// Generative bootstrap NPMLE.
    Gb,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Npmle => "npmle",
            Method::Boot => "boot",
            Method::Smooth => "smooth",
            Method::Gb => "gb",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Dirichlet,
    Multinomial,
}

impl From<Scheme> for WeightScheme {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Dirichlet => WeightScheme::DirichletTimesN,
            Scheme::Multinomial => WeightScheme::Multinomial,
        }
    }
}

/// Starting point for the generator training constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small Monte Carlo batches and 400 epochs; minutes on one CPU.
    Desk,
    /// Full batches (S_w = S_z = 100) and 2000 epochs.
    Full,
}

/// Every tunable flag. All fields are optional so that a config file can fill the gaps;
/// list-valued flags take comma-separated values.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct Opts {
    /// Simulation model: gmm, gamm, pmm, gmm-tri or bbm.
    #[arg(long)]
    pub model: Option<SimModel>,
    /// Dataset name (norberg, thailand, mortality) or CSV path. Without it data are simulated
    /// from --model.
    #[arg(long)]
    pub data: Option<String>,
    /// Directory searched for named datasets before the bundled copies [default: data].
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Sample size of simulated data [default: 1000].
    #[arg(long, value_delimiter = ',')]
    pub n: Vec<usize>,
    /// Master seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub method: Vec<Method>,
    /// Stage I epochs T.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of generator candidates.
    #[arg(long)]
    pub l: Option<usize>,
    /// Stage II stopping tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Bootstrap replicates, or generated draws for gb [default: 200 for boot, 1000 for gb].
    #[arg(long = "boot-B", value_delimiter = ',')]
    #[serde(rename = "boot-B")]
    pub boot_b: Vec<usize>,
    /// Bootstrap weight distribution [default: multinomial for boot, dirichlet for gb].
    #[arg(long)]
    pub boot_scheme: Option<Scheme>,
    /// Fixed smoothing bandwidth; LOOCV over 25 points on [0.1, 10] otherwise.
    #[arg(long, conflicts_with = "bandwidth_cv")]
    pub bandwidth: Option<f64>,
    /// Select the smoothing bandwidth by LOOCV (the default).
    #[arg(long)]
    pub bandwidth_cv: bool,
    /// Hidden layers L [default: 2].
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Hidden width h [default: 500].
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight vectors per Stage I batch.
    #[arg(long)]
    pub sw: Option<usize>,
    /// Noise draws per weight vector in Stage I.
    #[arg(long)]
    pub sz: Option<usize>,
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Support grid size for the NPMLE [default: 400].
    #[arg(long)]
    pub grid: Option<usize>,
    /// Cross-validation folds for lps [default: 10].
    #[arg(long)]
    pub folds: Option<usize>,
    /// Replicates (consecutive seeds) for sweep [default: 1].
    #[arg(long)]
    pub reps: Option<usize>,
    /// Per-cell timeout of bench, in seconds [default: 3600].
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

trait Overlay {
    fn overlay(self, base: Self) -> Self;
}

impl<T> Overlay for Option<T> {
    fn overlay(self, base: Self) -> Self {
        self.or(base)
    }
}

impl<T> Overlay for Vec<T> {
    fn overlay(self, base: Self) -> Self {
        if self.is_empty() {
            base
        } else {
            self
        }
    }
}

impl Overlay for bool {
    fn overlay(self, base: Self) -> Self {
        self || base
    }
}

macro_rules! overlay_fields {
    ($top:expr, $base:expr; $($f:ident),*) => {
        Opts { $($f: $top.$f.overlay($base.$f)),* }
    };
}

impl Opts {
    /// Flags in `self` win over `base`.
    pub fn overlay(self, base: Opts) -> Opts {
        overlay_fields!(self, base; model, data, data_dir, n, seed, method, epochs, l, tol, boot_b,
            boot_scheme, bandwidth, bandwidth_cv, layers, hidden, lr, sw, sz, preset, grid, folds, reps,
            timeout, out_dir)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("mixdens-out"))
    }

    pub fn single_n(&self) -> Result<usize> {
        single("n", &self.n, 1000)
    }

    pub fn single_method(&self) -> Result<Method> {
        match self.method.as_slice() {
            [m] => Ok(*m),
            [] => bail!("--method is required"),
            _ => bail!("give exactly one --method"),
        }
    }

    pub fn replicates(&self, method: Method) -> Result<usize> {
        let default = if method == Method::Gb { 1000 } else { 200 };
        single("boot-B", &self.boot_b, default)
    }

    pub fn folds(&self) -> usize {
        self.folds.unwrap_or(10)
    }

    pub fn require_model(&self) -> Result<SimModel> {
        self.model.context("--model is required")
    }

    /// Bandwidth given on the command line, or `None` for LOOCV.
    pub fn fixed_bandwidth(&self) -> Result<Option<f64>> {
        match (self.bandwidth, self.bandwidth_cv) {
            (Some(_), true) => bail!("--bandwidth and --bandwidth-cv are mutually exclusive"),
            (Some(h), false) if !(h > 0.0 && h.is_finite()) => bail!("bandwidth must be positive"),
            (h, _) => Ok(h),
        }
    }

    /// Generator constants for one fit with layer count `layers` and width `hidden`.
    pub fn train_config_with(&self, layers: usize, hidden: usize, draws: usize) -> Result<TrainConfig> {
        let mut cfg = match self.preset.unwrap_or(Preset::Desk) {
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::default(),
        };
        cfg.hidden = vec![hidden; layers];
        cfg.draws = draws;
        cfg.seed = self.seed();
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.l {
            cfg.candidates = v;
            cfg.gamma_samples = cfg.gamma_samples.max(v);
        }
        if let Some(v) = self.tol {
            cfg.tol = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.sw {
            cfg.weight_samples = v;
        }
        if let Some(v) = self.sz {
            cfg.noise_samples = v;
        }
        if let Some(s) = self.boot_scheme {
            cfg.scheme = s.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let layers = single("layers", &self.layers, 2)?;
        let hidden = single("hidden", &self.hidden, 500)?;
        self.train_config_with(layers, hidden, self.replicates(Method::Gb)?)
    }

    /// Everything the four estimators need.
    pub fn fit_settings(&self, method: Method) -> Result<FitSettings> {
        let train = if method == Method::Gb {
            self.train_config()?
        } else {
            TrainConfig {
                seed: self.seed(),
                ..TrainConfig::desk()
            }
        };
        let replicates = if method == Method::Boot { self.replicates(method)? } else { 1 };
        if replicates == 0 {
            bail!("--boot-B must be positive");
        }
        Ok(FitSettings {
            seed: self.seed(),
            grid_points: self.grid.unwrap_or(DEFAULT_GRID_COUNT),
            boot: BootstrapOptions {
                scheme: self.boot_scheme.map_or(WeightScheme::Multinomial, Into::into),
                replicates,
                em: EmOptions::default(),
                threads: 0,
            },
            bandwidth: self.fixed_bandwidth()?,
            train,
        })
    }
}

fn single(name: &str, values: &[usize], default: usize) -> Result<usize> {
    match values {
        [] => Ok(default),
        [v] => Ok(*v),
        _ => bail!("--{name} takes a single value for this command"),
    }
}

/// Resolved estimator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub seed: u64,
    pub grid_points: usize,
    pub boot: BootstrapOptions,
    pub bandwidth: Option<f64>,
    pub train: TrainConfig,
}

/// Read defaults from a TOML file, or a JSON file holding either the options or a run
/// manifest (whose `config` is used, so a run can be repeated from its manifest).
pub fn load_config(path: &Path) -> Result<Opts> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let opts = if is_json {
        let mut v: serde_json::Value = serde_json::from_str(&text)?;
        if let Some(cfg) = v.get_mut("config") {
            v = cfg.take();
        }
        serde_json::from_value(v)?
    } else {
        toml::from_str(&text)?
    };
    Ok(opts)
}
