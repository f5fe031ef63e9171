use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mixdens::bootstrap::{bootstrap_npmle, pooled_distribution, pooled_draws};
use mixdens::data::{load_counts, resolve_dataset};
use mixdens::gbnpmle::fit_gb_npmle;
use mixdens::metrics::{
    ise, kde_density, kde_weighted, score_density, score_draws, score_mixture, wasserstein1, Bandwidth,
    EmpiricalCdf, W1_RESOLUTION,
};
use mixdens::npmle::fit_npmle;
use mixdens::smooth::{default_bandwidths, kernel_smooth, loocv_bandwidth, smoothing_grid, BandwidthSelection};
use mixdens::{
    rng, BootstrapEnsemble, DensityOnGrid, DiscreteMixingDistribution, EmOptions, GbFit, KernelModel, NpmleFit,
    Observations, SimModel, SmoothedDensity, SupportGrid,
};

use crate::io::read_column;
use crate::opts::{FitSettings, Method, Opts};

/// Observations together with the kernel they are modelled with.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub label: String,
    pub y: Observations,
    pub kernel: KernelModel,
    /// Known true prior, for simulated data.
    pub model: Option<SimModel>,
    /// True θ of simulated data.
    pub theta: Option<Vec<f64>>,
    /// SHA-256 of the values as written by `y_csv`.
    pub hash: String,
}

impl Dataset {
    pub fn simulated(model: SimModel, n: usize, seed: u64) -> Result<Self> {
        let (y, theta) = model.simulate(n, seed)?;
        Ok(Self::new(format!("{model}-n{n}-seed{seed}"), y, model.kernel(), Some(model), Some(theta)))
    }

    fn new(label: String, y: Observations, kernel: KernelModel, model: Option<SimModel>, theta: Option<Vec<f64>>) -> Self {
        let hash = hex::encode(Sha256::digest(y_csv(&y, &kernel).as_bytes()));
        Dataset {
            label,
            y,
            kernel,
            model,
            theta,
            hash,
        }
    }

    /// `--data` if given (a file path or a dataset name), otherwise data simulated from
    /// `--model`, `--n` and `--seed`. Count data default to the Poisson kernel.
    pub fn from_opts(opts: &Opts) -> Result<Self> {
        let Some(data) = opts.data.as_deref() else {
            let model = opts.model.context("give --data or --model")?;
            return Self::simulated(model, opts.single_n()?, opts.seed());
        };
        let kernel = opts.model.map_or(KernelModel::POISSON, SimModel::kernel);
        let path = Path::new(data);
        let (label, values) = if path.is_file() {
            let values = if kernel.is_discrete() {
                load_counts(path)?.y.iter().map(|&v| v as f64).collect()
            } else {
                read_column(path)?
            };
            (path.display().to_string(), values)
        } else {
            let dir = opts.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"));
            let ds = resolve_dataset(data, Some(&dir))?;
            (ds.name.clone(), ds.y.iter().map(|&v| v as f64).collect())
        };
        let y = Observations::new(values, &kernel)?;
        Ok(Self::new(label, y, kernel, opts.model, None))
    }
}

/// Observations as a one-column CSV; integers for count kernels.
pub fn y_csv(y: &Observations, kernel: &KernelModel) -> String {
    let mut s = String::from("y\n");
    for &v in y.values() {
        if kernel.is_discrete() {
            s.push_str(&format!("{}\n", v as u64));
        } else {
            s.push_str(&format!("{v}\n"));
        }
    }
    s
}

/// Fitted output of one of the four estimators.
#[derive(Debug, Clone)]
pub enum Estimate {
    Npmle(NpmleFit),
    Boot {
        ensemble: BootstrapEnsemble<NpmleFit>,
        pooled: DiscreteMixingDistribution,
    },
    Smooth {
        npmle: NpmleFit,
        density: SmoothedDensity,
        selection: Option<BandwidthSelection>,
    },
    Gb(Box<GbFit>),
}

pub fn fit(method: Method, y: &Observations, kernel: &KernelModel, s: &FitSettings) -> Result<Estimate> {
    let em = EmOptions::default();
    let est = match method {
        Method::Npmle => {
            let grid = SupportGrid::default_for(y, kernel, s.grid_points)?;
            Estimate::Npmle(fit_npmle(y, kernel, &grid, &em)?)
        }
        Method::Boot => {
            let grid = SupportGrid::default_for(y, kernel, s.grid_points)?;
            let mut r = rng::substream(s.seed, rng::WEIGHTS);
            let ensemble = bootstrap_npmle(y, kernel, &grid, &s.boot, &mut r)?;
            let pooled = pooled_distribution(&ensemble)?;
            Estimate::Boot { ensemble, pooled }
        }
        Method::Smooth => {
            let grid = SupportGrid::default_for(y, kernel, s.grid_points)?;
            let selection = match s.bandwidth {
                Some(_) => None,
                None => Some(loocv_bandwidth(y, kernel, &grid, &default_bandwidths(), &em)?),
            };
            let h = s.bandwidth.or(selection.as_ref().map(|sel| sel.bandwidth)).expect("bandwidth");
            let npmle = fit_npmle(y, kernel, &grid, &em)?;
            let g = smoothing_grid(grid.lo(), grid.hi(), kernel.support(), h);
            let density = kernel_smooth(&npmle.distribution, h, &g, kernel.support())?;
            Estimate::Smooth {
                npmle,
                density,
                selection,
            }
        }
        Method::Gb => Estimate::Gb(Box::new(fit_gb_npmle(y, kernel, &s.train)?)),
    };
    Ok(est)
}

impl Estimate {
    pub fn method(&self) -> Method {
        match self {
            Estimate::Npmle(_) => Method::Npmle,
            Estimate::Boot { .. } => Method::Boot,
            Estimate::Smooth { .. } => Method::Smooth,
            Estimate::Gb(_) => Method::Gb,
        }
    }

    /// The form in which the estimate is compared with a true prior.
    pub fn prior_estimate(&self) -> PriorEstimate {
        match self {
            Estimate::Npmle(fit) => PriorEstimate::Mixture(fit.distribution.clone()),
            Estimate::Boot { pooled, .. } => PriorEstimate::Mixture(pooled.clone()),
            Estimate::Smooth { density, .. } => PriorEstimate::Density(DensityOnGrid::from(density)),
            Estimate::Gb(fit) => PriorEstimate::Draws(fit.ensemble.draws.clone()),
        }
    }

    /// Parameter draws for predictive scoring: one atom drawn from each bootstrap replicate,
    /// or the generated sample.
    pub fn predictive_draws(&self, seed: u64) -> Result<Vec<f64>> {
        match self {
            Estimate::Boot { ensemble, .. } => {
                let mut r = rng::substream(seed, "predictive");
                Ok(pooled_draws(ensemble, 1, &mut r)?)
            }
            Estimate::Gb(fit) => Ok(fit.ensemble.draws.clone()),
            other => bail!("{} yields no bootstrap draws; use boot or gb", other.method()),
        }
    }
}

/// An estimated prior in one of three representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum PriorEstimate {
    Mixture(DiscreteMixingDistribution),
    Draws(Vec<f64>),
    Density(DensityOnGrid),
}

impl PriorEstimate {
    /// W1 and ISE against a simulation model's prior.
    pub fn score_model(&self, model: SimModel) -> Result<(f64, f64)> {
        Ok(match self {
            PriorEstimate::Mixture(d) => score_mixture(model, d)?,
            PriorEstimate::Draws(x) => score_draws(model, x)?,
            PriorEstimate::Density(d) => score_density(model, d)?,
        })
    }

    /// W1 and ISE against a tabulated density; sample-based estimates are smoothed onto its grid.
    pub fn score_truth(&self, truth: &DensityOnGrid) -> Result<(f64, f64)> {
        let support = mixdens::Support::RealLine;
        let truth_cdf = truth.to_cdf();
        let (lo, hi) = (truth.grid[0], *truth.grid.last().expect("nonempty grid"));
        let widen = |pts: &[f64]| {
            (
                pts.iter().copied().fold(lo, f64::min),
                pts.iter().copied().fold(hi, f64::max),
            )
        };
        let (w1, est) = match self {
            PriorEstimate::Mixture(d) => (
                wasserstein1(d, &truth_cdf, widen(&d.atoms), W1_RESOLUTION),
                kde_weighted(&d.atoms, &d.weights, &truth.grid, Bandwidth::Silverman, support)?,
            ),
            PriorEstimate::Draws(x) => (
                wasserstein1(&EmpiricalCdf::new(x)?, &truth_cdf, widen(x), W1_RESOLUTION),
                kde_density(x, &truth.grid, Bandwidth::Silverman, support)?,
            ),
            PriorEstimate::Density(d) => (
                wasserstein1(&d.to_cdf(), &truth_cdf, widen(&d.grid), W1_RESOLUTION),
                d.clone(),
            ),
        };
        Ok((w1, ise(truth, &est)?))
    }
}
