//! Simulation models with known priors and the bundled count datasets.

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous, ContinuousCDF, Gamma, Normal};

use crate::error::{Error, Result};
use crate::kernels::{KernelModel, Observations};
use crate::metrics::DensityOnGrid;
use crate::rng;

const MORTALITY_CSV: &str = include_str!("../../../data/mortality.csv");
const THAILAND_CSV: &str = include_str!("../../../data/thailand.csv");

/// Names accepted by [`resolve_dataset`].
pub const DATASET_NAMES: [&str; 3] = ["norberg", "thailand", "mortality"];

/// The simulation designs. Normal components are written `N(mean, variance)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimModel {
    /// `θ ~ ½N(−3, 2) + ½N(3, 1)`, `y | θ ~ N(θ, 1)`.
    Gmm,
    /// `θ ~ Beta(10, 5)`, `y | θ ~ Gamma(shape 10, rate θ)`.
    Gamm,
    /// `θ ~ Gamma(3, 1)`, `y | θ ~ Poisson(θ)`.
    Pmm,
    /// `θ ~ 0.2N(−4, 0.5) + 0.6N(0, 1) + 0.2N(4, 0.5)`, `y | θ ~ N(θ, 1)`.
    GmmTri,
    /// `θ ~ Beta(3, 2)`, `y | θ ~ Binomial(10, θ)`.
    Bbm,
}

impl SimModel {
    pub const ALL: [SimModel; 5] = [SimModel::Gmm, SimModel::Gamm, SimModel::Pmm, SimModel::GmmTri, SimModel::Bbm];

    pub fn name(self) -> &'static str {
        match self {
            SimModel::Gmm => "gmm",
            SimModel::Gamm => "gamm",
            SimModel::Pmm => "pmm",
            SimModel::GmmTri => "gmm-tri",
            SimModel::Bbm => "bbm",
        }
    }

    pub fn kernel(self) -> KernelModel {
        match self {
            SimModel::Gmm | SimModel::GmmTri => KernelModel::GAUSSIAN,
            SimModel::Gamm => KernelModel::GAMMA,
            SimModel::Pmm => KernelModel::POISSON,
            SimModel::Bbm => KernelModel::BINOMIAL,
        }
    }

    /// `(weight, mean, variance)` of each normal component, for the Gaussian designs.
    fn components(self) -> &'static [(f64, f64, f64)] {
        match self {
            SimModel::Gmm => &[(0.5, -3.0, 2.0), (0.5, 3.0, 1.0)],
            SimModel::GmmTri => &[(0.2, -4.0, 0.5), (0.6, 0.0, 1.0), (0.2, 4.0, 0.5)],
            _ => &[],
        }
    }

    /// Range holding all but a negligible fraction of the prior mass.
    pub fn prior_range(self) -> (f64, f64) {
        match self {
            SimModel::Gmm => (-3.0 - 6.0 * 2f64.sqrt(), 9.0),
            SimModel::GmmTri => (-4.0 - 6.0 * 0.5f64.sqrt(), 4.0 + 6.0 * 0.5f64.sqrt()),
            SimModel::Gamm | SimModel::Bbm => (0.0, 1.0),
            SimModel::Pmm => (0.0, 25.0),
        }
    }

    pub fn prior_pdf(self, theta: f64) -> f64 {
        match self {
            SimModel::Gmm | SimModel::GmmTri => self
                .components()
                .iter()
                .map(|&(p, m, v)| p * Normal::new(m, v.sqrt()).expect("valid normal").pdf(theta))
                .sum(),
            SimModel::Gamm => beta(10.0, 5.0).pdf(theta),
            SimModel::Bbm => beta(3.0, 2.0).pdf(theta),
            SimModel::Pmm => {
                if theta < 0.0 {
                    0.0
                } else {
                    gamma_prior().pdf(theta)
                }
            }
        }
    }

    pub fn prior_cdf(self, theta: f64) -> f64 {
        match self {
            SimModel::Gmm | SimModel::GmmTri => self
                .components()
                .iter()
                .map(|&(p, m, v)| p * Normal::new(m, v.sqrt()).expect("valid normal").cdf(theta))
                .sum(),
            SimModel::Gamm => beta(10.0, 5.0).cdf(theta.clamp(0.0, 1.0)),
            SimModel::Bbm => beta(3.0, 2.0).cdf(theta.clamp(0.0, 1.0)),
            SimModel::Pmm => gamma_prior().cdf(theta.max(0.0)),
        }
    }

    pub fn sample_prior<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            SimModel::Gmm | SimModel::GmmTri => {
                let comps = self.components();
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = comps[comps.len() - 1];
                for &c in comps {
                    acc += c.0;
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                rand_distr::Normal::new(pick.1, pick.2.sqrt()).expect("valid normal").sample(rng)
            }
            SimModel::Gamm => rand_distr::Beta::new(10.0, 5.0).expect("valid beta").sample(rng),
            SimModel::Bbm => rand_distr::Beta::new(3.0, 2.0).expect("valid beta").sample(rng),
            SimModel::Pmm => rand_distr::Gamma::new(3.0, 1.0).expect("valid gamma").sample(rng),
        }
    }

    /// Prior density on `grid`, not renormalized.
    pub fn prior_density(self, grid: &[f64]) -> Result<DensityOnGrid> {
        let mut d = DensityOnGrid::new(grid.to_vec(), grid.iter().map(|&t| self.prior_pdf(t)).collect())?;
        d.normalized = true;
        Ok(d)
    }

    pub fn prior_cdf_on(self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&t| self.prior_cdf(t)).collect()
    }

    /// `n` draws `θ_i` from the prior and `y_i | θ_i` from the kernel.
    pub fn simulate(self, n: usize, seed: u64) -> Result<(Observations, Vec<f64>)> {
        if n == 0 {
            return Err(Error::Empty);
        }
        let mut r = rng::substream(seed, rng::DATA);
        let k = self.kernel();
        let mut theta = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let t = self.sample_prior(&mut r);
            y.push(k.sample(t, &mut r)?);
            theta.push(t);
        }
        Ok((Observations::new(y, &k)?, theta))
    }
}

fn beta(a: f64, b: f64) -> Beta {
    Beta::new(a, b).expect("valid beta")
}

fn gamma_prior() -> Gamma {
    Gamma::new(3.0, 1.0).expect("valid gamma")
}

impl fmt::Display for SimModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "gmm" => Ok(SimModel::Gmm),
            "gamm" => Ok(SimModel::Gamm),
            "pmm" => Ok(SimModel::Pmm),
            "gmm-tri" | "gmmtri" => Ok(SimModel::GmmTri),
            "bbm" => Ok(SimModel::Bbm),
            other => Err(Error::invalid(format!(
                "unknown model {other:?}; expected one of gmm, gamm, pmm, gmm-tri, bbm"
            ))),
        }
    }
}

/// A named vector of nonnegative counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountDataset {
    pub name: String,
    pub y: Vec<u64>,
}

impl CountDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Poisson observations.
    pub fn observations(&self) -> Result<Observations> {
        Observations::new(self.y.iter().map(|&v| v as f64).collect(), &KernelModel::POISSON)
    }
}

fn parse_count(field: &str, path: &Path, line: u64, what: &str) -> Result<u64> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let v: f64 = field.trim().parse().map_err(|_| err(format!("{what} {field:?} is not a number")))?;
    if v < 0.0 {
        return Err(err(format!("negative {what} {v}")));
    }
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(err(format!("{what} {v} is not an integer")));
    }
    Ok(v as u64)
}

/// Parse CSV with a header and a count column, optionally followed by a frequency column.
pub fn parse_counts<R: Read>(input: R, name: &str, path: &Path) -> Result<CountDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let with_freq = match headers.len() {
        1 => false,
        2 => true,
        k => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected 1 or 2 columns, found {k}"),
            })
        }
    };
    let mut y = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let v = parse_count(&rec[0], path, line, "count")?;
        let times = if with_freq {
            parse_count(&rec[1], path, line, "frequency")?
        } else {
            1
        };
        y.extend(std::iter::repeat_n(v, times as usize));
    }
    if y.is_empty() {
        return Err(Error::Empty);
    }
    Ok(CountDataset { name: name.into(), y })
}

/// Read a count CSV file; the dataset is named after the file stem.
pub fn load_counts(path: &Path) -> Result<CountDataset> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("counts").to_string();
    let file = std::fs::File::open(path)?;
    parse_counts(file, &name, path)
}

/// Bundled copy of `name`, if there is one.
pub fn bundled_dataset(name: &str) -> Option<Result<CountDataset>> {
    let text = match name {
        "mortality" => MORTALITY_CSV,
        "thailand" => THAILAND_CSV,
        _ => return None,
    };
    Some(parse_counts(text.as_bytes(), name, &PathBuf::from(format!("<bundled {name}>"))))
}

/// Dataset by name or path: `<data_dir>/<name>.csv` wins when present, then the bundled copies.
pub fn resolve_dataset(name_or_path: &str, data_dir: Option<&Path>) -> Result<CountDataset> {
    let as_path = Path::new(name_or_path);
    if as_path.extension().is_some() && as_path.is_file() {
        return load_counts(as_path);
    }
    let name = name_or_path.to_ascii_lowercase();
    if let Some(dir) = data_dir {
        let candidate = dir.join(format!("{name}.csv"));
        if candidate.is_file() {
            return load_counts(&candidate);
        }
    }
    if let Some(d) = bundled_dataset(&name) {
        return d;
    }
    if DATASET_NAMES.contains(&name.as_str()) {
        return Err(Error::invalid(format!(
            "dataset {name} is not bundled; place {name}.csv (columns y[,freq]) in the data directory"
        )));
    }
    Err(Error::invalid(format!(
        "unknown dataset {name_or_path:?}; expected a CSV path or one of {}",
        DATASET_NAMES.join(", ")
    )))
}
