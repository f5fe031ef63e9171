//! Known conditional likelihood families `f(y | θ)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Shape of the Gamma kernel; `θ` is its rate.
pub const GAMMA_SHAPE: f64 = 10.0;
/// Number of trials of the Binomial kernel.
pub const BINOMIAL_TRIALS: u32 = 10;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// `N(θ, 1)`.
    Gaussian,
    /// `Poisson(θ)`.
    Poisson,
    /// `Gamma(shape = 10, rate = θ)`.
    Gamma,
    /// `Binomial(10, θ)`.
    Binomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    RealLine,
    PositiveReal,
    UnitInterval,
}

impl Support {
    /// Inclusive closure used for validation; boundary points are limits, handled explicitly.
    pub fn contains(self, theta: f64) -> bool {
        match self {
            Support::RealLine => theta.is_finite(),
            Support::PositiveReal => theta.is_finite() && theta >= 0.0,
            Support::UnitInterval => (0.0..=1.0).contains(&theta),
        }
    }

    /// Clamp into the support (used by grids and density evaluation ranges).
    pub fn clamp(self, theta: f64) -> f64 {
        match self {
            Support::RealLine => theta,
            Support::PositiveReal => theta.max(0.0),
            Support::UnitInterval => theta.clamp(0.0, 1.0),
        }
    }

    pub fn lower(self) -> Option<f64> {
        match self {
            Support::RealLine => None,
            Support::PositiveReal | Support::UnitInterval => Some(0.0),
        }
    }

    pub fn upper(self) -> Option<f64> {
        match self {
            Support::UnitInterval => Some(1.0),
            _ => None,
        }
    }

    /// Maps an unconstrained real onto the support: identity, softplus or logistic.
    pub fn to_support(self, x: f64) -> f64 {
        match self {
            Support::RealLine => x,
            Support::PositiveReal => softplus(x),
            Support::UnitInterval => logistic(x),
        }
    }

    /// Derivative of [`Support::to_support`] at `x`.
    pub fn to_support_derivative(self, x: f64) -> f64 {
        match self {
            Support::RealLine => 1.0,
            Support::PositiveReal => logistic(x),
            Support::UnitInterval => {
                let s = logistic(x);
                s * (1.0 - s)
            }
        }
    }

    /// Inverse of [`Support::to_support`] for interior `theta`.
    pub fn from_support(self, theta: f64) -> f64 {
        match self {
            Support::RealLine => theta,
            // ln(e^θ - 1), written to stay accurate for small and large θ
            Support::PositiveReal => {
                if theta > 30.0 {
                    theta + (-(-theta).exp()).ln_1p()
                } else {
                    theta.exp_m1().ln()
                }
            }
            Support::UnitInterval => (theta / (1.0 - theta)).ln(),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A kernel family together with its parameter support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelModel {
    pub family: Family,
}

impl KernelModel {
    pub const GAUSSIAN: KernelModel = KernelModel { family: Family::Gaussian };
    pub const POISSON: KernelModel = KernelModel { family: Family::Poisson };
    pub const GAMMA: KernelModel = KernelModel { family: Family::Gamma };
    pub const BINOMIAL: KernelModel = KernelModel { family: Family::Binomial };

    pub fn new(family: Family) -> Self {
        KernelModel { family }
    }

    pub fn support(&self) -> Support {
        match self.family {
            Family::Gaussian => Support::RealLine,
            Family::Poisson | Family::Gamma => Support::PositiveReal,
            Family::Binomial => Support::UnitInterval,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.family, Family::Poisson | Family::Binomial)
    }

    pub fn valid_observation(&self, y: f64) -> bool {
        match self.family {
            Family::Gaussian => y.is_finite(),
            Family::Poisson => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
            Family::Gamma => y.is_finite() && y > 0.0,
            Family::Binomial => {
                y.is_finite() && y >= 0.0 && y <= BINOMIAL_TRIALS as f64 && y.fract() == 0.0
            }
        }
    }

    /// `log f(y | θ)` with validation of both arguments.
    pub fn log_density(&self, y: f64, theta: f64) -> Result<f64> {
        if !self.support().contains(theta) || (self.family == Family::Gamma && theta == 0.0) {
            return Err(Error::OutsideSupport {
                theta,
                support: self.support(),
            });
        }
        if !self.valid_observation(y) {
            return Err(Error::InvalidObservation {
                y,
                family: self.family,
            });
        }
        Ok(self.log_density_unchecked(y, theta))
    }

    /// `log f(y | θ)` for arguments already known to be valid.
    #[inline]
    pub fn log_density_unchecked(&self, y: f64, theta: f64) -> f64 {
        match self.family {
            Family::Gaussian => {
                let d = y - theta;
                -0.5 * d * d - LN_SQRT_2PI
            }
            Family::Poisson => {
                if theta == 0.0 {
                    return if y == 0.0 { 0.0 } else { f64::NEG_INFINITY };
                }
                y * theta.ln() - theta - ln_gamma(y + 1.0)
            }
            Family::Gamma => {
                GAMMA_SHAPE * theta.ln() + (GAMMA_SHAPE - 1.0) * y.ln()
                    - theta * y
                    - ln_gamma(GAMMA_SHAPE)
            }
            Family::Binomial => {
                let trials = BINOMIAL_TRIALS as f64;
                let ln_choose = ln_binomial_coefficient(y);
                let success = if y == 0.0 { 0.0 } else { y * theta.ln() };
                let failure = if y == trials { 0.0 } else { (trials - y) * (-theta).ln_1p() };
                ln_choose + success + failure
            }
        }
    }

    /// Observation-only part of `log f(y | θ)`, i.e. the terms that do not depend on `θ`.
    #[inline]
    pub(crate) fn log_base(&self, y: f64) -> f64 {
        match self.family {
            Family::Gaussian => -0.5 * y * y - LN_SQRT_2PI,
            Family::Poisson => -ln_gamma(y + 1.0),
            Family::Gamma => (GAMMA_SHAPE - 1.0) * y.ln() - ln_gamma(GAMMA_SHAPE),
            Family::Binomial => ln_binomial_coefficient(y),
        }
    }

    /// Every family is an exponential family in `y`:
    /// `log f(y | θ) = log_base(y) + y·a(θ) + b(θ)`. Returns `(a, b, a', b')`.
    #[inline]
    pub(crate) fn natural_terms(&self, theta: f64) -> (f64, f64, f64, f64) {
        match self.family {
            Family::Gaussian => (theta, -0.5 * theta * theta, 1.0, -theta),
            Family::Poisson => {
                let t = theta.max(f64::MIN_POSITIVE);
                (t.ln(), -t, 1.0 / t, -1.0)
            }
            Family::Gamma => {
                let t = theta.max(f64::MIN_POSITIVE);
                (-t, GAMMA_SHAPE * t.ln(), -1.0, GAMMA_SHAPE / t)
            }
            Family::Binomial => {
                let t = theta.clamp(1e-300, 1.0 - f64::EPSILON / 2.0);
                let trials = BINOMIAL_TRIALS as f64;
                let q = 1.0 - t;
                ((t / q).ln(), trials * q.ln(), 1.0 / (t * q), -trials / q)
            }
        }
    }

    /// `∂/∂θ log f(y | θ)` at interior `θ`.
    #[inline]
    pub fn score(&self, y: f64, theta: f64) -> f64 {
        match self.family {
            Family::Gaussian => y - theta,
            Family::Poisson => y / theta - 1.0,
            Family::Gamma => GAMMA_SHAPE / theta - y,
            Family::Binomial => y / theta - (BINOMIAL_TRIALS as f64 - y) / (1.0 - theta),
        }
    }

    /// One draw from `f(· | θ)`.
    pub fn sample<R: Rng + ?Sized>(&self, theta: f64, rng: &mut R) -> Result<f64> {
        let outside = || Error::OutsideSupport {
            theta,
            support: self.support(),
        };
        if !self.support().contains(theta) {
            return Err(outside());
        }
        let y = match self.family {
            Family::Gaussian => theta + Normal::new(0.0, 1.0).expect("unit normal").sample(rng),
            Family::Poisson => {
                if theta == 0.0 {
                    0.0
                } else {
                    Poisson::new(theta).map_err(|_| outside())?.sample(rng)
                }
            }
            Family::Gamma => {
                if theta == 0.0 {
                    return Err(outside());
                }
                Gamma::new(GAMMA_SHAPE, 1.0 / theta)
                    .map_err(|_| outside())?
                    .sample(rng)
            }
            Family::Binomial => Binomial::new(BINOMIAL_TRIALS as u64, theta)
                .map_err(|_| outside())?
                .sample(rng) as f64,
        };
        Ok(y)
    }

    pub fn to_support(&self, x: f64) -> f64 {
        self.support().to_support(x)
    }
}

/// `-½ ln 2π`, the standard normal log-density at its mode.
pub fn std_normal_log_mode() -> f64 {
    -0.5 * (2.0 * PI).ln()
}

/// Validated responses for one kernel family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    y: Vec<f64>,
}

impl Observations {
    pub fn new(y: Vec<f64>, kernel: &KernelModel) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(&bad) = y.iter().find(|&&v| !kernel.valid_observation(v)) {
            return Err(Error::InvalidObservation {
                y: bad,
                family: kernel.family,
            });
        }
        Ok(Observations { y })
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.y.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.y.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Subset by index, keeping order.
    pub fn select(&self, idx: &[usize]) -> Observations {
        Observations {
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Distinct values and, for each observation, the index of its value.
    pub fn grouping(&self) -> Grouping {
        let mut uniq: Vec<f64> = self.y.clone();
        uniq.sort_by(|a, b| a.total_cmp(b));
        uniq.dedup();
        let index = self
            .y
            .iter()
            .map(|v| uniq.binary_search_by(|u| u.total_cmp(v)).expect("present"))
            .collect();
        Grouping { values: uniq, index }
    }
}

/// Distinct observation values; likelihood work is done once per distinct value.
#[derive(Debug, Clone)]
pub struct Grouping {
    pub values: Vec<f64>,
    pub index: Vec<usize>,
}

impl Grouping {
    /// Sum per-observation weights into per-value weights.
    pub fn aggregate(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for (&g, &wi) in self.index.iter().zip(w) {
            out[g] += wi;
        }
        out
    }
}

fn ln_binomial_coefficient(y: f64) -> f64 {
    let k = y as u64;
    let mut c = 1u64;
    for j in 0..k {
        c = c * (BINOMIAL_TRIALS as u64 - j) / (j + 1);
    }
    (c as f64).ln()
}
