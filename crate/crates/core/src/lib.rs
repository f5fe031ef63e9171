//! Estimation of the continuous mixing density of a univariate latent mixture model
//! `y_i | θ_i ~ f(y_i | θ_i)`, `θ_i ~ π`.
//!
//! Four estimators are provided:
//!
//! * [`npmle`]: the discrete nonparametric maximum likelihood estimator, solved by EM on a
//!   fixed support grid (optionally with per-observation weights);
//! * [`bootstrap`]: the brute-force bootstrapped NPMLE, one weighted fit per replicate;
//! * [`smooth`]: Gaussian kernel smoothing of the discrete NPMLE with a cross-validated bandwidth;
//! * [`gbnpmle`]: the generative bootstrap, where a single feedforward generator ([`nnet`]) maps a
//!   bootstrap weight vector and noise to candidate parameters, trained once and then sampled
//!   at the cost of a forward pass per draw.
//!
//! [`metrics`] and [`data`] hold the evaluation harness: Wasserstein-1, integrated squared
//! error, cross-validated log predictive score, the simulation models and the bundled count
//! datasets.

pub mod bootstrap;
pub mod data;
pub mod error;
pub mod gbnpmle;
pub mod kernels;
pub mod metrics;
pub mod nnet;
pub mod npmle;
pub mod rng;
pub mod smooth;
mod util;

pub use bootstrap::{BootstrapEnsemble, WeightScheme};
pub use data::{CountDataset, SimModel};
pub use error::{Error, Result};
pub use gbnpmle::{GbFit, MixingProbabilities, TrainConfig, TrainingTrace};
pub use kernels::{Family, KernelModel, Observations, Support};
pub use metrics::DensityOnGrid;
pub use nnet::{AdamState, GeneratorNetwork};
pub use npmle::{DiscreteMixingDistribution, EmOptions, NpmleFit, SupportGrid};
pub use smooth::SmoothedDensity;

