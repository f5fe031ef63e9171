//! Generative bootstrap NPMLE: a single generator trained on the modified objective with uniform
//! candidate probabilities (Stage I), candidate probabilities `τ` estimated by Monte Carlo EM with
//! the generator frozen (Stage II), then `B` draws at the cost of one forward pass each.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{fill_weights, BootstrapEnsemble, WeightScheme};
use crate::error::{Error, Result};
use crate::kernels::{Family, KernelModel, Observations};
use crate::nnet::{loss_and_grad, AdamState, Architecture, GeneratorNetwork, MonteCarloBatch};
use crate::rng::{self, StreamRng};
use crate::util::{log_sum_exp, quantile};

/// Consecutive non-finite epochs tolerated before Stage I gives up.
pub const MAX_NON_FINITE_EPOCHS: usize = 10;
const GENERATE_CHUNK: usize = 256;

const STAGE1: u64 = 1;
const STAGE2: u64 = 2;

/// Algorithm constants and network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of candidates `l`.
    pub candidates: usize,
    /// Stage II stopping tolerance.
    pub tol: f64,
    /// Stage I epochs `T`; one Adam step each.
    pub epochs: usize,
    /// Number of generated draws `B`.
    pub draws: usize,
    /// Weight vectors per Stage I batch, `S_w`.
    pub weight_samples: usize,
    /// Noise draws per weight vector, `S_z`.
    pub noise_samples: usize,
    /// Candidate indices per batch, `S_γ`.
    pub gamma_samples: usize,
    /// Noise dimension `q`.
    pub noise_dim: usize,
    /// Hidden layer widths; length is `L`.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// `(w, z)` pairs per Stage II iteration.
    pub mcem_samples: usize,
    pub mcem_max_iter: usize,
    pub scheme: WeightScheme,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            candidates: 100,
            tol: 1e-3,
            epochs: 2000,
            draws: 1000,
            weight_samples: 100,
            noise_samples: 100,
            gamma_samples: 100,
            noise_dim: 1,
            hidden: vec![500, 500],
            learning_rate: 1e-4,
            mcem_samples: 100,
            mcem_max_iter: 200,
            scheme: WeightScheme::DirichletTimesN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reduced Monte Carlo batches, fewer epochs and a larger step, sized for a single CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 400,
            weight_samples: 4,
            noise_samples: 4,
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("candidates", self.candidates),
            ("draws", self.draws),
            ("weight_samples", self.weight_samples),
            ("noise_samples", self.noise_samples),
            ("gamma_samples", self.gamma_samples),
            ("noise_dim", self.noise_dim),
            ("mcem_samples", self.mcem_samples),
            ("mcem_max_iter", self.mcem_max_iter),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive and at least one layer given"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    fn architecture(&self, n: usize) -> Architecture {
        Architecture {
            n_weights: n,
            noise_dim: self.noise_dim,
            hidden: self.hidden.clone(),
            outputs: self.candidates,
        }
    }
}

/// Selection probabilities over the `l` candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingProbabilities {
    pub tau: Vec<f64>,
}

impl MixingProbabilities {
    pub fn uniform(l: usize) -> Self {
        MixingProbabilities {
            tau: vec![1.0 / l as f64; l],
        }
    }

    pub fn new(tau: Vec<f64>) -> Result<Self> {
        if tau.is_empty() || tau.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
            return Err(Error::invalid("τ must be a nonempty vector of nonnegative numbers"));
        }
        let total: f64 = tau.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("τ sums to {total}, not 1")));
        }
        Ok(MixingProbabilities { tau })
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// Convergence diagnostics for both stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Stage I Monte Carlo loss per epoch.
    pub loss: Vec<f64>,
    /// Stage II Monte Carlo observed-data log-likelihood at the start of each iteration.
    pub loglik: Vec<f64>,
    /// Standard error of each `loglik` entry.
    pub loglik_se: Vec<f64>,
    /// `max_k |Δτ_k|` per iteration.
    pub max_change: Vec<f64>,
    /// `min_k |Δτ_k|` per iteration; the stopping statistic.
    pub min_change: Vec<f64>,
    pub stage1_seconds: f64,
    pub stage2_seconds: f64,
    pub generate_seconds: f64,
}

impl TrainingTrace {
    pub fn mcem_iterations(&self) -> usize {
        self.loglik.len()
    }

    /// `epoch,loss` rows.
    pub fn write_loss_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,loss")?;
        for (e, l) in self.loss.iter().enumerate() {
            writeln!(out, "{},{l}", e + 1)?;
        }
        Ok(())
    }

    /// `iter,loglik,se,max_change,min_change` rows.
    pub fn write_loglik_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,loglik,se,max_change,min_change")?;
        for i in 0..self.loglik.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                i + 1,
                self.loglik[i],
                self.loglik_se[i],
                self.max_change[i],
                self.min_change[i]
            )?;
        }
        Ok(())
    }
}

/// Everything produced by [`fit_gb_npmle`].
#[derive(Debug, Clone)]
pub struct GbFit {
    pub ensemble: BootstrapEnsemble<f64>,
    pub network: GeneratorNetwork,
    pub tau: MixingProbabilities,
    pub trace: TrainingTrace,
}

/// θ range used to spread the initial candidates, from quantiles of the data.
pub fn initial_theta_range(y: &Observations, kernel: &KernelModel) -> (f64, f64) {
    let mut v = y.values().to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let (q01, q99) = (quantile(&v, 0.01), quantile(&v, 0.99));
    let (lo, hi) = match kernel.family {
        Family::Gaussian => (q01, q99),
        Family::Poisson => (q01.max(0.05), q99.max(0.05)),
        Family::Gamma => {
            let shape = crate::kernels::GAMMA_SHAPE;
            (shape / q99, shape / q01)
        }
        Family::Binomial => {
            let trials = crate::kernels::BINOMIAL_TRIALS as f64;
            ((q01 / trials).clamp(0.02, 0.98), (q99 / trials).clamp(0.02, 0.98))
        }
    };
    if hi - lo < 1e-6 {
        let pad = 0.1 * lo.abs().max(0.1);
        kernel_clamped(kernel, lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

fn kernel_clamped(kernel: &KernelModel, lo: f64, hi: f64) -> (f64, f64) {
    let s = kernel.support();
    let lo = s.lower().map_or(lo, |b| lo.max(b + 1e-3));
    let hi = s.upper().map_or(hi, |b| hi.min(b - 1e-3));
    (lo, hi)
}

fn uniform_noise(rng: &mut StreamRng, q: usize) -> Vec<f64> {
    (0..q).map(|_| rng.random::<f64>()).collect()
}

/// Freshly initialized generator for data `y`.
pub fn initial_network(y: &Observations, kernel: &KernelModel, cfg: &TrainConfig) -> Result<GeneratorNetwork> {
    cfg.validate()?;
    let mut init = rng::substream(cfg.seed, rng::INIT);
    GeneratorNetwork::init(
        cfg.architecture(y.len()),
        kernel.support(),
        initial_theta_range(y, kernel),
        &mut init,
    )
}

/// Stage I: `T` Adam steps on the modified objective with `τ` uniform.
pub fn stage1_train(
    y: &Observations,
    kernel: &KernelModel,
    cfg: &TrainConfig,
) -> Result<(GeneratorNetwork, TrainingTrace)> {
    let net = initial_network(y, kernel, cfg)?;
    stage1_continue(net, y, kernel, cfg)
}

/// Stage I starting from a given network.
pub fn stage1_continue(
    mut net: GeneratorNetwork,
    y: &Observations,
    kernel: &KernelModel,
    cfg: &TrainConfig,
) -> Result<(GeneratorNetwork, TrainingTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let n = y.len();
    let groups = y.grouping();
    let mut w_rng = rng::child(cfg.seed, rng::WEIGHTS, STAGE1);
    let mut z_rng = rng::child(cfg.seed, rng::NOISE, STAGE1);
    let mut adam = AdamState::new(net.n_params(), cfg.learning_rate);
    // stratified γ: every candidate equally often, matching uniform τ in expectation
    let per_index = cfg.gamma_samples.div_ceil(cfg.candidates) as f64;
    let mut batch = MonteCarloBatch {
        weights: vec![vec![0.0; n]; cfg.weight_samples],
        noise: vec![Vec::new(); cfg.weight_samples],
        gamma_counts: vec![per_index; cfg.candidates],
    };
    let mut trace = TrainingTrace::default();
    let mut bad_run = 0;
    for epoch in 0..cfg.epochs {
        for s in 0..cfg.weight_samples {
            fill_weights(cfg.scheme, &mut w_rng, &mut batch.weights[s]);
            batch.noise[s] = (0..cfg.noise_samples)
                .map(|_| uniform_noise(&mut z_rng, cfg.noise_dim))
                .collect();
        }
        match loss_and_grad(&net, &batch, &groups, kernel) {
            Ok((loss, grad)) if loss.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                bad_run = 0;
                trace.loss.push(loss);
                adam.step(net.params_mut(), &grad)?;
            }
            Ok(_) | Err(Error::NonFiniteLoss { .. }) => {
                bad_run += 1;
                trace.loss.push(f64::NAN);
                if bad_run >= MAX_NON_FINITE_EPOCHS {
                    return Err(Error::TrainingDiverged {
                        epochs: cfg.epochs,
                        last_epoch: epoch,
                    });
                }
            }
            Err(e) => return Err(e),
        }
        if epoch % 100 == 0 {
            log::debug!("stage I epoch {epoch}: loss {:?}", trace.loss.last());
        }
    }
    trace.stage1_seconds = start.elapsed().as_secs_f64();
    Ok((net, trace))
}

/// `log Ê_{w,z} f(y_u | θ_k(w, z))` for every distinct value `u` and candidate `k`, from one batch
/// of `(w, z)` pairs, plus the per-pair log-likelihoods needed for standard errors.
struct CandidateLikelihoods {
    /// Distinct values × candidates.
    log_mean: Array2<f64>,
    /// Pairs × distinct values × candidates, in log space.
    per_pair: Vec<Array2<f64>>,
}

fn candidate_likelihoods(
    net: &GeneratorNetwork,
    values: &[f64],
    kernel: &KernelModel,
    cfg: &TrainConfig,
    w_rng: &mut StreamRng,
    z_rng: &mut StreamRng,
) -> Result<CandidateLikelihoods> {
    let n = net.architecture().n_weights;
    let s = cfg.mcem_samples;
    let l = net.outputs();
    let mut ws = Array2::<f64>::zeros((s, n));
    let mut zs = Array2::<f64>::zeros((s, cfg.noise_dim));
    for r in 0..s {
        fill_weights(cfg.scheme, w_rng, ws.row_mut(r).as_slice_mut().expect("contiguous"));
        for c in 0..cfg.noise_dim {
            zs[[r, c]] = z_rng.random::<f64>();
        }
    }
    let theta = net.forward_many(ws.view(), zs.view())?;
    let per_pair: Vec<Array2<f64>> = (0..s)
        .into_par_iter()
        .map(|r| {
            let mut m = Array2::<f64>::zeros((values.len(), l));
            for (u, &yu) in values.iter().enumerate() {
                for k in 0..l {
                    m[[u, k]] = kernel.log_density_unchecked(yu, theta[[r, k]]);
                }
            }
            m
        })
        .collect();
    let log_s = (s as f64).ln();
    let mut log_mean = Array2::<f64>::zeros((values.len(), l));
    let mut buf = vec![0.0; s];
    for u in 0..values.len() {
        for k in 0..l {
            for (b, m) in buf.iter_mut().zip(&per_pair) {
                *b = m[[u, k]];
            }
            log_mean[[u, k]] = log_sum_exp(&buf) - log_s;
        }
    }
    Ok(CandidateLikelihoods { log_mean, per_pair })
}

/// Monte Carlo observed-data log-likelihood `Σ_i log Σ_k τ_k Ê f(y_i | θ_k)` and its
/// delta-method standard error.
fn mixture_loglik(
    lik: &CandidateLikelihoods,
    log_tau: &[f64],
    counts: &[f64],
    groups: &crate::kernels::Grouping,
) -> Result<(f64, f64)> {
    let n_u = counts.len();
    let mut log_marg = vec![0.0; n_u];
    let mut buf = vec![0.0; log_tau.len()];
    for u in 0..n_u {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = log_tau[k] + lik.log_mean[[u, k]];
        }
        log_marg[u] = log_sum_exp(&buf);
        if !log_marg[u].is_finite() {
            let index = groups.index.iter().position(|&g| g == u).unwrap_or(0);
            return Err(Error::Underflow {
                index,
                y: groups.values[u],
            });
        }
    }
    let ll: f64 = log_marg.iter().zip(counts).map(|(m, c)| m * c).sum();
    // per-pair influence: Σ_u c_u · g_su / m_u where g_su is pair s's τ-mixture likelihood
    let s = lik.per_pair.len();
    let infl: Vec<f64> = lik
        .per_pair
        .iter()
        .map(|m| {
            let mut acc = 0.0;
            for u in 0..n_u {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = log_tau[k] + m[[u, k]];
                }
                acc += counts[u] * (log_sum_exp(&buf) - log_marg[u]).exp();
            }
            acc
        })
        .collect();
    let mean = infl.iter().sum::<f64>() / s as f64;
    let var = if s > 1 {
        infl.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64
    } else {
        0.0
    };
    Ok((ll, (var / s as f64).sqrt()))
}

/// Stage II: Monte Carlo EM for `τ` with the generator fixed. One shared `(w, z)` batch per
/// iteration; stops once `min_k |Δτ_k| < tol` or after `mcem_max_iter` iterations.
pub fn stage2_mcem(
    y: &Observations,
    kernel: &KernelModel,
    net: &GeneratorNetwork,
    cfg: &TrainConfig,
) -> Result<(MixingProbabilities, TrainingTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let l = net.outputs();
    let mut trace = TrainingTrace::default();
    if l == 1 {
        trace.loglik.push(f64::NAN);
        trace.loglik_se.push(0.0);
        trace.max_change.push(0.0);
        trace.min_change.push(0.0);
        trace.stage2_seconds = start.elapsed().as_secs_f64();
        return Ok((MixingProbabilities { tau: vec![1.0] }, trace));
    }
    let groups = y.grouping();
    let counts = groups.aggregate(&vec![1.0; y.len()]);
    let n = y.len() as f64;
    let mut w_rng = rng::child(cfg.seed, rng::WEIGHTS, STAGE2);
    let mut z_rng = rng::child(cfg.seed, rng::NOISE, STAGE2);
    let mut tau = vec![1.0 / l as f64; l];
    for iter in 0..cfg.mcem_max_iter {
        let lik = candidate_likelihoods(net, &groups.values, kernel, cfg, &mut w_rng, &mut z_rng)?;
        let log_tau: Vec<f64> = tau.iter().map(|t| t.ln()).collect();
        let (ll, se) = mixture_loglik(&lik, &log_tau, &counts, &groups)?;
        let mut next = vec![0.0; l];
        let mut buf = vec![0.0; l];
        for (u, &c) in counts.iter().enumerate() {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = log_tau[k] + lik.log_mean[[u, k]];
            }
            let denom = log_sum_exp(&buf);
            for (nk, &b) in next.iter_mut().zip(&buf) {
                *nk += c * (b - denom).exp();
            }
        }
        next.iter_mut().for_each(|t| *t /= n);
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|t| *t /= total);
        let changes: Vec<f64> = tau.iter().zip(&next).map(|(a, b)| (a - b).abs()).collect();
        let max_change = changes.iter().copied().fold(0.0, f64::max);
        let min_change = changes.iter().copied().fold(f64::INFINITY, f64::min);
        trace.loglik.push(ll);
        trace.loglik_se.push(se);
        trace.max_change.push(max_change);
        trace.min_change.push(min_change);
        tau = next;
        log::debug!("stage II iteration {iter}: loglik {ll:.4} ± {se:.4}, max |Δτ| {max_change:.3e}");
        if min_change < cfg.tol {
            break;
        }
    }
    trace.stage2_seconds = start.elapsed().as_secs_f64();
    Ok((MixingProbabilities::new(tau)?, trace))
}

/// `B` independent draws: fresh `w`, `z` and `γ ~ τ` for each.
pub fn generate(
    net: &GeneratorNetwork,
    tau: &MixingProbabilities,
    draws: usize,
    cfg: &TrainConfig,
) -> Result<BootstrapEnsemble<f64>> {
    if tau.len() != net.outputs() {
        return Err(Error::invalid("τ length does not match the generator output"));
    }
    let pick = WeightedIndex::new(&tau.tau).map_err(|e| Error::invalid(e.to_string()))?;
    let n = net.architecture().n_weights;
    let q = net.architecture().noise_dim;
    let chunks = draws.div_ceil(GENERATE_CHUNK);
    let parts: Vec<Result<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let rows = GENERATE_CHUNK.min(draws - c * GENERATE_CHUNK);
            let mut r = rng::child(cfg.seed, "generate", c as u64);
            let mut ws = Array2::<f64>::zeros((rows, n));
            let mut zs = Array2::<f64>::zeros((rows, q));
            let mut gamma = Vec::with_capacity(rows);
            for b in 0..rows {
                fill_weights(cfg.scheme, &mut r, ws.row_mut(b).as_slice_mut().expect("contiguous"));
                for j in 0..q {
                    zs[[b, j]] = r.random::<f64>();
                }
                gamma.push(pick.sample(&mut r));
            }
            let theta = net.forward_many(ws.view(), zs.view())?;
            Ok(gamma.iter().enumerate().map(|(b, &g)| theta[[b, g]]).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(draws);
    for p in parts {
        out.extend(p?);
    }
    Ok(BootstrapEnsemble {
        draws: out,
        scheme: cfg.scheme,
        seed: cfg.seed,
    })
}

/// Stage I, Stage II and generation of `cfg.draws` samples.
pub fn fit_gb_npmle(y: &Observations, kernel: &KernelModel, cfg: &TrainConfig) -> Result<GbFit> {
    let (network, mut trace) = stage1_train(y, kernel, cfg)?;
    let (tau, t2) = stage2_mcem(y, kernel, &network, cfg)?;
    trace.loglik = t2.loglik;
    trace.loglik_se = t2.loglik_se;
    trace.max_change = t2.max_change;
    trace.min_change = t2.min_change;
    trace.stage2_seconds = t2.stage2_seconds;
    let start = Instant::now();
    let ensemble = generate(&network, &tau, cfg.draws, cfg)?;
    trace.generate_seconds = start.elapsed().as_secs_f64();
    Ok(GbFit {
        ensemble,
        network,
        tau,
        trace,
    })
}
