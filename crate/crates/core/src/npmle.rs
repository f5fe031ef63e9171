//! Discrete NPMLE of the mixing distribution by EM over a fixed support grid.
//!
//! The (weighted) objective is `Σ_i w_i log Σ_j π_j f(y_i | g_j)` over the probability simplex
//! on grid points `g_j`. The EM map `π_j ← π_j · D_j(π)`, with
//! `D_j(π) = Σ_i w_i f(y_i|g_j) / f̂_π(y_i) / Σ_i w_i`, increases the objective monotonically.
//! `max_j D_j` is also the first-order optimality certificate: it equals 1 exactly at the
//! maximizer and bounds the log-likelihood gap by `(max_j D_j - 1) Σ_i w_i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Family, Grouping, KernelModel, Observations};
use crate::util::{linspace, log_sum_exp};

pub const DEFAULT_GRID_COUNT: usize = 400;
/// Atoms lighter than this are dropped after convergence.
pub const PRUNE_THRESHOLD: f64 = 1e-8;
/// A fit is accepted when its optimality measure is at most `1 + CERTIFICATE_SLACK`.
pub const CERTIFICATE_SLACK: f64 = 1e-3;

const BOUNDARY_EPS: f64 = 1e-3;

/// Candidate atom locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportGrid {
    points: Vec<f64>,
}

impl SupportGrid {
    pub fn new(points: Vec<f64>, kernel: &KernelModel) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("support grid needs at least 2 points"));
        }
        if points.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::invalid("support grid must be strictly increasing"));
        }
        let support = kernel.support();
        if let Some(&bad) = points.iter().find(|&&t| !support.contains(t)) {
            return Err(Error::OutsideSupport { theta: bad, support });
        }
        Ok(SupportGrid { points })
    }

    /// `count` equispaced points over a range derived from the data.
    ///
    /// Real line: `[min y - 1, max y + 1]`. Positive reals: the range of `θ` values whose
    /// likelihood is non-negligible for the observed extremes (moment inversion of the family,
    /// widened by four posterior standard deviations), floored at `10⁻³`. Unit interval:
    /// `[10⁻³, 1 - 10⁻³]`.
    pub fn default_for(y: &Observations, kernel: &KernelModel, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::invalid("grid count must be at least 2"));
        }
        let (lo, hi) = default_range(y, kernel);
        SupportGrid::new(linspace(lo, hi, count), kernel)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.points[0]
    }

    pub fn hi(&self) -> f64 {
        self.points[self.points.len() - 1]
    }
}

/// Data-driven `θ` range used both by the default grid and by generator initialization.
pub fn default_range(y: &Observations, kernel: &KernelModel) -> (f64, f64) {
    let (ymin, ymax) = (y.min(), y.max());
    match kernel.family {
        Family::Gaussian => (ymin - 1.0, ymax + 1.0),
        Family::Poisson => {
            // posterior of θ under a flat prior is Gamma(y + 1, 1)
            let lo = (ymin - 3.0 * ymin.sqrt()).max(BOUNDARY_EPS);
            let hi = ymax + 4.0 * (ymax + 1.0).sqrt() + 2.0;
            (lo, hi)
        }
        Family::Gamma => {
            // posterior of the rate under a flat prior is Gamma(shape + 1, y)
            let a = crate::kernels::GAMMA_SHAPE + 1.0;
            let lo = ((a - 4.0 * a.sqrt()).max(1.0) / ymax).max(BOUNDARY_EPS);
            let hi = (a + 5.0 * a.sqrt()) / ymin;
            (lo, hi.max(lo * 2.0))
        }
        Family::Binomial => (BOUNDARY_EPS, 1.0 - BOUNDARY_EPS),
    }
}

/// Atoms with probability weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMixingDistribution {
    pub atoms: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DiscreteMixingDistribution {
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::invalid("atoms and weights must be nonempty and of equal length"));
        }
        if atoms.windows(2).any(|a| !(a[1] > a[0])) {
            return Err(Error::invalid("atoms must be strictly increasing"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(DiscreteMixingDistribution { atoms, weights })
    }

    pub fn point_mass(theta: f64) -> Self {
        DiscreteMixingDistribution {
            atoms: vec![theta],
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| a * w).sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let k = self.atoms.partition_point(|&a| a <= x);
        self.weights[..k].iter().sum::<f64>().min(1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return *a;
            }
        }
        *self.atoms.last().expect("nonempty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    /// Stop when the largest absolute weight change falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Also stop once the optimality measure of the current iterate is at most `1 + slack`,
    /// i.e. as soon as the fit would be accepted.
    pub certificate: Option<f64>,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            tol: 1e-8,
            max_iter: 5000,
            certificate: Some(CERTIFICATE_SLACK),
        }
    }
}

impl EmOptions {
    /// Run to the weight-change tolerance without stopping at the acceptance certificate.
    pub fn exhaustive(tol: f64, max_iter: usize) -> Self {
        EmOptions {
            tol,
            max_iter,
            certificate: None,
        }
    }
}

/// A converged (or iteration-capped) NPMLE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpmleFit {
    #[serde(flatten)]
    pub distribution: DiscreteMixingDistribution,
    /// Weighted marginal log-likelihood of `distribution`.
    pub loglik: f64,
    /// Optimality measure of `distribution` over the support grid.
    pub optimality: f64,
    #[serde(skip)]
    pub iterations: usize,
    #[serde(skip)]
    pub converged: bool,
}

/// Likelihoods `f(y_u | g_j)` for distinct observation values `y_u`, each row scaled by its
/// maximum so that EM works in linear space without underflow. Built once, shared read-only.
#[derive(Debug, Clone)]
pub struct LikelihoodMatrix {
    grid: SupportGrid,
    grouping: Grouping,
    /// Row-major `values.len() × grid.len()`, each row's max is 1.
    scaled: Vec<f64>,
    /// `log max_j f(y_u | g_j)` per row.
    log_scale: Vec<f64>,
}

impl LikelihoodMatrix {
    pub fn new(y: &Observations, kernel: &KernelModel, grid: &SupportGrid) -> Result<Self> {
        let grouping = y.grouping();
        let m = grid.len();
        let mut scaled = Vec::with_capacity(grouping.values.len() * m);
        let mut log_scale = Vec::with_capacity(grouping.values.len());
        let mut row = vec![0.0; m];
        for (u, &yu) in grouping.values.iter().enumerate() {
            for (r, &g) in row.iter_mut().zip(grid.points()) {
                *r = kernel.log_density_unchecked(yu, g);
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                let index = grouping.index.iter().position(|&g| g == u).unwrap_or(0);
                return Err(Error::GridCoverage { index, y: yu });
            }
            scaled.extend(row.iter().map(|&l| (l - max).exp()));
            log_scale.push(max);
        }
        Ok(LikelihoodMatrix {
            grid: grid.clone(),
            grouping,
            scaled,
            log_scale,
        })
    }

    pub fn grid(&self) -> &SupportGrid {
        &self.grid
    }

    pub fn n_observations(&self) -> usize {
        self.grouping.index.len()
    }

    fn row(&self, u: usize) -> &[f64] {
        let m = self.grid.len();
        &self.scaled[u * m..(u + 1) * m]
    }

    /// Weighted EM from the uniform distribution on the grid.
    pub fn fit(&self, w: &[f64], opts: &EmOptions) -> Result<NpmleFit> {
        if w.len() != self.n_observations() {
            return Err(Error::invalid(format!(
                "weight vector has length {}, expected {}",
                w.len(),
                self.n_observations()
            )));
        }
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        if !(opts.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        let agg = self.grouping.aggregate(w);
        let total: f64 = agg.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("weights sum to zero"));
        }
        let active: Vec<(usize, f64)> = agg
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0.0)
            .map(|(u, &c)| (u, c / total))
            .collect();

        let m = self.grid.len();
        let mut pi = vec![1.0 / m as f64; m];
        let mut next = vec![0.0; m];
        let mut ratio = vec![0.0; m];
        let mut iterations = 0;
        let mut converged = false;
        let mut prev_ll = f64::NEG_INFINITY;

        while iterations < opts.max_iter {
            let ll = self.gradient_ratio(&active, &pi, &mut ratio);
            debug_assert!(
                ll >= prev_ll - 1e-9 * (1.0 + ll.abs()),
                "EM decreased the log-likelihood: {prev_ll} -> {ll}"
            );
            prev_ll = ll;
            if let Some(slack) = opts.certificate {
                if ratio.iter().copied().fold(0.0, f64::max) <= 1.0 + slack {
                    converged = true;
                    break;
                }
            }
            let mut sum = 0.0;
            for ((nx, &p), &d) in next.iter_mut().zip(&pi).zip(&ratio) {
                *nx = p * d;
                sum += *nx;
            }
            let mut delta: f64 = 0.0;
            for (p, nx) in pi.iter_mut().zip(&next) {
                let v = nx / sum;
                delta = delta.max((v - *p).abs());
                *p = v;
            }
            iterations += 1;
            if delta < opts.tol {
                converged = true;
                break;
            }
        }

        let distribution = prune(self.grid.points(), &pi);
        let loglik = self.weighted_loglik(w, &distribution);
        let optimality = self.optimality(w, &distribution);
        Ok(NpmleFit {
            distribution,
            loglik,
            optimality,
            iterations,
            converged,
        })
    }

    /// Fills `ratio` with `D_j(π)` and returns the scaled normalized log-likelihood
    /// `Σ_u c_u log Σ_j π_j L̃_uj`.
    fn gradient_ratio(&self, active: &[(usize, f64)], pi: &[f64], ratio: &mut [f64]) -> f64 {
        ratio.iter_mut().for_each(|r| *r = 0.0);
        let mut ll = 0.0;
        for &(u, c) in active {
            let row = self.row(u);
            let marg = dot(row, pi);
            let coef = c / marg;
            for (r, l) in ratio.iter_mut().zip(row) {
                *r += coef * l;
            }
            ll += c * marg.ln();
        }
        ll
    }

    fn weighted_loglik(&self, w: &[f64], d: &DiscreteMixingDistribution) -> f64 {
        // atoms are grid points, so reuse the scaled rows
        let cols = atom_columns(self.grid.points(), &d.atoms);
        let agg = self.grouping.aggregate(w);
        let mut ll = 0.0;
        for (u, &c) in agg.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = self.row(u);
            let marg: f64 = cols.iter().zip(&d.weights).map(|(&j, p)| row[j] * p).sum();
            ll += c * (marg.ln() + self.log_scale[u]);
        }
        ll
    }

    fn optimality(&self, w: &[f64], d: &DiscreteMixingDistribution) -> f64 {
        let cols = atom_columns(self.grid.points(), &d.atoms);
        let agg = self.grouping.aggregate(w);
        let total: f64 = agg.iter().sum();
        let m = self.grid.len();
        let mut ratio = vec![0.0; m];
        for (u, &c) in agg.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = self.row(u);
            let marg: f64 = cols.iter().zip(&d.weights).map(|(&j, p)| row[j] * p).sum();
            let coef = c / total / marg;
            for (r, l) in ratio.iter_mut().zip(row) {
                *r += coef * l;
            }
        }
        ratio.into_iter().fold(0.0, f64::max)
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn atom_columns(grid: &[f64], atoms: &[f64]) -> Vec<usize> {
    atoms
        .iter()
        .map(|a| grid.partition_point(|&g| g < *a).min(grid.len() - 1))
        .collect()
}

fn prune(grid: &[f64], pi: &[f64]) -> DiscreteMixingDistribution {
    let keep: Vec<usize> = (0..pi.len()).filter(|&j| pi[j] >= PRUNE_THRESHOLD).collect();
    let keep = if keep.is_empty() {
        // every weight below threshold cannot happen on a simplex of ≤ 10⁸ points
        vec![argmax(pi)]
    } else {
        keep
    };
    let total: f64 = keep.iter().map(|&j| pi[j]).sum();
    DiscreteMixingDistribution {
        atoms: keep.iter().map(|&j| grid[j]).collect(),
        weights: keep.iter().map(|&j| pi[j] / total).collect(),
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn log_marginals(values: &[f64], kernel: &KernelModel, d: &DiscreteMixingDistribution) -> Vec<f64> {
    let log_w: Vec<f64> = d.weights.iter().map(|w| w.ln()).collect();
    let mut buf = vec![0.0; d.len()];
    values
        .iter()
        .map(|&y| {
            for ((b, &a), &lw) in buf.iter_mut().zip(&d.atoms).zip(&log_w) {
                *b = lw + kernel.log_density_unchecked(y, a);
            }
            log_sum_exp(&buf)
        })
        .collect()
}

/// Weighted NPMLE over `grid`; `w` must have one entry per observation.
pub fn fit_weighted_npmle(
    y: &Observations,
    w: &[f64],
    kernel: &KernelModel,
    grid: &SupportGrid,
    opts: &EmOptions,
) -> Result<NpmleFit> {
    LikelihoodMatrix::new(y, kernel, grid)?.fit(w, opts)
}

/// Unweighted NPMLE: [`fit_weighted_npmle`] with all-ones weights.
pub fn fit_npmle(
    y: &Observations,
    kernel: &KernelModel,
    grid: &SupportGrid,
    opts: &EmOptions,
) -> Result<NpmleFit> {
    fit_weighted_npmle(y, &vec![1.0; y.len()], kernel, grid, opts)
}

/// `Σ_i w_i log Σ_j d_j f(y_i | a_j)`, in log space. `-inf` if any observation has zero
/// marginal likelihood under `d`.
pub fn marginal_log_likelihood(
    y: &Observations,
    w: &[f64],
    kernel: &KernelModel,
    d: &DiscreteMixingDistribution,
) -> f64 {
    let lm = log_marginals(y.values(), kernel, d);
    let mut total = 0.0;
    for (&l, &wi) in lm.iter().zip(w) {
        if l == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        total += wi * l;
    }
    total
}

/// `sup_θ∈grid (Σ_i w_i f(y_i|θ) / f̂_d(y_i)) / Σ_i w_i`. Equals 1 at the grid NPMLE.
pub fn optimality_measure(
    y: &Observations,
    w: &[f64],
    kernel: &KernelModel,
    d: &DiscreteMixingDistribution,
    grid: &SupportGrid,
) -> f64 {
    let lm = log_marginals(y.values(), kernel, d);
    let total: f64 = w.iter().sum();
    grid.points()
        .iter()
        .map(|&t| {
            y.values()
                .iter()
                .zip(&lm)
                .zip(w)
                .map(|((&yi, &l), &wi)| {
                    if wi == 0.0 {
                        0.0
                    } else {
                        wi * (kernel.log_density_unchecked(yi, t) - l).exp()
                    }
                })
                .sum::<f64>()
                / total
        })
        .fold(0.0, f64::max)
}
