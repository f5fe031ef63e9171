//! Evaluation: Wasserstein-1 between CDFs, integrated squared error between densities, Gaussian
//! KDE for turning draws into densities, and K-fold log predictive score.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SimModel;
use crate::error::{Error, Result};
use crate::kernels::{KernelModel, Observations, Support};
use crate::npmle::DiscreteMixingDistribution;
use crate::rng;
use crate::smooth::SmoothedDensity;
use crate::util::{interp_or_zero, linspace, log_sum_exp, mean, quantile, trapezoid, variance};

/// Default number of points for CDF integration.
pub const W1_RESOLUTION: usize = 10_000;
/// Default number of folds and draws per fold for the log predictive score.
pub const LPS_FOLDS: usize = 10;
pub const LPS_DRAWS: usize = 500;

/// Anything with a cumulative distribution function.
pub trait Cdf {
    fn cdf(&self, x: f64) -> f64;
}

impl<F: Fn(f64) -> f64> Cdf for F {
    fn cdf(&self, x: f64) -> f64 {
        self(x)
    }
}

impl Cdf for DiscreteMixingDistribution {
    fn cdf(&self, x: f64) -> f64 {
        DiscreteMixingDistribution::cdf(self, x)
    }
}

/// Right-continuous empirical CDF of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty);
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("samples must be finite"));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        Ok(EmpiricalCdf { sorted })
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }
}

impl Cdf for EmpiricalCdf {
    fn cdf(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }
}

/// CDF tabulated on an increasing grid, linear in between, 0 and 1 outside.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedCdf {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl Cdf for TabulatedCdf {
    fn cdf(&self, x: f64) -> f64 {
        let n = self.grid.len();
        if x < self.grid[0] {
            return 0.0;
        }
        if x >= self.grid[n - 1] {
            return 1.0;
        }
        interp_or_zero(&self.grid, &self.values, x)
    }
}

/// `∫ |F − G|` over `[lo, hi]` by the trapezoid rule on `resolution` points.
pub fn wasserstein1<F: Cdf + ?Sized, G: Cdf + ?Sized>(f: &F, g: &G, range: (f64, f64), resolution: usize) -> f64 {
    let xs = linspace(range.0, range.1, resolution.max(2));
    let d: Vec<f64> = xs.iter().map(|&x| (f.cdf(x) - g.cdf(x)).abs()).collect();
    trapezoid(&xs, &d)
}

/// `[min − 4 sd, max + 4 sd]` over the pooled points, as an integration range.
pub fn integration_range(points: &[f64]) -> (f64, f64) {
    let lo = points.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = points.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sd = if points.len() > 1 { variance(points).sqrt() } else { 0.0 };
    let pad = 4.0 * sd.max(1e-3);
    (lo - pad, hi + pad)
}

/// Density values on an increasing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityOnGrid {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl DensityOnGrid {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid.len() != values.len() {
            return Err(Error::invalid("density needs at least two grid points and one value per point"));
        }
        if grid.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::invalid("density grid must be strictly increasing"));
        }
        if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("density values must be finite and nonnegative"));
        }
        Ok(DensityOnGrid {
            grid,
            values,
            normalized: false,
        })
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.values)
    }

    /// Rescale to unit trapezoid mass.
    pub fn normalize(mut self) -> Result<Self> {
        let mass = self.integral();
        if !(mass > 0.0) {
            return Err(Error::invalid("density has no mass on its grid"));
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        self.normalized = true;
        Ok(self)
    }

    /// Linear interpolation onto `grid`, zero outside the original range.
    pub fn resample(&self, grid: &[f64]) -> Result<Self> {
        let values = grid.iter().map(|&x| interp_or_zero(&self.grid, &self.values, x)).collect();
        let mut d = DensityOnGrid::new(grid.to_vec(), values)?;
        d.normalized = self.normalized;
        Ok(d)
    }

    /// Cumulative trapezoid integral, rescaled to end at 1.
    pub fn to_cdf(&self) -> TabulatedCdf {
        let mut values = Vec::with_capacity(self.grid.len());
        let mut acc = 0.0;
        values.push(0.0);
        for i in 1..self.grid.len() {
            acc += 0.5 * (self.grid[i] - self.grid[i - 1]) * (self.values[i] + self.values[i - 1]);
            values.push(acc);
        }
        if acc > 0.0 {
            values.iter_mut().for_each(|v| *v /= acc);
        }
        TabulatedCdf {
            grid: self.grid.clone(),
            values,
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "theta,density")?;
        for (t, d) in self.grid.iter().zip(&self.values) {
            writeln!(out, "{t},{d}")?;
        }
        Ok(())
    }
}

impl From<&SmoothedDensity> for DensityOnGrid {
    fn from(s: &SmoothedDensity) -> Self {
        DensityOnGrid {
            grid: s.grid.clone(),
            values: s.density.clone(),
            normalized: true,
        }
    }
}

/// `∫ (p − q)²` on `p`'s grid; `q` is interpolated onto it when the grids differ.
pub fn ise(p: &DensityOnGrid, q: &DensityOnGrid) -> Result<f64> {
    let q = if q.grid == p.grid { q.clone() } else { q.resample(&p.grid)? };
    let d: Vec<f64> = p.values.iter().zip(&q.values).map(|(a, b)| (a - b).powi(2)).collect();
    Ok(trapezoid(&p.grid, &d))
}

/// KDE bandwidth choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `0.9 · min(sd, IQR/1.34) · N^(−1/5)`, floored at the grid spacing.
    Silverman,
    Fixed(f64),
}

pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let sd = variance(&v).sqrt();
    let iqr = quantile(&v, 0.75) - quantile(&v, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (v.len() as f64).powf(-0.2)
}

/// Gaussian KDE on `grid`, reflected at the bounded edges of `support`, normalized.
pub fn kde_density(samples: &[f64], grid: &[f64], bandwidth: Bandwidth, support: Support) -> Result<DensityOnGrid> {
    if samples.len() < 2 {
        return Err(Error::invalid("KDE needs at least two samples"));
    }
    let weights = vec![1.0 / samples.len() as f64; samples.len()];
    kde_weighted(samples, &weights, grid, bandwidth, support)
}

/// Weighted Silverman rule with the Kish effective sample size.
fn weighted_silverman(points: &[(f64, f64)]) -> f64 {
    let total: f64 = points.iter().map(|p| p.1).sum();
    let m = points.iter().map(|p| p.0 * p.1).sum::<f64>() / total;
    let sd = (points.iter().map(|p| p.1 * (p.0 - m).powi(2)).sum::<f64>() / total).sqrt();
    let q = |prob: f64| {
        let mut acc = 0.0;
        for &(x, w) in points {
            acc += w / total;
            if acc >= prob {
                return x;
            }
        }
        points[points.len() - 1].0
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let n_eff = total * total / points.iter().map(|p| p.1 * p.1).sum::<f64>();
    0.9 * spread * n_eff.powf(-0.2)
}

/// KDE of a weighted point set (e.g. the atoms of a pooled bootstrap mixture).
pub fn kde_weighted(
    points: &[f64],
    weights: &[f64],
    grid: &[f64],
    bandwidth: Bandwidth,
    support: Support,
) -> Result<DensityOnGrid> {
    if points.is_empty() || points.len() != weights.len() {
        return Err(Error::invalid("KDE needs one weight per point"));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || !weights.iter().any(|&w| w > 0.0) {
        return Err(Error::invalid("KDE weights must be nonnegative and not all zero"));
    }
    if grid.len() < 2 {
        return Err(Error::invalid("KDE grid needs at least two points"));
    }
    let mut sorted: Vec<(f64, f64)> = points.iter().copied().zip(weights.iter().copied()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Silverman => {
            let step = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
            weighted_silverman(&sorted).max(step)
        }
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("bandwidth {h} must be positive")));
    }
    let total: f64 = weights.iter().sum();
    let norm = 1.0 / (total * h * (2.0 * std::f64::consts::PI).sqrt());
    let reach = 8.0 * h;
    let (lower, upper) = (support.lower(), support.upper());
    let values: Vec<f64> = grid
        .par_iter()
        .map(|&x| {
            let mut acc = 0.0;
            let mut add = |center: f64| {
                // only points within 8h of the evaluation point contribute
                let from = sorted.partition_point(|p| p.0 < center - reach);
                let to = sorted.partition_point(|p| p.0 <= center + reach);
                for &(v, w) in &sorted[from..to] {
                    let u = (center - v) / h;
                    acc += w * (-0.5 * u * u).exp();
                }
            };
            add(x);
            if let Some(a) = lower {
                add(2.0 * a - x);
            }
            if let Some(b) = upper {
                add(2.0 * b - x);
            }
            acc * norm
        })
        .collect();
    DensityOnGrid::new(grid.to_vec(), values)?.normalize()
}

/// Points of the grid on which estimated and true priors are compared.
pub const EVAL_GRID_POINTS: usize = 1024;

/// Comparison grid over the model's prior range.
pub fn prior_eval_grid(model: SimModel) -> Vec<f64> {
    let (lo, hi) = model.prior_range();
    linspace(lo, hi, EVAL_GRID_POINTS)
}

/// W1 and ISE of bootstrap draws against the model's prior; ISE uses a Silverman KDE.
pub fn score_draws(model: SimModel, draws: &[f64]) -> Result<(f64, f64)> {
    let ecdf = EmpiricalCdf::new(draws)?;
    let truth = |x: f64| model.prior_cdf(x);
    let w1 = wasserstein1(&ecdf, &truth, w1_range(model, draws), W1_RESOLUTION);
    let grid = prior_eval_grid(model);
    let kde = kde_density(draws, &grid, Bandwidth::Silverman, model.kernel().support())?;
    Ok((w1, ise(&kde, &model.prior_density(&grid)?)?))
}

/// W1 and ISE of a discrete mixing distribution (e.g. pooled bootstrap replicates) against the
/// model's prior; ISE uses a weighted Silverman KDE of the atoms.
pub fn score_mixture(model: SimModel, dist: &DiscreteMixingDistribution) -> Result<(f64, f64)> {
    let truth = |x: f64| model.prior_cdf(x);
    let w1 = wasserstein1(dist, &truth, w1_range(model, &dist.atoms), W1_RESOLUTION);
    let grid = prior_eval_grid(model);
    let kde = kde_weighted(&dist.atoms, &dist.weights, &grid, Bandwidth::Silverman, model.kernel().support())?;
    Ok((w1, ise(&kde, &model.prior_density(&grid)?)?))
}

/// W1 and ISE of a density estimate against the model's prior.
pub fn score_density(model: SimModel, density: &DensityOnGrid) -> Result<(f64, f64)> {
    let cdf = density.to_cdf();
    let truth = |x: f64| model.prior_cdf(x);
    let w1 = wasserstein1(&cdf, &truth, w1_range(model, &density.grid), W1_RESOLUTION);
    let grid = prior_eval_grid(model);
    Ok((w1, ise(&model.prior_density(&grid)?, density)?))
}

fn w1_range(model: SimModel, points: &[f64]) -> (f64, f64) {
    let (a, b) = model.prior_range();
    let lo = points.iter().copied().fold(a, f64::min);
    let hi = points.iter().copied().fold(b, f64::max);
    (lo, hi)
}

/// Folds by a seeded random permutation; sizes differ by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds == 0 || n < folds {
        return Err(Error::invalid(format!("need at least {folds} observations for {folds} folds, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::substream(seed, rng::FOLDS));
    let mut out = vec![Vec::new(); folds];
    for (pos, &i) in perm.iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Log predictive score and its per-fold terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpsResult {
    pub lps: f64,
    /// `Σ_{i ∈ I_k} −log p̂(y_i)` per fold.
    pub per_fold: Vec<f64>,
}

/// `K⁻¹ Σ_k Σ_{i∈I_k} −log[B⁻¹ Σ_b f(y_i | θ̂ᵇ₍₋ₖ₎)]`, where `fitter(train, k)` returns the draws
/// `θ̂₍₋ₖ₎` fitted without fold `k`.
pub fn lps_with_folds<F>(y: &Observations, kernel: &KernelModel, folds: &[Vec<usize>], fitter: F) -> Result<LpsResult>
where
    F: Fn(&Observations, usize) -> Result<Vec<f64>> + Sync,
{
    let n = y.len();
    let per_fold: Vec<Result<f64>> = folds
        .par_iter()
        .enumerate()
        .map(|(k, held)| {
            let mut in_fold = vec![false; n];
            held.iter().for_each(|&i| in_fold[i] = true);
            let train_idx: Vec<usize> = (0..n).filter(|&i| !in_fold[i]).collect();
            let train = y.select(&train_idx);
            let wrap = |e: Error| Error::Fold {
                fold: k,
                source: Box::new(e),
            };
            let draws = fitter(&train, k).map_err(wrap)?;
            if draws.is_empty() {
                return Err(wrap(Error::Empty));
            }
            let log_b = (draws.len() as f64).ln();
            let mut buf = vec![0.0; draws.len()];
            let mut total = 0.0;
            for &i in held {
                let yi = y.values()[i];
                for (b, &t) in buf.iter_mut().zip(&draws) {
                    *b = kernel.log_density_unchecked(yi, t);
                }
                total -= log_sum_exp(&buf) - log_b;
            }
            Ok(total)
        })
        .collect();
    let per_fold = per_fold.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(LpsResult {
        lps: per_fold.iter().sum::<f64>() / folds.len() as f64,
        per_fold,
    })
}

/// [`lps_with_folds`] with [`fold_assignment`] from `seed`.
pub fn lps_kfold<F>(y: &Observations, kernel: &KernelModel, folds: usize, seed: u64, fitter: F) -> Result<LpsResult>
where
    F: Fn(&Observations, usize) -> Result<Vec<f64>> + Sync,
{
    let assignment = fold_assignment(y.len(), folds, seed)?;
    lps_with_folds(y, kernel, &assignment, fitter)
}

/// One evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub model: String,
    pub n: usize,
    pub seed: u64,
    #[serde(rename = "W1")]
    pub w1: Option<f64>,
    #[serde(rename = "ISE")]
    pub ise: Option<f64>,
    #[serde(rename = "LPS")]
    pub lps: Option<f64>,
    pub time_sec: f64,
}

/// Mean and standard deviation over replicates of one `(method, model, n)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub model: String,
    pub n: usize,
    pub replicates: usize,
    pub w1_mean: Option<f64>,
    pub w1_sd: Option<f64>,
    pub ise_mean: Option<f64>,
    pub ise_sd: Option<f64>,
    pub lps_mean: Option<f64>,
    pub lps_sd: Option<f64>,
    pub time_mean: f64,
}

fn summarize(v: Vec<f64>) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let sd = if v.len() > 1 { Some(variance(&v).sqrt()) } else { None };
    (Some(mean(&v)), sd)
}

/// Group records by `(model, method, n)` in sorted order.
pub fn aggregate(records: &[MetricRecord]) -> Vec<TableRow> {
    let mut cells: BTreeMap<(String, String, usize), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.model.clone(), r.method.clone(), r.n)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((model, method, n), rs)| {
            let (w1_mean, w1_sd) = summarize(rs.iter().filter_map(|r| r.w1).collect());
            let (ise_mean, ise_sd) = summarize(rs.iter().filter_map(|r| r.ise).collect());
            let (lps_mean, lps_sd) = summarize(rs.iter().filter_map(|r| r.lps).collect());
            TableRow {
                method,
                model,
                n,
                replicates: rs.len(),
                w1_mean,
                w1_sd,
                ise_mean,
                ise_sd,
                lps_mean,
                lps_sd,
                time_mean: rs.iter().map(|r| r.time_sec).sum::<f64>() / rs.len() as f64,
            }
        })
        .collect()
}

pub fn write_table_csv<W: Write>(rows: &[TableRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
