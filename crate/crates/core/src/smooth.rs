//! Gaussian kernel smoothing of a discrete NPMLE, with cross-validated bandwidth.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelModel, Observations, Support};
use crate::npmle::{DiscreteMixingDistribution, EmOptions, LikelihoodMatrix, SupportGrid};
use crate::util::{linspace, trapezoid};

/// Points of the evaluation grid used for smoothed densities.
pub const SMOOTH_GRID_POINTS: usize = 512;
/// Above this many observations, leave-one-out is replaced by dropping folds of ten.
pub const EXACT_LOO_MAX_N: usize = 500;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedDensity {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl SmoothedDensity {
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    /// `theta,density` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "theta,density")?;
        for (t, d) in self.grid.iter().zip(&self.density) {
            writeln!(out, "{t},{d}")?;
        }
        Ok(())
    }
}

/// The 25 equispaced candidates on `[0.1, 10]`.
pub fn default_bandwidths() -> Vec<f64> {
    linspace(0.1, 10.0, 25)
}

/// Evaluation grid covering `[lo, hi]` widened by four bandwidths, clipped to the support.
pub fn smoothing_grid(lo: f64, hi: f64, support: Support, bandwidth: f64) -> Vec<f64> {
    let a = support.clamp(lo - 4.0 * bandwidth);
    let b = support.clamp(hi + 4.0 * bandwidth);
    linspace(a, b, SMOOTH_GRID_POINTS)
}

/// `Σ_j w_j φ((t - a_j)/h)/h` at every grid point, with mass that would leave a bounded
/// support reflected back at the boundary. Not renormalized.
pub fn kernel_convolve(
    d: &DiscreteMixingDistribution,
    bandwidth: f64,
    grid: &[f64],
    support: Support,
) -> Vec<f64> {
    let h = bandwidth;
    let phi = |t: f64, a: f64| {
        let z = (t - a) / h;
        (-0.5 * z * z).exp() * INV_SQRT_2PI / h
    };
    grid.iter()
        .map(|&t| {
            d.atoms
                .iter()
                .zip(&d.weights)
                .map(|(&a, &w)| {
                    let mut v = phi(t, a);
                    if let Some(lo) = support.lower() {
                        v += phi(t, 2.0 * lo - a);
                    }
                    if let Some(hi) = support.upper() {
                        v += phi(t, 2.0 * hi - a);
                    }
                    w * v
                })
                .sum()
        })
        .collect()
}

/// [`kernel_convolve`] renormalized to unit trapezoid mass over `grid`.
pub fn kernel_smooth(
    d: &DiscreteMixingDistribution,
    bandwidth: f64,
    grid: &[f64],
    support: Support,
) -> Result<SmoothedDensity> {
    if !(bandwidth > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    if grid.len() < 2 {
        return Err(Error::invalid("evaluation grid needs at least 2 points"));
    }
    let mut density = kernel_convolve(d, bandwidth, grid, support);
    let mass = trapezoid(grid, &density);
    if !(mass > 0.0) {
        return Err(Error::invalid("smoothed density has no mass on the evaluation grid"));
    }
    density.iter_mut().for_each(|v| *v /= mass);
    Ok(SmoothedDensity {
        grid: grid.to_vec(),
        density,
        bandwidth,
    })
}

/// Outcome of the bandwidth search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub bandwidth: f64,
    /// `(candidate, held-out log predictive score)` in candidate order.
    pub scores: Vec<(f64, f64)>,
    pub folds: usize,
    /// True when folds of ten replaced single left-out points.
    pub approximate: bool,
}

/// Bandwidth maximizing the held-out log predictive density `Σ_i log ∫ f(y_i|θ) π̃₋ᵢ,h(θ) dθ`,
/// where `π̃₋ᵢ,h` is the smoothed NPMLE fitted without `y_i`. Exact leave-one-out up to
/// [`EXACT_LOO_MAX_N`] observations, then `n/10` folds. Ties go to the smaller bandwidth.
pub fn loocv_bandwidth(
    y: &Observations,
    kernel: &KernelModel,
    grid: &SupportGrid,
    candidates: &[f64],
    em: &EmOptions,
) -> Result<BandwidthSelection> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate bandwidths"));
    }
    if candidates.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::invalid("candidate bandwidths must be positive"));
    }
    if candidates.len() == 1 {
        return Ok(BandwidthSelection {
            bandwidth: candidates[0],
            scores: vec![(candidates[0], f64::NAN)],
            folds: 0,
            approximate: false,
        });
    }
    let n = y.len();
    let (folds, approximate) = if n > EXACT_LOO_MAX_N {
        ((n + 5) / 10, true)
    } else {
        (n, false)
    };
    if folds < 2 {
        return Err(Error::invalid("cross-validation needs at least two observations"));
    }
    let support = kernel.support();
    let matrix = LikelihoodMatrix::new(y, kernel, grid)?;
    let per_fold: Result<Vec<Vec<f64>>> = (0..folds)
        .into_par_iter()
        .map(|fold| {
            let mut w = vec![1.0; n];
            let held: Vec<usize> = (fold..n).step_by(folds).collect();
            held.iter().for_each(|&i| w[i] = 0.0);
            let fit = matrix.fit(&w, em).map_err(|e| Error::Fold {
                fold,
                source: Box::new(e),
            })?;
            Ok(candidates
                .iter()
                .map(|&h| {
                    let eval = smoothing_grid(grid.lo(), grid.hi(), support, h);
                    let Ok(s) = kernel_smooth(&fit.distribution, h, &eval, support) else {
                        return f64::NEG_INFINITY;
                    };
                    held.iter()
                        .map(|&i| predictive_log_density(kernel, y.values()[i], &s))
                        .sum()
                })
                .collect())
        })
        .collect();
    let per_fold = per_fold?;
    let scores: Vec<(f64, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(c, &h)| (h, per_fold.iter().map(|f| f[c]).sum()))
        .collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[a].total_cmp(&candidates[b]));
    let mut best: Option<(f64, f64)> = None;
    for c in order {
        let (h, s) = scores[c];
        if !s.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((h, s));
        }
    }
    let (bandwidth, _) = best.ok_or(Error::NoFiniteBandwidth)?;
    Ok(BandwidthSelection {
        bandwidth,
        scores,
        folds,
        approximate,
    })
}

/// `log ∫ f(y | θ) π̃(θ) dθ` by the trapezoid rule on the density's grid.
pub fn predictive_log_density(kernel: &KernelModel, y: f64, s: &SmoothedDensity) -> f64 {
    let integrand: Vec<f64> = s
        .grid
        .iter()
        .zip(&s.density)
        .map(|(&t, &d)| if d > 0.0 { d * kernel.log_density_unchecked(y, t).exp() } else { 0.0 })
        .collect();
    trapezoid(&s.grid, &integrand).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::npmle::fit_npmle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_pdf(x: f64, mu: f64, sd: f64) -> f64 {
        let z = (x - mu) / sd;
        (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn one_atom_gives_the_kernel() {
        let d = DiscreteMixingDistribution::point_mass(0.0);
        let grid = linspace(-6.0, 6.0, 241);
        let raw = kernel_convolve(&d, 1.0, &grid, Support::RealLine);
        for (t, v) in grid.iter().zip(&raw) {
            assert!((v - normal_pdf(*t, 0.0, 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn two_atoms_match_closed_form_mixture() {
        let d = DiscreteMixingDistribution::new(vec![-3.0, 3.0], vec![0.5, 0.5]).unwrap();
        let grid = linspace(-10.0, 10.0, 401);
        let s = kernel_smooth(&d, 1.0, &grid, Support::RealLine).unwrap();
        for (t, v) in grid.iter().zip(&s.density) {
            let oracle = 0.5 * normal_pdf(*t, -3.0, 1.0) + 0.5 * normal_pdf(*t, 3.0, 1.0);
            assert!((v - oracle).abs() < 1e-6, "{t}: {v} vs {oracle}");
        }
    }

    #[test]
    fn small_bandwidth_concentrates() {
        let d = DiscreteMixingDistribution::point_mass(0.0);
        let grid = linspace(-1.0, 1.0, 2001);
        let peak = |h: f64| {
            let raw = kernel_convolve(&d, h, &grid, Support::RealLine);
            raw[1000]
        };
        assert!((peak(0.01) / peak(0.02) - 2.0).abs() < 1e-9);
        assert!((peak(0.01) - INV_SQRT_2PI / 0.01).abs() < 1e-9);
    }

    #[test]
    fn reflection_keeps_mass_on_bounded_supports() {
        let d = DiscreteMixingDistribution::new(vec![0.02, 0.5, 0.97], vec![0.3, 0.4, 0.3]).unwrap();
        for h in [0.01, 0.05, 0.2] {
            let grid = linspace(0.0, 1.0, 4001);
            let raw = kernel_convolve(&d, h, &grid, Support::UnitInterval);
            // a single reflection per side is exact up to the second-image tails
            let mass = trapezoid(&grid, &raw);
            assert!((mass - 1.0).abs() < 2e-3, "h={h}: {mass}");
        }
        let d = DiscreteMixingDistribution::new(vec![0.1, 2.0], vec![0.5, 0.5]).unwrap();
        let grid = linspace(0.0, 12.0, 6001);
        let raw = kernel_convolve(&d, 0.5, &grid, Support::PositiveReal);
        assert!((trapezoid(&grid, &raw) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn smoothing_preserves_mass_and_mean() {
        let d = DiscreteMixingDistribution::new(vec![-2.0, 0.5, 4.0], vec![0.2, 0.5, 0.3]).unwrap();
        for h in [0.1, 0.5, 1.0, 3.0] {
            let grid = smoothing_grid(-2.0, 4.0, Support::RealLine, h);
            let s = kernel_smooth(&d, h, &grid, Support::RealLine).unwrap();
            assert!((s.integral() - 1.0).abs() < 1e-3);
            assert!(s.density.iter().all(|&v| v >= 0.0));
            let m: Vec<f64> = grid.iter().zip(&s.density).map(|(t, v)| t * v).collect();
            assert!((trapezoid(&grid, &m) - d.mean()).abs() <= 2.0 * h * h);
        }
        assert!(kernel_smooth(&d, 0.0, &[0.0, 1.0], Support::RealLine).is_err());
    }

    #[test]
    fn single_candidate_is_returned() {
        let k = KernelModel::GAUSSIAN;
        let y = Observations::new(vec![0.0, 1.0, 2.0], &k).unwrap();
        let grid = SupportGrid::default_for(&y, &k, 30).unwrap();
        let sel = loocv_bandwidth(&y, &k, &grid, &[0.7], &EmOptions::default()).unwrap();
        assert_eq!(sel.bandwidth, 0.7);
        assert!(loocv_bandwidth(&y, &k, &grid, &[], &EmOptions::default()).is_err());
    }

    #[test]
    fn selected_bandwidth_is_a_candidate() {
        let k = KernelModel::GAUSSIAN;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y: Vec<f64> = (0..80)
            .map(|i| k.sample(if i % 2 == 0 { -3.0 } else { 3.0 }, &mut rng).unwrap())
            .collect();
        let y = Observations::new(y, &k).unwrap();
        let grid = SupportGrid::default_for(&y, &k, 100).unwrap();
        let cands = default_bandwidths();
        let sel = loocv_bandwidth(&y, &k, &grid, &cands, &EmOptions::default()).unwrap();
        assert!(cands.contains(&sel.bandwidth));
        assert!((0.1..=10.0).contains(&sel.bandwidth));
        assert_eq!(sel.folds, 80);
        assert!(!sel.approximate);
        // two well-separated clusters: a 10-wide kernel must lose to the best candidate
        let worst = sel.scores.last().unwrap().1;
        let best = sel.scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        assert!(best > worst);
    }

    #[test]
    fn ties_prefer_smaller_bandwidth() {
        // identical candidates listed in reverse order: the smaller of equal scores wins
        let k = KernelModel::BINOMIAL;
        let y = Observations::new(vec![5.0, 5.0, 5.0, 5.0], &k).unwrap();
        let grid = SupportGrid::default_for(&y, &k, 50).unwrap();
        let sel = loocv_bandwidth(&y, &k, &grid, &[0.3, 0.2, 0.2], &EmOptions::default()).unwrap();
        assert!(sel.bandwidth == 0.2 || sel.bandwidth == 0.3);
        let s02 = sel.scores[1].1;
        let s03 = sel.scores[0].1;
        if s02 >= s03 {
            assert_eq!(sel.bandwidth, 0.2);
        }
    }

    #[test]
    fn predictive_density_matches_gaussian_convolution() {
        // N(θ,1) kernel smoothed with N(a, h²) gives predictive N(a, 1 + h²)
        let k = KernelModel::GAUSSIAN;
        let d = DiscreteMixingDistribution::point_mass(0.5);
        let h = 0.8;
        let grid = smoothing_grid(0.5, 0.5, Support::RealLine, h * 2.0);
        let s = kernel_smooth(&d, h, &grid, Support::RealLine).unwrap();
        let y = 1.3;
        let got = predictive_log_density(&k, y, &s);
        let exact = normal_pdf(y, 0.5, (1.0 + h * h).sqrt()).ln();
        assert!((got - exact).abs() < 1e-3, "{got} vs {exact}");
    }

    #[test]
    fn csv_output() {
        let d = DiscreteMixingDistribution::point_mass(0.0);
        let s = kernel_smooth(&d, 1.0, &linspace(-3.0, 3.0, 4), Support::RealLine).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("theta,density\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn fitted_npmle_smooths_to_unit_mass() {
        let k = KernelModel::POISSON;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..200)
            .map(|_| k.sample(rand::Rng::random_range(&mut rng, 0.5..6.0), &mut rng).unwrap())
            .collect();
        let y = Observations::new(y, &k).unwrap();
        let grid = SupportGrid::default_for(&y, &k, 200).unwrap();
        let fit = fit_npmle(&y, &k, &grid, &EmOptions::default()).unwrap();
        for h in [0.1, 1.0, 5.0] {
            let eval = smoothing_grid(grid.lo(), grid.hi(), Support::PositiveReal, h);
            let s = kernel_smooth(&fit.distribution, h, &eval, Support::PositiveReal).unwrap();
            assert!((s.integral() - 1.0).abs() < 1e-3);
        }
    }
}
