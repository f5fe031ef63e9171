//! Bootstrap weights and the brute-force bootstrapped NPMLE.

use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelModel, Observations};
use crate::npmle::{DiscreteMixingDistribution, EmOptions, LikelihoodMatrix, NpmleFit, SupportGrid};
use crate::rng::{self, StreamRng};

/// Distribution of the bootstrap weight vector `w`, which always sums to `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// `n · Dirichlet(1, …, 1)`: the weighted likelihood bootstrap.
    #[default]
    #[serde(rename = "dirichlet")]
    DirichletTimesN,
    /// `Multinomial(n, 1/n)` counts: the nonparametric bootstrap.
    Multinomial,
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dirichlet" => Ok(WeightScheme::DirichletTimesN),
            "multinomial" => Ok(WeightScheme::Multinomial),
            other => Err(Error::invalid(format!("unknown weight scheme {other:?}"))),
        }
    }
}

/// One bootstrap weight vector of length `n`.
pub fn sample_weights<R: Rng + ?Sized>(scheme: WeightScheme, n: usize, rng: &mut R) -> Vec<f64> {
    let mut w = vec![0.0; n];
    fill_weights(scheme, rng, &mut w);
    w
}

/// [`sample_weights`] into an existing buffer.
pub fn fill_weights<R: Rng + ?Sized>(scheme: WeightScheme, rng: &mut R, w: &mut [f64]) {
    let n = w.len();
    match scheme {
        WeightScheme::DirichletTimesN => {
            let mut total = 0.0;
            for wi in w.iter_mut() {
                let g: f64 = Exp1.sample(rng);
                *wi = g;
                total += g;
            }
            let scale = n as f64 / total;
            w.iter_mut().for_each(|wi| *wi *= scale);
        }
        WeightScheme::Multinomial => {
            w.iter_mut().for_each(|wi| *wi = 0.0);
            for _ in 0..n {
                w[rng.random_range(0..n)] += 1.0;
            }
        }
    }
}

/// `B` bootstrap replicates: parameter draws (generative bootstrap) or fitted distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEnsemble<T> {
    pub draws: Vec<T>,
    pub scheme: WeightScheme,
    pub seed: u64,
}

impl<T> BootstrapEnsemble<T> {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

impl BootstrapEnsemble<NpmleFit> {
    /// One JSON object per replicate.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for fit in &self.draws {
            serde_json::to_writer(&mut out, fit)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, scheme: WeightScheme, seed: u64) -> Result<Self> {
        let mut draws = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            draws.push(serde_json::from_str(&line)?);
        }
        Ok(BootstrapEnsemble { draws, scheme, seed })
    }
}

impl BootstrapEnsemble<f64> {
    /// One `θ` per line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "theta")?;
        for t in &self.draws {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, seed: u64) -> Result<Self> {
        let mut draws = Vec::new();
        for (k, line) in input.lines().enumerate() {
            let line = line?;
            let s = line.trim();
            if s.is_empty() || (k == 0 && s == "theta") {
                continue;
            }
            draws.push(s.parse::<f64>().map_err(|e| Error::Parse {
                path: "<ensemble>".into(),
                line: k as u64 + 1,
                message: e.to_string(),
            })?);
        }
        Ok(BootstrapEnsemble {
            draws,
            scheme: WeightScheme::DirichletTimesN,
            seed,
        })
    }
}

/// Settings for [`bootstrap_npmle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapOptions {
    pub scheme: WeightScheme,
    pub replicates: usize,
    pub em: EmOptions,
    /// Worker threads; `0` uses the ambient rayon pool.
    pub threads: usize,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            scheme: WeightScheme::Multinomial,
            replicates: 1000,
            em: EmOptions::default(),
            threads: 0,
        }
    }
}

/// Refit the weighted NPMLE once per replicate. Per-replicate seeds are drawn from `rng` up
/// front, so the ensemble does not depend on the number of workers.
pub fn bootstrap_npmle<R: RngCore>(
    y: &Observations,
    kernel: &KernelModel,
    grid: &SupportGrid,
    opts: &BootstrapOptions,
    rng: &mut R,
) -> Result<BootstrapEnsemble<NpmleFit>> {
    let seeds: Vec<u64> = (0..opts.replicates).map(|_| rng::fork_seed(rng)).collect();
    bootstrap_with(y, kernel, grid, opts, seeds.first().copied().unwrap_or(0), |b, w| {
        let mut r: StreamRng = rng::child(seeds[b], rng::WEIGHTS, b as u64);
        fill_weights(opts.scheme, &mut r, w);
    })
}

/// Bootstrap with caller-supplied weight vectors (e.g. all ones).
pub fn bootstrap_npmle_with_weights(
    y: &Observations,
    kernel: &KernelModel,
    grid: &SupportGrid,
    opts: &BootstrapOptions,
    weights: &[Vec<f64>],
) -> Result<BootstrapEnsemble<NpmleFit>> {
    let opts = BootstrapOptions {
        replicates: weights.len(),
        ..*opts
    };
    bootstrap_with(y, kernel, grid, &opts, 0, |b, w| w.copy_from_slice(&weights[b]))
}

fn bootstrap_with<F>(
    y: &Observations,
    kernel: &KernelModel,
    grid: &SupportGrid,
    opts: &BootstrapOptions,
    seed: u64,
    weights: F,
) -> Result<BootstrapEnsemble<NpmleFit>>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if opts.replicates == 0 {
        return Err(Error::invalid("bootstrap needs at least one replicate"));
    }
    let matrix = LikelihoodMatrix::new(y, kernel, grid)?;
    let n = y.len();
    let run = |b: usize| -> Result<NpmleFit> {
        let mut w = vec![0.0; n];
        weights(b, &mut w);
        matrix.fit(&w, &opts.em).map_err(|e| Error::Replicate {
            replicate: b,
            source: Box::new(e),
        })
    };
    let draws: Result<Vec<NpmleFit>> = if opts.threads == 0 {
        (0..opts.replicates).into_par_iter().map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(|| (0..opts.replicates).into_par_iter().map(run).collect())
    };
    Ok(BootstrapEnsemble {
        draws: draws?,
        scheme: opts.scheme,
        seed,
    })
}

/// Draw `per_replicate` atoms from every replicate distribution, concatenated in order.
pub fn pooled_draws<R: Rng + ?Sized>(
    ensemble: &BootstrapEnsemble<NpmleFit>,
    per_replicate: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if per_replicate == 0 {
        return Err(Error::invalid("per_replicate must be at least 1"));
    }
    let mut out = Vec::with_capacity(ensemble.len() * per_replicate);
    for fit in &ensemble.draws {
        for _ in 0..per_replicate {
            out.push(fit.distribution.sample(rng));
        }
    }
    Ok(out)
}

/// Equal-weight mixture of every replicate distribution, with coinciding atoms merged.
pub fn pooled_distribution(ensemble: &BootstrapEnsemble<NpmleFit>) -> Result<DiscreteMixingDistribution> {
    if ensemble.is_empty() {
        return Err(Error::Empty);
    }
    let b = ensemble.len() as f64;
    let mut pairs: Vec<(f64, f64)> = ensemble
        .draws
        .iter()
        .flat_map(|f| f.distribution.atoms.iter().copied().zip(f.distribution.weights.iter().map(move |w| w / b)))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut atoms: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (a, w) in pairs {
        if atoms.last() == Some(&a) {
            *weights.last_mut().expect("nonempty") += w;
        } else {
            atoms.push(a);
            weights.push(w);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    DiscreteMixingDistribution::new(atoms, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::npmle::{fit_npmle, DiscreteMixingDistribution};
    use crate::util::{mean, variance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_observation_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in [WeightScheme::DirichletTimesN, WeightScheme::Multinomial] {
            assert_eq!(sample_weights(s, 1, &mut rng), vec![1.0]);
        }
    }

    #[test]
    fn dirichlet_weights_sum_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mut sums = vec![0.0; n];
        let reps = 1000;
        for _ in 0..reps {
            let w = sample_weights(WeightScheme::DirichletTimesN, n, &mut rng);
            let s: f64 = w.iter().sum();
            assert!((s - n as f64).abs() < 1e-10 * n as f64);
            assert!(w.iter().all(|&x| x >= 0.0));
            for (a, b) in sums.iter_mut().zip(&w) {
                *a += b;
            }
        }
        // each coordinate mean has sd ≈ 1/sqrt(1000) ≈ 0.032; check a handful of coordinates
        // against the 0.05 band and the grand mean tightly
        let coord_means: Vec<f64> = sums.iter().map(|s| s / reps as f64).collect();
        assert!((mean(&coord_means) - 1.0).abs() < 1e-10);
        let within = coord_means.iter().filter(|m| (*m - 1.0).abs() < 0.05).count();
        assert!(within as f64 / n as f64 > 0.85, "{within}");
        for m in &coord_means[..5] {
            assert!((m - 1.0).abs() < 0.2);
        }
    }

    #[test]
    fn dirichlet_marginal_variance() {
        // marginal of n·Dirichlet(1,...,1) is n·Beta(1, n-1): variance (n-1)/(n+1)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20;
        let first: Vec<f64> = (0..10_000)
            .map(|_| sample_weights(WeightScheme::DirichletTimesN, n, &mut rng)[0])
            .collect();
        let expected = (n as f64 - 1.0) / (n as f64 + 1.0);
        assert!((variance(&first) / expected - 1.0).abs() < 0.1);
    }

    #[test]
    fn multinomial_two_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0usize; 3];
        let trials = 10_000;
        for _ in 0..trials {
            let w = sample_weights(WeightScheme::Multinomial, 2, &mut rng);
            assert_eq!(w[0] + w[1], 2.0);
            counts[w[0] as usize] += 1;
        }
        let p: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
        assert!((p[0] - 0.25).abs() < 0.05 && (p[1] - 0.5).abs() < 0.05 && (p[2] - 0.25).abs() < 0.05);
    }

    fn toy() -> (Observations, KernelModel, SupportGrid) {
        let k = KernelModel::GAUSSIAN;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<f64> = (0..60)
            .map(|i| k.sample(if i % 2 == 0 { -2.0 } else { 1.5 }, &mut rng).unwrap())
            .collect();
        let y = Observations::new(y, &k).unwrap();
        let grid = SupportGrid::default_for(&y, &k, 80).unwrap();
        (y, k, grid)
    }

    #[test]
    fn unit_weight_bootstrap_is_the_npmle() {
        let (y, k, grid) = toy();
        let opts = BootstrapOptions {
            em: EmOptions::default(),
            ..BootstrapOptions::default()
        };
        let e = bootstrap_npmle_with_weights(&y, &k, &grid, &opts, &[vec![1.0; y.len()]]).unwrap();
        let direct = fit_npmle(&y, &k, &grid, &EmOptions::default()).unwrap();
        assert_eq!(e.draws[0], direct);
    }

    #[test]
    fn bootstrap_is_deterministic_across_thread_counts() {
        let (y, k, grid) = toy();
        let run = |threads| {
            let opts = BootstrapOptions {
                replicates: 5,
                threads,
                ..BootstrapOptions::default()
            };
            bootstrap_npmle(&y, &k, &grid, &opts, &mut ChaCha8Rng::seed_from_u64(77)).unwrap()
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(3));
        assert_eq!(a.len(), 5);
        for fit in &a.draws {
            assert!(fit.optimality <= 1.0 + crate::npmle::CERTIFICATE_SLACK + 1e-12);
        }
    }

    #[test]
    fn replicate_errors_carry_index() {
        let k = KernelModel::BINOMIAL;
        let y = Observations::new(vec![3.0, 4.0], &k).unwrap();
        let grid = SupportGrid::new(vec![0.1, 0.2], &k).unwrap();
        let opts = BootstrapOptions {
            replicates: 2,
            ..BootstrapOptions::default()
        };
        let bad = bootstrap_npmle_with_weights(&y, &k, &grid, &opts, &[vec![1.0, 1.0], vec![-1.0, 3.0]]);
        assert!(matches!(bad, Err(Error::Replicate { replicate: 1, .. })));
    }

    fn ensemble_of(ds: Vec<DiscreteMixingDistribution>) -> BootstrapEnsemble<NpmleFit> {
        BootstrapEnsemble {
            draws: ds
                .into_iter()
                .map(|distribution| NpmleFit {
                    distribution,
                    loglik: 0.0,
                    optimality: 1.0,
                    iterations: 0,
                    converged: true,
                })
                .collect(),
            scheme: WeightScheme::Multinomial,
            seed: 0,
        }
    }

    #[test]
    fn pooled_draws_point_mass_and_precondition() {
        let e = ensemble_of(vec![DiscreteMixingDistribution::point_mass(2.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(pooled_draws(&e, 50, &mut rng).unwrap().iter().all(|&t| t == 2.0));
        assert!(pooled_draws(&e, 0, &mut rng).is_err());
    }

    #[test]
    fn pooled_draws_mean_matches_mixture_mean() {
        let d1 = DiscreteMixingDistribution::new(vec![-1.0, 3.0], vec![0.25, 0.75]).unwrap();
        let d2 = DiscreteMixingDistribution::new(vec![0.0, 1.0, 5.0], vec![0.5, 0.3, 0.2]).unwrap();
        let exact = 0.5 * (d1.mean() + d2.mean());
        let second = 0.5
            * (d1.atoms.iter().zip(&d1.weights).map(|(a, w)| a * a * w).sum::<f64>()
                + d2.atoms.iter().zip(&d2.weights).map(|(a, w)| a * a * w).sum::<f64>());
        let sd = (second - exact * exact).sqrt();
        let e = ensemble_of(vec![d1, d2]);
        let draws = pooled_draws(&e, 20_000, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(draws.len(), 40_000);
        assert!((mean(&draws) - exact).abs() < 3.0 * sd / (draws.len() as f64).sqrt());
    }

    #[test]
    fn jsonl_round_trip() {
        let e = ensemble_of(vec![
            DiscreteMixingDistribution::point_mass(2.0),
            DiscreteMixingDistribution::new(vec![0.1, 0.3], vec![0.4, 0.6]).unwrap(),
        ]);
        let mut buf = Vec::new();
        e.write_jsonl(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 2);
        let back = BootstrapEnsemble::read_jsonl(&buf[..], e.scheme, e.seed).unwrap();
        assert_eq!(back.draws.len(), 2);
        assert_eq!(back.draws[1].distribution, e.draws[1].distribution);
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("dirichlet".parse::<WeightScheme>().unwrap(), WeightScheme::DirichletTimesN);
        assert_eq!("Multinomial".parse::<WeightScheme>().unwrap(), WeightScheme::Multinomial);
        assert!("poisson".parse::<WeightScheme>().is_err());
    }
}
