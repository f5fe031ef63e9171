use std::io::Write;
use std::time::Instant;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use mixdens::gbnpmle::fit_gb_npmle;
use mixdens::metrics::score_draws;

use crate::commands::mean_sd;
use crate::estimate::Dataset;
use crate::io::OutDir;
use crate::manifest::RunManifest;
use crate::opts::{Method, Opts};

/// One `(L, h, seed)` fit, as written to `sweep.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub layers: usize,
    pub hidden: usize,
    pub seed: u64,
    #[serde(rename = "W1")]
    pub w1: f64,
    #[serde(rename = "ISE")]
    pub ise: f64,
    #[serde(skip)]
    pub seconds: f64,
}

/// GB-NPMLE fits over the `--layers × --hidden` grid, `--reps` consecutive seeds each.
pub fn sweep_records(opts: &Opts) -> Result<Vec<SweepRecord>> {
    let model = opts.require_model()?;
    if opts.layers.is_empty() || opts.hidden.is_empty() {
        bail!("empty sweep grid: give --layers and --hidden");
    }
    let n = opts.single_n()?;
    let reps = opts.reps.unwrap_or(1);
    if reps == 0 {
        bail!("--reps must be positive");
    }
    let draws = opts.replicates(Method::Gb)?;
    let mut out = Vec::new();
    for &layers in &opts.layers {
        for &hidden in &opts.hidden {
            for r in 0..reps as u64 {
                let seed = opts.seed() + r;
                let ds = Dataset::simulated(model, n, seed)?;
                let mut seeded = opts.clone();
                seeded.seed = Some(seed);
                let cfg = seeded.train_config_with(layers, hidden, draws)?;
                let start = Instant::now();
                let fit = fit_gb_npmle(&ds.y, &ds.kernel, &cfg)?;
                let seconds = start.elapsed().as_secs_f64();
                let (w1, ise) = score_draws(model, &fit.ensemble.draws)?;
                log::info!("L={layers} h={hidden} seed {seed}: W1 {w1:.4} ISE {ise:.4} ({seconds:.1}s)");
                out.push(SweepRecord {
                    layers,
                    hidden,
                    seed,
                    w1,
                    ise,
                    seconds,
                });
            }
        }
    }
    Ok(out)
}

pub fn sweep(opts: &Opts) -> Result<()> {
    let mut m = RunManifest::new("sweep", opts);
    let records = m.phase("sweep", || sweep_records(opts))?;
    let mut out = OutDir::create(&opts.out_dir())?;
    out.write_json("sweep.json", &records)?;
    out.write_with("sweep.csv", |w| {
        writeln!(w, "layers,hidden,replicates,w1_mean,w1_sd,ise_mean,ise_sd,time_mean")?;
        for &l in &opts.layers {
            for &h in &opts.hidden {
                let cell: Vec<&SweepRecord> = records.iter().filter(|r| r.layers == l && r.hidden == h).collect();
                let w1: Vec<f64> = cell.iter().map(|r| r.w1).collect();
                let ise: Vec<f64> = cell.iter().map(|r| r.ise).collect();
                let t: Vec<f64> = cell.iter().map(|r| r.seconds).collect();
                let ((wm, ws), (im, is), (tm, _)) = (mean_sd(&w1), mean_sd(&ise), mean_sd(&t));
                writeln!(w, "{l},{h},{},{wm},{ws},{im},{is},{tm}", cell.len())?;
            }
        }
        Ok(())
    })?;
    m.finish(&mut out)
}
