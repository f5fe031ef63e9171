use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mixdens::metrics::lps_kfold;
use mixdens::{rng, Error};

use crate::commands::fit::record_inputs;
use crate::estimate::{self, Dataset};
use crate::io::OutDir;
use crate::manifest::RunManifest;
use crate::opts::{FitSettings, Method, Opts};

/// Default `B` of the predictive score.
pub const LPS_REPLICATES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpsRecord {
    pub data: String,
    pub method: Method,
    pub n: usize,
    pub folds: usize,
    pub replicates: usize,
    #[serde(rename = "LPS")]
    pub lps: f64,
    pub per_fold: Vec<f64>,
}

/// Settings for the refit without fold `k`: the master seed is replaced by a per-fold seed.
pub fn fold_settings(base: &FitSettings, k: usize) -> FitSettings {
    let seed = rng::fork_seed(&mut rng::child(base.seed, "lps", k as u64));
    let mut s = base.clone();
    s.seed = seed;
    s.train.seed = seed;
    s
}

/// K-fold LPS of one method on one dataset.
pub fn lps_of(ds: &Dataset, method: Method, settings: &FitSettings, folds: usize) -> Result<LpsRecord> {
    if !matches!(method, Method::Boot | Method::Gb) {
        bail!("lps is defined for boot and gb, not {method}");
    }
    let res = lps_kfold(&ds.y, &ds.kernel, folds, settings.seed, |train, k| {
        let s = fold_settings(settings, k);
        estimate::fit(method, train, &ds.kernel, &s)
            .and_then(|e| e.predictive_draws(s.seed))
            .map_err(|e| Error::InvalidArgument(format!("{e:#}")))
    })?;
    let replicates = if method == Method::Gb {
        settings.train.draws
    } else {
        settings.boot.replicates
    };
    Ok(LpsRecord {
        data: ds.label.clone(),
        method,
        n: ds.y.len(),
        folds,
        replicates,
        lps: res.lps,
        per_fold: res.per_fold,
    })
}

pub fn lps(opts: &Opts) -> Result<()> {
    let mut opts = opts.clone();
    if opts.boot_b.is_empty() {
        opts.boot_b = vec![LPS_REPLICATES];
    }
    let methods = if opts.method.is_empty() {
        vec![Method::Gb, Method::Boot]
    } else {
        opts.method.clone()
    };
    let folds = opts.folds();
    let mut m = RunManifest::new("lps", &opts);
    let ds = m.phase("load", || Dataset::from_opts(&opts))?;
    record_inputs(&mut m, &ds, &opts)?;
    let mut records = Vec::new();
    let mut resolved = serde_json::Map::new();
    for &method in &methods {
        let settings = opts.fit_settings(method)?;
        resolved.insert(
            method.to_string(),
            match method {
                Method::Gb => json!({ "train": settings.train }),
                _ => json!({ "replicates": settings.boot.replicates, "scheme": settings.boot.scheme }),
            },
        );
        let rec = m.phase(method.name(), || lps_of(&ds, method, &settings, folds))?;
        log::info!("{method} on {}: LPS {:.3} ({folds} folds)", ds.label, rec.lps);
        records.push(rec);
    }
    m.resolved = serde_json::Value::Object(resolved);
    let mut out = OutDir::create(&opts.out_dir())?;
    out.write_json("lps.json", &records)?;
    m.finish(&mut out)
}
