use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use serde_json::json;

use mixdens::{Family, SimModel};

use crate::estimate::{self, Dataset, Estimate};
use crate::io::OutDir;
use crate::manifest::RunManifest;
use crate::opts::{Method, Opts};

pub const SUMMARY_FILE: &str = "fit.json";
pub const ESTIMATE_FILE: &str = "estimate.json";

/// Contents of `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub method: Method,
    pub data: String,
    pub model: Option<SimModel>,
    pub kernel: Family,
    pub n: usize,
    pub seed: u64,
    /// Bootstrap replicates or generated draws.
    pub replicates: Option<usize>,
    pub loglik: Option<f64>,
    pub optimality: Option<f64>,
    pub bandwidth: Option<f64>,
    pub mcem_iterations: Option<usize>,
    pub artifacts: Vec<String>,
}

pub fn fit(opts: &Opts) -> Result<()> {
    let method = opts.single_method()?;
    let settings = opts.fit_settings(method)?;
    let mut m = RunManifest::new("fit", opts);
    let ds = m.phase("load", || Dataset::from_opts(opts))?;
    record_inputs(&mut m, &ds, opts)?;
    m.resolved = match method {
        Method::Npmle => json!({ "kernel": ds.kernel.family, "grid_points": settings.grid_points }),
        Method::Boot => json!({
            "kernel": ds.kernel.family,
            "grid_points": settings.grid_points,
            "replicates": settings.boot.replicates,
            "scheme": settings.boot.scheme,
            "em": settings.boot.em,
        }),
        Method::Smooth => json!({
            "kernel": ds.kernel.family,
            "grid_points": settings.grid_points,
            "bandwidth": settings.bandwidth.map_or(json!("loocv"), |h| json!(h)),
        }),
        Method::Gb => json!({ "kernel": ds.kernel.family, "train": settings.train }),
    };
    let est = m.phase("fit", || estimate::fit(method, &ds.y, &ds.kernel, &settings))?;
    if let Estimate::Gb(g) = &est {
        m.record("fit.stage1", g.trace.stage1_seconds);
        m.record("fit.stage2", g.trace.stage2_seconds);
        m.record("fit.generate", g.trace.generate_seconds);
    }
    let mut out = OutDir::create(&opts.out_dir())?;
    let summary = m.phase("write", || write_fit(&mut out, &est, &ds, opts.seed()))?;
    log::info!(
        "{method} on {} (n = {}): {}",
        ds.label,
        ds.y.len(),
        summary.artifacts.join(", ")
    );
    m.finish(&mut out)
}

pub(crate) fn record_inputs(m: &mut RunManifest, ds: &Dataset, opts: &Opts) -> Result<()> {
    m.inputs.insert(format!("data:{}", ds.label), ds.hash.clone());
    if let Some(d) = opts.data.as_deref() {
        let p = Path::new(d);
        if p.is_file() {
            m.add_input(p)?;
        } else {
            let dir = opts.data_dir.clone().unwrap_or_else(|| "data".into());
            let p = dir.join(format!("{d}.csv"));
            if p.is_file() {
                m.add_input(&p)?;
            }
        }
    }
    Ok(())
}

/// Method-specific artifacts plus `estimate.json` and `fit.json`.
pub fn write_fit(out: &mut OutDir, est: &Estimate, ds: &Dataset, seed: u64) -> Result<FitSummary> {
    let mut summary = FitSummary {
        method: est.method(),
        data: ds.label.clone(),
        model: ds.model,
        kernel: ds.kernel.family,
        n: ds.y.len(),
        seed,
        replicates: None,
        loglik: None,
        optimality: None,
        bandwidth: None,
        mcem_iterations: None,
        artifacts: Vec::new(),
    };
    let mut files = Vec::new();
    match est {
        Estimate::Npmle(f) => {
            out.write_json("atoms.json", f)?;
            files.push("atoms.json");
            summary.loglik = Some(f.loglik);
            summary.optimality = Some(f.optimality);
        }
        Estimate::Boot { ensemble, pooled } => {
            out.write_with("ensemble.jsonl", |w| Ok(ensemble.write_jsonl(w)?))?;
            out.write_json("pooled.json", pooled)?;
            files.extend(["ensemble.jsonl", "pooled.json"]);
            summary.replicates = Some(ensemble.len());
            let worst = ensemble.draws.iter().map(|d| d.optimality).fold(f64::NEG_INFINITY, f64::max);
            summary.optimality = Some(worst);
        }
        Estimate::Smooth {
            npmle,
            density,
            selection,
        } => {
            out.write_with("smoothed.csv", |w| Ok(density.write_csv(w)?))?;
            out.write_json("atoms.json", npmle)?;
            files.extend(["smoothed.csv", "atoms.json"]);
            if let Some(sel) = selection {
                out.write_json("bandwidth.json", sel)?;
                files.push("bandwidth.json");
            }
            summary.loglik = Some(npmle.loglik);
            summary.optimality = Some(npmle.optimality);
            summary.bandwidth = Some(density.bandwidth);
        }
        Estimate::Gb(g) => {
            out.write_with("checkpoint.json", |w| Ok(g.network.write_checkpoint(w)?))?;
            out.write_json("tau.json", &g.tau)?;
            out.write_with("draws.csv", |w| Ok(g.ensemble.write_csv(w)?))?;
            out.write_with("loss.csv", |w| Ok(g.trace.write_loss_csv(w)?))?;
            out.write_with("loglik.csv", |w| Ok(g.trace.write_loglik_csv(w)?))?;
            files.extend(["checkpoint.json", "tau.json", "draws.csv", "loss.csv", "loglik.csv"]);
            summary.replicates = Some(g.ensemble.len());
            summary.loglik = g.trace.loglik.last().copied();
            summary.mcem_iterations = Some(g.trace.mcem_iterations());
        }
    }
    out.write_json(ESTIMATE_FILE, &est.prior_estimate())?;
    files.push(ESTIMATE_FILE);
    summary.artifacts = files.into_iter().map(String::from).collect();
    out.write_json(SUMMARY_FILE, &summary)?;
    Ok(summary)
}
