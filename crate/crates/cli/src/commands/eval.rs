use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mixdens::metrics::{aggregate, write_table_csv, MetricRecord};

use crate::commands::fit::{FitSummary, ESTIMATE_FILE, SUMMARY_FILE};
use crate::estimate::PriorEstimate;
use crate::io::{read_density, read_json, OutDir};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::EvalArgs;

/// One scored estimate, as written to `metrics.json`. Timings live in `table.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub method: String,
    pub model: String,
    pub n: usize,
    pub seed: u64,
    #[serde(rename = "W1")]
    pub w1: f64,
    #[serde(rename = "ISE")]
    pub ise: f64,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let opts = &args.opts;
    if args.fits.is_empty() && args.estimates.is_empty() {
        bail!("nothing to evaluate: give --fit or --estimate");
    }
    let mut m = RunManifest::new("eval", opts);
    let truth = match &args.truth {
        Some(p) => {
            m.add_input(p)?;
            Some(read_density(p)?)
        }
        None => None,
    };
    let mut scored: Vec<(ScoreRecord, f64)> = Vec::new();
    m.phase("score", || -> Result<()> {
        for dir in &args.fits {
            let summary: FitSummary = read_json(&dir.join(SUMMARY_FILE))?;
            let est: PriorEstimate = read_json(&dir.join(ESTIMATE_FILE))?;
            let time = read_json::<RunManifest>(&dir.join(MANIFEST_FILE))
                .ok()
                .and_then(|fm| fm.seconds_of("fit"))
                .unwrap_or(0.0);
            let model = opts.model.or(summary.model);
            let (w1, ise, label) = match (&truth, model) {
                (Some(t), _) => {
                    let (w1, ise) = est.score_truth(t)?;
                    (w1, ise, "truth".to_string())
                }
                (None, Some(model)) => {
                    let (w1, ise) = est.score_model(model)?;
                    (w1, ise, model.to_string())
                }
                (None, None) => bail!("{}: no --model or --truth to compare against", dir.display()),
            };
            let rec = ScoreRecord {
                method: summary.method.to_string(),
                model: label,
                n: summary.n,
                seed: summary.seed,
                w1,
                ise,
            };
            scored.push((rec, time));
        }
        for path in &args.estimates {
            let est = PriorEstimate::Density(read_density(path)?);
            let (w1, ise, label) = match (&truth, opts.model) {
                (Some(t), _) => {
                    let (w1, ise) = est.score_truth(t)?;
                    (w1, ise, "truth".to_string())
                }
                (None, Some(model)) => {
                    let (w1, ise) = est.score_model(model)?;
                    (w1, ise, model.to_string())
                }
                (None, None) => bail!("{}: no --model or --truth to compare against", path.display()),
            };
            let method = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .context("estimate path has no file name")?;
            scored.push((
                ScoreRecord {
                    method,
                    model: label,
                    n: 0,
                    seed: opts.seed(),
                    w1,
                    ise,
                },
                0.0,
            ));
        }
        Ok(())
    })?;
    for dir in &args.fits {
        for name in [SUMMARY_FILE, ESTIMATE_FILE] {
            m.add_input(&dir.join(name))?;
        }
    }
    let records: Vec<MetricRecord> = scored
        .iter()
        .map(|(r, t)| MetricRecord {
            method: r.method.clone(),
            model: r.model.clone(),
            n: r.n,
            seed: r.seed,
            w1: Some(r.w1),
            ise: Some(r.ise),
            lps: None,
            time_sec: *t,
        })
        .collect();
    let scores: Vec<ScoreRecord> = scored.into_iter().map(|(r, _)| r).collect();
    for r in &scores {
        log::info!("{} on {} seed {}: W1 {:.4} ISE {:.4}", r.method, r.model, r.seed, r.w1, r.ise);
    }
    let mut out = OutDir::create(&opts.out_dir())?;
    out.write_json("metrics.json", &scores)?;
    out.write_with("table.csv", |w| Ok(write_table_csv(&aggregate(&records), w)?))?;
    m.finish(&mut out)
}
