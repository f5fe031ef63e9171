use std::io::Write;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use mixdens::gbnpmle::{generate, stage1_train, stage2_mcem};
use mixdens::{KernelModel, Observations};

use crate::estimate::{self, Dataset};
use crate::io::OutDir;
use crate::manifest::RunManifest;
use crate::opts::{FitSettings, Method, Opts};

/// One timing cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub model: String,
    pub method: Method,
    pub n: usize,
    /// Replicates or generated draws; absent for single-fit methods.
    pub replicates: Option<usize>,
    /// `ok`, `timeout` or `error: ...`.
    pub status: String,
    pub seconds: f64,
    /// Shared generator training time (gb only); included in `seconds`.
    pub train_seconds: Option<f64>,
    pub generate_seconds: Option<f64>,
}

impl TimingRow {
    pub fn log_seconds(&self) -> f64 {
        self.seconds.ln()
    }
}

/// Runs `cell` on its own thread. A timed-out cell is abandoned: it keeps its thread until
/// the process exits, so later timings may be inflated.
fn with_timeout<T: Send + 'static>(timeout: f64, cell: impl FnOnce() -> Result<T> + Send + 'static) -> Option<Result<T>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = tx.send(cell());
    });
    match rx.recv_timeout(Duration::from_secs_f64(timeout)) {
        Ok(r) => Some(r),
        Err(mpsc::RecvTimeoutError::Timeout) => None,
        Err(mpsc::RecvTimeoutError::Disconnected) => Some(Err(anyhow::anyhow!("benchmark cell panicked"))),
    }
}

fn time_fit(method: Method, y: Observations, kernel: KernelModel, s: FitSettings) -> Result<f64> {
    let start = Instant::now();
    estimate::fit(method, &y, &kernel, &s)?;
    Ok(start.elapsed().as_secs_f64())
}

/// Trains once, then times generation for every `B`: `(train seconds, [generate seconds])`.
fn time_gb(y: Observations, kernel: KernelModel, s: FitSettings, bs: Vec<usize>) -> Result<(f64, Vec<f64>)> {
    let start = Instant::now();
    let (net, _) = stage1_train(&y, &kernel, &s.train)?;
    let (tau, _) = stage2_mcem(&y, &kernel, &net, &s.train)?;
    let train = start.elapsed().as_secs_f64();
    let mut gen = Vec::with_capacity(bs.len());
    for b in bs {
        let start = Instant::now();
        generate(&net, &tau, b, &s.train)?;
        gen.push(start.elapsed().as_secs_f64());
    }
    Ok((train, gen))
}

/// Timing table for every `n × method × B` cell. Failed and timed-out cells are recorded and
/// the run continues.
pub fn bench_rows(opts: &Opts) -> Result<Vec<TimingRow>> {
    let model = opts.require_model()?;
    let ns = if opts.n.is_empty() { vec![1000] } else { opts.n.clone() };
    let methods = if opts.method.is_empty() {
        vec![Method::Boot, Method::Gb]
    } else {
        opts.method.clone()
    };
    let timeout = opts.timeout.unwrap_or(3600.0);
    if !(timeout > 0.0) {
        bail!("--timeout must be positive");
    }
    let mut rows = Vec::new();
    for &n in &ns {
        let ds = Dataset::simulated(model, n, opts.seed())?;
        for &method in &methods {
            let bs: Vec<Option<usize>> = match method {
                Method::Boot | Method::Gb if opts.boot_b.is_empty() => vec![Some(opts.replicates(method)?)],
                Method::Boot | Method::Gb => opts.boot_b.iter().copied().map(Some).collect(),
                _ => vec![None],
            };
            let row = |b: Option<usize>, status: String, seconds: f64| TimingRow {
                model: model.to_string(),
                method,
                n,
                replicates: b,
                status,
                seconds,
                train_seconds: None,
                generate_seconds: None,
            };
            let mut single = opts.clone();
            single.boot_b.clear();
            let base = single.fit_settings(method)?;
            if method == Method::Gb {
                let draws: Vec<usize> = bs.iter().map(|b| b.expect("gb has B")).collect();
                let (y, k, s) = (ds.y.clone(), ds.kernel, base.clone());
                match with_timeout(timeout, move || time_gb(y, k, s, draws)) {
                    Some(Ok((train, gen))) => {
                        for (b, g) in bs.iter().zip(gen) {
                            let mut r = row(*b, "ok".into(), train + g);
                            r.train_seconds = Some(train);
                            r.generate_seconds = Some(g);
                            rows.push(r);
                        }
                    }
                    Some(Err(e)) => rows.extend(bs.iter().map(|b| row(*b, format!("error: {e:#}"), f64::NAN))),
                    None => rows.extend(bs.iter().map(|b| row(*b, "timeout".into(), timeout))),
                }
                continue;
            }
            for b in bs {
                let mut s = base.clone();
                if let Some(b) = b {
                    s.boot.replicates = b;
                }
                let (y, k) = (ds.y.clone(), ds.kernel);
                let r = match with_timeout(timeout, move || time_fit(method, y, k, s)) {
                    Some(Ok(t)) => row(b, "ok".into(), t),
                    Some(Err(e)) => row(b, format!("error: {e:#}"), f64::NAN),
                    None => row(b, "timeout".into(), timeout),
                };
                log::info!("{method} n={n} B={b:?}: {} {:.3}s", r.status, r.seconds);
                rows.push(r);
            }
        }
    }
    Ok(rows)
}

pub fn bench(opts: &Opts) -> Result<()> {
    let mut m = RunManifest::new("bench", opts);
    let rows = m.phase("bench", || bench_rows(opts))?;
    let mut out = OutDir::create(&opts.out_dir())?;
    out.write_with("timing.csv", |w| {
        writeln!(w, "model,method,n,B,status,seconds,log_seconds,train_seconds,generate_seconds")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.model,
                r.method,
                r.n,
                r.replicates.map(|b| b.to_string()).unwrap_or_default(),
                r.status.replace(',', ";"),
                r.seconds,
                r.log_seconds(),
                opt(r.train_seconds),
                opt(r.generate_seconds)
            )?;
        }
        Ok(())
    })?;
    m.finish(&mut out)
}
