use std::io::Write;

use anyhow::Result;

use mixdens::metrics::prior_eval_grid;

use crate::estimate::{y_csv, Dataset};
use crate::io::OutDir;
use crate::manifest::RunManifest;
use crate::opts::Opts;

/// `y.csv`, `theta.csv` and the true prior density `prior.csv`.
pub fn simulate(opts: &Opts) -> Result<()> {
    let model = opts.require_model()?;
    let n = opts.single_n()?;
    let mut m = RunManifest::new("simulate", opts);
    let ds = m.phase("simulate", || Dataset::simulated(model, n, opts.seed()))?;
    let mut out = OutDir::create(&opts.out_dir())?;
    let prior = model.prior_density(&prior_eval_grid(model))?;
    m.phase("write", || -> Result<()> {
        out.write_with("y.csv", |w| Ok(w.write_all(y_csv(&ds.y, &ds.kernel).as_bytes())?))?;
        out.write_with("theta.csv", |w| {
            writeln!(w, "theta")?;
            for t in ds.theta.as_deref().unwrap_or_default() {
                writeln!(w, "{t}")?;
            }
            Ok(())
        })?;
        out.write_with("prior.csv", |w| Ok(prior.write_csv(w)?))?;
        Ok(())
    })?;
    log::info!("simulated {} observations from {model} into {}", n, out.root().display());
    m.finish(&mut out)
}
