mod bench;
mod eval;
mod fit;
mod lps;
mod simulate;
mod sweep;

pub use bench::{bench, bench_rows, TimingRow};
pub use eval::{eval, ScoreRecord};
pub use fit::{fit, FitSummary};
pub use lps::{fold_settings, lps, lps_of, LpsRecord, LPS_REPLICATES};
pub use simulate::simulate;
pub use sweep::{sweep, sweep_records, SweepRecord};

/// Mean and sample standard deviation; the deviation is 0 for fewer than two values.
fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}
