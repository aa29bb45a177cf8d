//! CSV emission for run metrics. Floats are written with 17 significant
//! digits so a parsed-back value is bit-identical to the one written.

use std::path::Path;

use crate::simulator::RunResult;
use crate::Result;

pub const METRICS_HEADER: &str =
    "round,wall_clock_s,train_loss,grad_norm_sq,test_acc,mean_staleness,max_staleness";

/// Round-trip-exact float formatting (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders the metrics table; one row per evaluation point.
pub fn metrics_to_string(result: &RunResult) -> String {
    let mut out = String::with_capacity(64 * (result.rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for row in &result.rows {
        let acc = row.test_acc.map(fmt_f64).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.round,
            fmt_f64(row.wall_clock_s),
            fmt_f64(row.train_loss),
            fmt_f64(row.grad_norm_sq),
            acc,
            fmt_f64(row.mean_staleness),
            row.max_staleness,
        ));
    }
    out
}

/// Writes the metrics table to `path`.
pub fn write_metrics_csv(result: &RunResult, path: &Path) -> Result<()> {
    std::fs::write(path, metrics_to_string(result))?;
    Ok(())
}
