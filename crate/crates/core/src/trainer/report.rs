use serde::{Deserialize, Serialize};

use super::{LossRecord, MetricsReport};

/// Summary of one training run for side-by-side comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub label: String,
    pub fusion: String,
    pub ftm: bool,
    pub params: usize,
    pub density_shape: [usize; 4],
    pub curve: Vec<LossRecord>,
    pub metrics: MetricsReport,
}

impl AblationRun {
    fn mean_total(&self, from: usize, to: usize) -> f64 {
        let rows: Vec<f64> = self
            .curve
            .iter()
            .filter(|r| r.step >= from && r.step < to)
            .map(|r| r.total)
            .collect();
        if rows.is_empty() {
            f64::NAN
        } else {
            rows.iter().sum::<f64>() / rows.len() as f64
        }
    }
}

/// Markdown table: one row per run with parameter count, loss at the start,
/// middle and end of training (50-step windows) and final MAE/MSE.
pub fn ablation_report(runs: &[AblationRun]) -> String {
    let mut s = String::from(
        "| run | fusion | FTM | params | density grid | loss@start | loss@mid | loss@end | MAE | MSE |\n\
         |---|---|---|---:|---|---:|---:|---:|---:|---:|\n",
    );
    for r in runs {
        let last = r.curve.last().map_or(0, |c| c.step + 1);
        let window = 50.min(last.max(1));
        let mid = last / 2;
        s.push_str(&format!(
            "| {} | {} | {} | {} | {}x{} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.label,
            r.fusion,
            if r.ftm { "yes" } else { "no" },
            r.params,
            r.density_shape[2],
            r.density_shape[3],
            r.mean_total(0, window),
            r.mean_total(mid, mid + window),
            r.mean_total(last.saturating_sub(window), last),
            r.metrics.mae,
            r.metrics.mse,
        ));
    }
    s
}
