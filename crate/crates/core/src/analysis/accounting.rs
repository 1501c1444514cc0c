use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layers::CostRow;
use crate::model::{FfNet, ModelConfig};
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

/// Per-layer parameter and compute counts for one forward pass.
///
/// FLOPs are always twice the multiply-accumulates. Elementwise work counts
/// one MAC per output element.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub input: Shape,
    pub rows: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_flops: u64,
}

impl AnalysisReport {
    pub fn from_rows(input: Shape, rows: Vec<CostRow>) -> Self {
        let rows: Vec<LayerCost> = rows
            .into_iter()
            .map(|r| LayerCost {
                flops: r.flops(),
                name: r.name,
                kind: r.kind,
                params: r.params,
                macs: r.macs,
            })
            .collect();
        Self {
            input,
            total_params: rows.iter().map(|r| r.params).sum(),
            total_macs: rows.iter().map(|r| r.macs).sum(),
            total_flops: rows.iter().map(|r| r.flops).sum(),
            rows,
        }
    }

    /// Totals of the rows whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .fold((0, 0), |(p, m), r| (p + r.params, m + r.macs))
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = format!("input {:?}\n", self.input);
        s.push_str(&format!(
            "{:<width$}  {:<18} {:>12} {:>16} {:>16}\n",
            "layer", "kind", "params", "MACs", "FLOPs"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<width$}  {:<18} {:>12} {:>16} {:>16}\n",
                r.name, r.kind, r.params, r.macs, r.flops
            ));
        }
        s.push_str(&format!(
            "{:<width$}  {:<18} {:>12} {:>16} {:>16}\n",
            "total", "", self.total_params, self.total_macs, self.total_flops
        ));
        s.push_str(&format!(
            "\nparams {:.2}M  MACs {:.2}G  FLOPs {:.2}G\n",
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9,
            self.total_flops as f64 / 1e9
        ));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Closed-form accounting of the network described by `config` at `input`.
pub fn count_params_flops(config: &ModelConfig, input: Shape) -> Result<AnalysisReport> {
    let model = FfNet::<f32>::new(config.clone())?;
    model.backbone.check_input(input)?;
    Ok(AnalysisReport::from_rows(input, model.account(input)))
}
