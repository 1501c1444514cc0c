use serde::{Deserialize, Serialize};

/// Closed-form cost of one layer application.
///
/// Multiply-accumulates follow the conventional counter: every kernel tap is
/// counted whether or not it lands on padding. Elementwise work (activations,
/// normalization, gating, residual adds) counts one MAC per output element.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
}

impl CostRow {
    pub fn new(name: impl Into<String>, kind: &str, params: u64, macs: u64) -> Self {
        Self {
            name: name.into(),
            kind: kind.to_string(),
            params,
            macs,
        }
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

pub(crate) fn elems(shape: [usize; 4]) -> u64 {
    shape.iter().map(|&d| d as u64).product()
}
