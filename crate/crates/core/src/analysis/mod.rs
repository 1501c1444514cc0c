//! Parameter and compute accounting, effective receptive fields, branch
//! heatmaps and density export.

mod accounting;
mod erf;
mod heatmap;

pub use accounting::{count_params_flops, AnalysisReport, LayerCost};
pub use erf::{branch_erf, erf_of, random_probes, scene_probes, theoretical_receptive_field, ErfConfig, ErfMap};
pub use heatmap::{
    branch_heatmap, export_density, pearson, read_density_csv, write_heatmap, DensityExport, Heatmap,
};

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::DENSITY_STRIDE;

/// One of the three maps entering fusion, finest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    B1,
    B2,
    B3,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::B1, Branch::B2, Branch::B3];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Input pixels per cell: 8, 16 or 32.
    pub fn stride(self) -> usize {
        DENSITY_STRIDE << self.index()
    }

    pub fn from_number(n: usize) -> Result<Self> {
        match n {
            1 => Ok(Branch::B1),
            2 => Ok(Branch::B2),
            3 => Ok(Branch::B3),
            _ => Err(Error::InvalidArgument(format!("unknown branch {n} (expected 1, 2 or 3)"))),
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.strip_prefix("branch").unwrap_or(s);
        digits
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("unknown branch {s:?} (expected 1, 2 or 3)")))
            .and_then(Branch::from_number)
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "branch{}", self.index() + 1)
    }
}

/// `[0, 1]` values to an 8-bit grayscale image.
fn to_gray(width: usize, height: usize, values: &[f64]) -> Image {
    let data = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Image::new(width, height, 1, data).expect("map buffer matches its size")
}
