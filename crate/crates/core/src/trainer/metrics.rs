use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::model::{FfNet, DENSITY_STRIDE};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCount {
    pub name: String,
    pub truth: f64,
    pub predicted: f64,
}

/// Mean absolute error and root mean squared error of per-image counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub n: usize,
    pub images: Vec<ImageCount>,
}

impl MetricsReport {
    pub fn from_counts(images: Vec<ImageCount>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
        }
        let n = images.len() as f64;
        let mae = images.iter().map(|c| (c.truth - c.predicted).abs()).sum::<f64>() / n;
        let mse = (images.iter().map(|c| (c.truth - c.predicted).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            mae,
            mse,
            n: images.len(),
            images,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("images {}\nMAE {:.4}\nMSE {:.4}\n\n", self.n, self.mae, self.mse);
        s.push_str(&format!("{:<16} {:>10} {:>12}\n", "image", "truth", "predicted"));
        for c in &self.images {
            s.push_str(&format!("{:<16} {:>10.0} {:>12.4}\n", c.name, c.truth, c.predicted));
        }
        s
    }
}

/// The image as a model input, reflect-padded on the bottom and right to a
/// multiple of 32.
pub fn padded_input<T: Element>(image: &Image) -> Result<Tensor<T>> {
    let pad = |len: usize| (32 - len % 32) % 32;
    image.to_tensor().reflect_pad(pad(image.height), pad(image.width))
}

/// Eval-mode density of a full image.
///
/// Cells lying wholly in the padding added by [`padded_input`] are dropped,
/// so the result is `(1, 1, ceil(h/8), ceil(w/8))`.
pub fn full_density<T: Element>(model: &FfNet<T>, image: &Image) -> Result<Tensor<T>> {
    let d = model.predict_density(&padded_input(image)?)?;
    let gh = image.height.div_ceil(DENSITY_STRIDE);
    let gw = image.width.div_ceil(DENSITY_STRIDE);
    Ok(Tensor::from_fn([1, 1, gh, gw], |[_, _, i, j]| d.get([0, 0, i, j])))
}

pub fn predict_count<T: Element>(model: &FfNet<T>, image: &Image) -> Result<f64> {
    Ok(full_density(model, image)?.data().iter().map(|v| v.as_f64()).sum())
}

/// Counts every image with a read-only model; rows keep dataset order.
pub fn evaluate<T: Element>(model: &FfNet<T>, dataset: &Dataset) -> Result<MetricsReport> {
    let images = dataset
        .samples
        .par_iter()
        .map(|s| {
            Ok(ImageCount {
                name: s.name.clone(),
                truth: s.annotation.count() as f64,
                predicted: predict_count(model, &s.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_counts(images)
}
