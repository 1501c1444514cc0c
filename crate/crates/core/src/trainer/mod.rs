//! AdamW training loop, checkpoints, count metrics and run reports.

mod checkpoint;
mod metrics;
mod optim;
mod report;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, BYTES_TAG, CONFIG_ENTRY, MAGIC, VERSION};
pub use metrics::{evaluate, full_density, padded_input, predict_count, ImageCount, MetricsReport};
pub use optim::{AdamW, AdamWConfig};
pub use report::{ablation_report, AblationRun};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, rasterize, Dataset, RasterMode};
use crate::error::{Error, Result};
use crate::layers::{param_grads, Mode};
use crate::loss::{total_loss, LossConfig, LossReport};
use crate::model::{FfNet, DENSITY_STRIDE};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub crop: usize,
    pub flip_prob: f64,
    pub loss: LossConfig,
    pub raster: RasterMode,
    /// Rescale the global gradient norm to at most this value.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 8,
            steps: 1000,
            seed: 0,
            crop: 256,
            flip_prob: 0.5,
            loss: LossConfig::default(),
            raster: RasterMode::Additive,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale overfitting run: lr 1e-3, 2000 steps, batch 8.
    pub fn overfit() -> Self {
        Self {
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            steps: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", o.lr)));
        }
        if !(o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(32) {
            return Err(Error::Config(format!("crop {} must be a positive multiple of 32", self.crop)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if self.clip_grad_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("gradient clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the loss curve; OT and variation are already weighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub count: f64,
    pub ot: f64,
    pub variation: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn from_report(step: usize, r: &LossReport) -> Self {
        Self {
            step,
            count: r.count,
            ot: r.weighted_ot(),
            variation: r.weighted_variation(),
            total: r.total,
        }
    }
}

/// Writes `step,count,ot,variation,total`.
pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// A stacked training batch.
#[derive(Clone, Debug)]
pub struct Batch<T: Element> {
    pub images: Tensor<T>,
    pub dots: Tensor<T>,
    /// Per-image points in crop pixel coordinates.
    pub points: Vec<Vec<[f64; 2]>>,
}

/// Augments and stacks the samples at `indices`.
pub fn make_batch<T: Element>(
    dataset: &Dataset,
    indices: &[usize],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<T>> {
    let mut images = Vec::with_capacity(indices.len());
    let mut dots = Vec::with_capacity(indices.len());
    let mut points = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &dataset.samples[i];
        let (img, ann) = augment(&s.image, &s.annotation, config.crop, config.flip_prob, rng)?;
        images.push(img.to_tensor());
        dots.push(rasterize(&ann, DENSITY_STRIDE, config.raster)?);
        points.push(ann.points);
    }
    Ok(Batch {
        images: Tensor::stack(&images)?,
        dots: Tensor::stack(&dots)?,
        points,
    })
}

/// Where the loop may write its last finite weights when it aborts.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub last_good: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<LossRecord>,
    pub reports: Vec<LossReport>,
}

/// Forward, loss and gradients of one batch in train mode, without updating anything.
pub fn batch_gradients<T: Element>(
    model: &FfNet<T>,
    batch: &Batch<T>,
    loss: &LossConfig,
) -> Result<(LossReport, Vec<(crate::layers::ParamId, Tensor<T>)>, Vec<(crate::layers::ParamId, Vec<T>)>)> {
    let mut s = model.session(Mode::Train);
    let x = s.graph.input(batch.images.clone());
    let density = model.forward(&mut s, x)?;
    let (total, report) = total_loss(&mut s.graph, density, &batch.dots, &batch.points, loss)?;
    let updates = s.take_updates();
    let grads = s.graph.backward(total)?;
    let grads = param_grads(&grads).into_iter().map(|(id, g)| (id, g.clone())).collect();
    Ok((report, grads, updates))
}

fn clip<T: Element>(grads: &mut [(crate::layers::ParamId, Tensor<T>)], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::cast(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Runs `config.steps` AdamW steps on augmented batches.
///
/// Batches walk a seeded permutation of the dataset, reshuffled every epoch.
/// `observe` sees every loss record as it is produced. A non-finite loss
/// stops training before the update; the weights from the previous step are
/// then written to `options.last_good` when set.
pub fn train<T: Element>(
    model: &mut FfNet<T>,
    dataset: &Dataset,
    config: &TrainConfig,
    options: &TrainOptions,
    mut observe: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.optimizer, &model.store);
    let batch = config.batch_size.min(dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(config.steps);
    let mut reports = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut indices = Vec::with_capacity(batch);
        while indices.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let b = make_batch(dataset, &indices, config, &mut rng)?;
        let (report, mut grads, updates) = batch_gradients(model, &b, &config.loss)?;
        if !report.total.is_finite() {
            let last_good = match &options.last_good {
                Some(path) => {
                    save_checkpoint(path, model)?;
                    Some(path.clone())
                }
                None => None,
            };
            return Err(Error::NonFiniteLoss { step, last_good });
        }
        if let Some(max) = config.clip_grad_norm {
            clip(&mut grads, max);
        }
        let borrowed: Vec<_> = grads.iter().map(|(id, g)| (*id, g)).collect();
        opt.step(&mut model.store, &borrowed);
        model.store.apply_updates(updates);
        let record = LossRecord::from_report(step, &report);
        observe(&record);
        curve.push(record);
        reports.push(report);
    }
    Ok(TrainOutcome { curve, reports })
}
