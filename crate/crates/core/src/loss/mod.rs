//! Count, optimal-transport and variation losses over stride-8 density maps.
//!
//! All losses are averaged over the batch. Every function takes the predicted
//! density `pred` of shape `(n, 1, h, w)` as a graph variable and the ground
//! truth as constants.
//!
//! The OT term needs one potential per grid cell, while an entropic dual has
//! one potential per side. We use the grid-side potential `alpha` from
//! [`sinkhorn`], which already lives on the density grid, and hold it
//! constant during backward.

mod sinkhorn;

pub use sinkhorn::{grid_cost, sinkhorn, SinkhornConfig, SinkhornProblem, SinkhornResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DENSITY_STRIDE;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Guard added to `||pred||_1` wherever it divides.
pub const NORM_GUARD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variation {
    /// `||z||_1 * ||z - pred||_1`
    #[default]
    Paper,
    /// `||z||_1 * ||z/||z||_1 - pred/||pred||_1||_1`
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the OT term.
    pub ot: f64,
    /// Weight of the variation term.
    pub variation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ot: 0.1,
            variation: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub sinkhorn: SinkhornConfig,
    pub variation: Variation,
}

/// Unweighted batch-mean terms of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub count: f64,
    pub ot: f64,
    pub variation: f64,
    pub total: f64,
    pub weights: LossWeights,
    /// Batch mean of `<alpha, pred/||pred||_1>`, the quantity whose gradient the OT term carries.
    pub ot_objective: f64,
    /// Images whose OT term was skipped (no annotations or no predicted mass).
    pub ot_skipped: usize,
    /// Images whose Sinkhorn run hit `max_iters` above tolerance.
    pub ot_unconverged: usize,
}

impl LossReport {
    pub fn weighted_ot(&self) -> f64 {
        self.weights.ot * self.ot
    }

    pub fn weighted_variation(&self) -> f64 {
        self.weights.variation * self.variation
    }
}

/// `c + l1 * ot + l2 * v` with the weights.
pub fn combine(weights: &LossWeights, count: f64, ot: f64, variation: f64) -> f64 {
    count + weights.ot * ot + weights.variation * variation
}

fn check_pair<T: Element>(op: &'static str, g: &Graph<T>, pred: Var, dots: &Tensor<T>) -> Result<()> {
    let ps = g.shape(pred);
    if ps != dots.shape() || ps[1] != 1 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: ps,
            rhs: dots.shape(),
        });
    }
    Ok(())
}

/// Per-sample `sum` of a constant `(n, 1, h, w)` map.
fn sample_sums<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    let [n, c, h, w] = t.shape();
    let per = (c * h * w).max(1);
    let mut out: Vec<f64> = t.data().chunks(per).map(|p| p.iter().map(|v| v.as_f64()).sum()).collect();
    out.resize(n, 0.0);
    out
}

fn per_sample<T: Element>(values: &[f64]) -> Tensor<T> {
    Tensor::from_fn([values.len(), 1, 1, 1], |[s, ..]| T::cast(values[s]))
}

/// Batch mean of `| ||z||_1 - ||pred||_1 |`.
pub fn count_loss<T: Element>(g: &mut Graph<T>, pred: Var, dots: &Tensor<T>) -> Result<Var> {
    check_pair("count_loss", g, pred, dots)?;
    let counts: Vec<f64> = sample_sums(dots).iter().map(|c| -c).collect();
    let s = g.sum_per_sample(pred);
    let diff = g.add_const(s, &per_sample(&counts))?;
    let a = g.abs(diff);
    Ok(g.mean(a))
}

/// Batch mean of the variation term selected by `kind`.
pub fn variation_loss<T: Element>(g: &mut Graph<T>, pred: Var, dots: &Tensor<T>, kind: Variation) -> Result<Var> {
    check_pair("variation_loss", g, pred, dots)?;
    let counts = sample_sums(dots);
    let residual = match kind {
        Variation::Paper => {
            let neg = dots.map(|v| -v);
            g.add_const(pred, &neg)?
        }
        Variation::Normalized => {
            let per = dots.numel() / counts.len().max(1);
            let mut target = dots.clone();
            for (chunk, &c) in target.data_mut().chunks_mut(per.max(1)).zip(&counts) {
                let inv = if c > 0.0 { 1.0 / c } else { 0.0 };
                chunk.iter_mut().for_each(|v| *v = T::cast(-v.as_f64() * inv));
            }
            let s = g.sum_per_sample(pred);
            let guarded = g.add_const(s, &Tensor::full(g.shape(s), T::cast(NORM_GUARD)))?;
            let inv = g.recip(guarded);
            let normalized = g.mul(pred, inv)?;
            g.add_const(normalized, &target)?
        }
    };
    let a = g.abs(residual);
    let l1 = g.sum_per_sample(a);
    let weighted = g.mul_const(l1, per_sample(&counts))?;
    Ok(g.mean(weighted))
}

/// Outcome of the OT term for one batch.
#[derive(Clone, Debug)]
pub struct OtTerm {
    pub loss: Var,
    /// Per-image Sinkhorn result, `None` where the term was skipped.
    pub results: Vec<Option<SinkhornResult>>,
    pub objective: f64,
}

/// Batch mean of `<alpha/||pred|| - <alpha, pred>/||pred||^2, pred>` with `alpha` detached.
///
/// `points[s]` holds image-pixel coordinates for sample `s`; they are divided
/// by the density stride to land on the grid. Images with no points or no
/// predicted mass contribute zero.
pub fn ot_loss<T: Element>(
    g: &mut Graph<T>,
    pred: Var,
    points: &[Vec<[f64; 2]>],
    config: &SinkhornConfig,
) -> Result<OtTerm> {
    let [n, c, h, w] = g.shape(pred);
    if c != 1 || points.len() != n {
        return Err(Error::InvalidArgument(format!(
            "ot_loss needs a (n, 1, h, w) prediction and n point lists; got {:?} and {} lists",
            g.shape(pred),
            points.len()
        )));
    }
    let cells = h * w;
    let values = g.value(pred).to_f64_vec();
    let mut bracket = vec![T::zero(); n * cells];
    let mut results = Vec::with_capacity(n);
    let mut objective = 0.0;
    let stride = DENSITY_STRIDE as f64;
    for s in 0..n {
        let density = &values[s * cells..(s + 1) * cells];
        let mass: f64 = density.iter().sum();
        if points[s].is_empty() || mass <= 0.0 {
            results.push(None);
            continue;
        }
        let grid_points: Vec<[f64; 2]> = points[s].iter().map(|p| [p[0] / stride, p[1] / stride]).collect();
        let problem = SinkhornProblem::from_grid(density, h, w, &grid_points)?;
        let result = sinkhorn(&problem, config)?;
        let norm = mass + NORM_GUARD;
        let inner: f64 = result.alpha.iter().zip(density).map(|(a, z)| a * z).sum();
        objective += inner / norm;
        for (b, a) in bracket[s * cells..(s + 1) * cells].iter_mut().zip(&result.alpha) {
            *b = T::cast(a / norm - inner / (norm * norm));
        }
        results.push(Some(result));
    }
    let bracket = Tensor::new([n, 1, h, w], bracket)?;
    let weighted = g.mul_const(pred, bracket)?;
    let total = g.sum(weighted);
    let loss = g.scale(total, T::cast(1.0 / n.max(1) as f64));
    Ok(OtTerm {
        loss,
        results,
        objective: objective / n.max(1) as f64,
    })
}

/// Weighted sum of count, OT and variation terms, with a report of each.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    pred: Var,
    dots: &Tensor<T>,
    points: &[Vec<[f64; 2]>],
    config: &LossConfig,
) -> Result<(Var, LossReport)> {
    let weights = config.weights;
    if !(weights.ot >= 0.0 && weights.variation >= 0.0) {
        return Err(Error::InvalidArgument(format!("loss weights must be non-negative, got {weights:?}")));
    }
    let lc = count_loss(g, pred, dots)?;
    let ot = ot_loss(g, pred, points, &config.sinkhorn)?;
    let lv = variation_loss(g, pred, dots, config.variation)?;
    let wot = g.scale(ot.loss, T::cast(weights.ot));
    let wv = g.scale(lv, T::cast(weights.variation));
    let partial = g.add(lc, wot)?;
    let total = g.add(partial, wv)?;
    let report = LossReport {
        count: g.scalar(lc).as_f64(),
        ot: g.scalar(ot.loss).as_f64(),
        variation: g.scalar(lv).as_f64(),
        total: g.scalar(total).as_f64(),
        weights,
        ot_objective: ot.objective,
        ot_skipped: ot.results.iter().filter(|r| r.is_none()).count(),
        ot_unconverged: ot.results.iter().flatten().filter(|r| !r.converged).count(),
    };
    Ok((total, report))
}
