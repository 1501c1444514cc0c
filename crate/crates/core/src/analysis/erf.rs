use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{to_gray, Branch};
use crate::data::{generate_scene, Image, SceneConfig};
use crate::error::{Error, Result};
use crate::layers::{Mode, ParamStore, Session};
use crate::model::FfNet;
use crate::tensor::{Element, Shape, Tensor, Var};

/// Probes are synthetic scenes with the default scene parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErfConfig {
    pub probes: usize,
    pub seed: u64,
    /// Side of the square probe scenes.
    pub size: usize,
}

impl Default for ErfConfig {
    fn default() -> Self {
        Self {
            probes: 16,
            seed: 0,
            size: 256,
        }
    }
}

/// Max-normalized mean `|d y_center / d x|` over the input plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfMap {
    pub tag: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ErfMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(v))
    }

    /// Pixels at or above `threshold`.
    pub fn area(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v >= threshold).count()
    }

    /// `[y0, x0, y1, x1]` (inclusive) of the non-zero pixels.
    pub fn support(&self) -> Option<[usize; 4]> {
        let mut b: Option<[usize; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) != 0.0 {
                    b = Some(match b {
                        None => [y, x, y, x],
                        Some([y0, x0, y1, x1]) => [y0.min(y), x0.min(x), y1.max(y), x1.max(x)],
                    });
                }
            }
        }
        b
    }

    pub fn to_image(&self) -> Image {
        to_gray(self.width, self.height, &self.values)
    }
}

/// Receptive-field side of a stack of `(kernel, stride)` layers.
pub fn theoretical_receptive_field(layers: &[(usize, usize)]) -> usize {
    let mut size = 1;
    let mut jump = 1;
    for &(k, s) in layers {
        size += (k - 1) * jump;
        jump *= s;
    }
    size
}

/// `sum_c y[0, c, h/2, w/2]` of a `(1, c, h, w)` output.
fn center_unit<T: Element>(s: &mut Session<'_, T>, y: Var) -> Result<Var> {
    let shape = s.graph.shape(y);
    let (ci, cj) = (shape[2] / 2, shape[3] / 2);
    let mask = Tensor::from_fn(shape, |[_, _, i, j]| if i == ci && j == cj { T::one() } else { T::zero() });
    let picked = s.graph.mul_const(y, mask)?;
    Ok(s.graph.sum(picked))
}

/// ERF of an arbitrary eval-mode function of one image.
///
/// `f` maps a `(1, c, h, w)` input to any `(1, c', h', w')` map; the gradient
/// is taken at the centre cell of that map, summed over channels.
pub fn erf_of<T, F>(store: &ParamStore<T>, probes: &[Tensor<T>], tag: &str, f: F) -> Result<ErfMap>
where
    T: Element,
    F: Fn(&mut Session<'_, T>, Var) -> Result<Var> + Sync,
{
    let first = probes
        .first()
        .ok_or_else(|| Error::InvalidArgument("ERF needs at least one probe".into()))?;
    let [_, _, h, w] = first.shape();
    if let Some(p) = probes.iter().find(|p| p.shape()[0] != 1 || p.shape() != first.shape()) {
        return Err(Error::InvalidArgument(format!(
            "probes must share one (1, c, h, w) shape, got {:?} and {:?}",
            first.shape(),
            p.shape()
        )));
    }
    let grads = probes
        .par_iter()
        .map(|probe| {
            let mut s = Session::new(store, Mode::Eval);
            let x = s.graph.leaf(probe.clone().with_requires_grad(true));
            let y = f(&mut s, x)?;
            let unit = center_unit(&mut s, y)?;
            let g = s.graph.backward(unit)?;
            Ok(g.get(x).map(|t| t.to_f64_vec()).unwrap_or_else(|| vec![0.0; probe.numel()]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![0.0; h * w];
    for g in &grads {
        for (k, v) in g.iter().enumerate() {
            values[k % (h * w)] += v.abs();
        }
    }
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v));
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(ErfMap {
        tag: tag.to_string(),
        height: h,
        width: w,
        values,
    })
}

/// Uniform random images in `[0, 1)`, one stream per probe.
pub fn random_probes<T: Element>(shape: Shape, count: usize, seed: u64) -> Vec<Tensor<T>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64));
            Tensor::uniform(shape, 0.0, 1.0, &mut rng)
        })
        .collect()
}

/// Synthetic scenes of `shape` with the default scene parameters.
pub fn scene_probes<T: Element>(shape: Shape, count: usize, seed: u64) -> Result<Vec<Tensor<T>>> {
    let [_, channels, height, width] = shape;
    let base = SceneConfig {
        width,
        height,
        channels,
        seed,
        ..SceneConfig::default()
    };
    (0..count)
        .map(|i| Ok(generate_scene(&base.for_index(i))?.0.to_tensor()))
        .collect()
}

/// ERF of the centre cell of one branch map entering fusion.
pub fn branch_erf<T: Element>(model: &FfNet<T>, branch: Branch, config: &ErfConfig) -> Result<ErfMap> {
    let shape = [1, model.config.backbone.input_channels, config.size, config.size];
    model.backbone.check_input(shape)?;
    let probes = scene_probes(shape, config.probes, config.seed)?;
    erf_of(&model.store, &probes, &branch.to_string(), |s, x| {
        let trace = model.trace(s, x)?;
        Ok(trace.branches[branch.index()])
    })
}
