use serde::{Deserialize, Serialize};

use crate::layers::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Each step first shrinks decayed weights by `1 - lr * weight_decay`, then
/// applies the bias-corrected Adam update. Biases and normalization
/// parameters ([`ParamKind::NoDecay`]) skip the shrink; buffers are untouched.
#[derive(Clone, Debug)]
pub struct AdamW<T: Element = f64> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; parameters missing from `grads` are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, &Tensor<T>)]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::cast(c.beta1), T::cast(c.beta2));
        let (ob1, ob2) = (T::cast(1.0 - c.beta1), T::cast(1.0 - c.beta2));
        let lr = T::cast(c.lr);
        let eps = T::cast(c.eps);
        let (ibc1, ibc2) = (T::cast(1.0 / bc1), T::cast(1.0 / bc2));
        let shrink = T::cast(1.0 - c.lr * c.weight_decay);

        let mut by_index: Vec<Option<&[T]>> = vec![None; self.m.len()];
        for (id, g) in grads {
            by_index[id.index()] = Some(g.data());
        }
        let ids: Vec<(ParamId, ParamKind)> = store.iter().map(|(id, p)| (id, p.kind)).collect();
        for (id, kind) in ids {
            if kind == ParamKind::Buffer {
                continue;
            }
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = store.get_mut(id).data_mut();
            if kind == ParamKind::Weight {
                value.iter_mut().for_each(|p| *p *= shrink);
            }
            let grad = by_index[i];
            for k in 0..value.len() {
                let g = grad.map_or(T::zero(), |g| g[k]);
                m[k] = b1 * m[k] + ob1 * g;
                v[k] = b2 * v[k] + ob2 * g * g;
                let mhat = m[k] * ibc1;
                let vhat = v[k] * ibc2;
                value[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
