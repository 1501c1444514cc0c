use rand::Rng;

use super::cost::{elems, CostRow};
use super::{Init, Mode, ParamId, ParamKind, Session};
use crate::error::Result;
use crate::tensor::{Element, Shape, Var};

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Element, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            name: name.to_string(),
            gamma: init.constant(format!("{name}.gamma"), shape, 1.0, ParamKind::NoDecay),
            beta: init.constant(format!("{name}.beta"), shape, 0.0, ParamKind::NoDecay),
            running_mean: init.constant(format!("{name}.running_mean"), shape, 0.0, ParamKind::Buffer),
            running_var: init.constant(format!("{name}.running_var"), shape, 1.0, ParamKind::Buffer),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Train mode normalizes with batch statistics and queues an update of
    /// the running statistics (unbiased variance); eval mode uses the running
    /// statistics as constants.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let eps = T::cast(self.eps);
        match s.mode() {
            Mode::Eval => {
                let mean = s.store().get(self.running_mean).data().to_vec();
                let var = s.store().get(self.running_var).data().to_vec();
                let (y, _, _) = s.graph.batch_norm(x, gamma, beta, Some((&mean, &var)), eps)?;
                Ok(y)
            }
            Mode::Train => {
                let [n, _, h, w] = s.graph.shape(x);
                let (y, mean, var) = s.graph.batch_norm(x, gamma, beta, None, eps)?;
                let count = (n * h * w) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = T::cast(self.momentum);
                let keep = T::one() - m;
                let rm: Vec<T> = s
                    .store()
                    .get(self.running_mean)
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| keep * r + m * b)
                    .collect();
                let rv: Vec<T> = s
                    .store()
                    .get(self.running_var)
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| keep * r + m * b * T::cast(unbias))
                    .collect();
                s.push_update(self.running_mean, rm);
                s.push_update(self.running_var, rv);
                Ok(y)
            }
        }
    }

    pub fn params(&self) -> u64 {
        2 * self.channels as u64
    }

    pub fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        rows.push(CostRow::new(&self.name, "batchnorm2d", self.params(), elems(input)));
        input
    }
}

/// Channel-wise layer normalization at every spatial position.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNorm2d {
    pub fn new<T: Element, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            name: name.to_string(),
            gamma: init.constant(format!("{name}.gamma"), shape, 1.0, ParamKind::NoDecay),
            beta: init.constant(format!("{name}.beta"), shape, 0.0, ParamKind::NoDecay),
            channels,
            eps: 1e-6,
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        s.graph.layer_norm_channels(x, gamma, beta, T::cast(self.eps))
    }

    pub fn params(&self) -> u64 {
        2 * self.channels as u64
    }

    pub fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        rows.push(CostRow::new(&self.name, "layernorm2d", self.params(), elems(input)));
        input
    }
}
