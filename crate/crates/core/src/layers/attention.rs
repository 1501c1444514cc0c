use rand::Rng;

use super::conv::{Conv2d, Linear};
use super::cost::{elems, CostRow};
use super::{Init, Session};
use crate::error::Result;
use crate::tensor::{Element, Shape, Var};

/// `sigmoid(MLP(avgpool(F))) * F` with a two-layer relu MLP.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub name: String,
    pub channels: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new<T: Element, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        Self {
            name: name.to_string(),
            channels,
            fc1: Linear::new(init, &format!("{name}.fc1"), channels, hidden, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, channels, true),
        }
    }

    pub fn gate<T: Element>(&self, s: &mut Session<'_, T>, f: Var) -> Result<Var> {
        let pooled = s.graph.global_avg_pool(f);
        let h = self.fc1.forward(s, pooled)?;
        let h = s.graph.relu(h);
        let a = self.fc2.forward(s, h)?;
        Ok(s.graph.sigmoid(a))
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, f: Var) -> Result<Var> {
        let gate = self.gate(s, f)?;
        s.graph.mul(f, gate)
    }

    pub fn params(&self) -> u64 {
        self.fc1.params() + self.fc2.params()
    }

    pub fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        let n = input[0];
        let macs = elems(input) // pooling
            + (n * self.fc1.din * self.fc1.dout + n * self.fc2.din * self.fc2.dout) as u64
            + (n * self.channels) as u64 // sigmoid
            + elems(input); // gating
        rows.push(CostRow::new(&self.name, "channel_attention", self.params(), macs));
        input
    }
}

/// `sigmoid(conv(mean_c(P))) * P` with a single-channel k x k convolution.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub name: String,
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Element, R: Rng>(init: &mut Init<'_, T, R>, name: &str, kernel: usize) -> Self {
        Self {
            name: name.to_string(),
            conv: Conv2d::new(init, &format!("{name}.conv"), 1, 1, kernel, 1, kernel / 2, true),
        }
    }

    pub fn gate<T: Element>(&self, s: &mut Session<'_, T>, p: Var) -> Result<Var> {
        let mean = s.graph.channel_mean(p);
        let a = self.conv.forward(s, mean)?;
        Ok(s.graph.sigmoid(a))
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, p: Var) -> Result<Var> {
        let gate = self.gate(s, p)?;
        s.graph.mul(p, gate)
    }

    pub fn params(&self) -> u64 {
        self.conv.params()
    }

    pub fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        let plane = [input[0], 1, input[2], input[3]];
        let k = self.conv.kernel as u64;
        let macs = elems(input) // channel mean
            + k * k * elems(plane)
            + elems(plane) // sigmoid
            + elems(input); // gating
        rows.push(CostRow::new(&self.name, "spatial_attention", self.params(), macs));
        input
    }
}
