use rand::Rng;

use super::cost::{elems, CostRow};
use super::{Init, ParamId, ParamKind, Session};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Var};

fn out_dim(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad).saturating_sub(k) / stride + 1
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = init.he(format!("{name}.weight"), [cout, cin, kernel, kernel], cin * kernel * kernel);
        let bias = bias.then(|| init.constant(format!("{name}.bias"), [1, cout, 1, 1], 0.0, ParamKind::NoDecay));
        Self {
            name: name.to_string(),
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> u64 {
        (self.kernel * self.kernel * self.cin * self.cout + self.bias.map_or(0, |_| self.cout)) as u64
    }

    pub fn out_shape(&self, input: Shape) -> Shape {
        [
            input[0],
            self.cout,
            out_dim(input[2], self.kernel, self.stride, self.pad),
            out_dim(input[3], self.kernel, self.stride, self.pad),
        ]
    }

    pub fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        let out = self.out_shape(input);
        let macs = (self.kernel * self.kernel * self.cin) as u64 * elems(out);
        rows.push(CostRow::new(&self.name, "conv2d", self.params(), macs));
        out
    }
}

/// Transposed convolution with weight layout `(cin, cout, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        // each output pixel receives about (k/s)^2 * cin taps
        let fan = cin * (kernel * kernel / (stride * stride)).max(1);
        let weight = init.he(format!("{name}.weight"), [cin, cout, kernel, kernel], fan);
        let bias = bias.then(|| init.constant(format!("{name}.bias"), [1, cout, 1, 1], 0.0, ParamKind::NoDecay));
        Self {
            name: name.to_string(),
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv_transpose2d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> u64 {
        (self.kernel * self.kernel * self.cin * self.cout + self.bias.map_or(0, |_| self.cout)) as u64
    }

    pub fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        let grow = |d: usize| ((d - 1) * self.stride + self.kernel).saturating_sub(2 * self.pad);
        let out = [input[0], self.cout, grow(input[2]), grow(input[3])];
        // every input pixel scatters a k x k x cout patch
        let macs = (self.kernel * self.kernel * self.cout) as u64 * elems(input);
        rows.push(CostRow::new(&self.name, "conv_transpose2d", self.params(), macs));
        out
    }
}

/// Per-channel convolution with weight layout `(c, 1, k, k)`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub channels: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        kernel: usize,
        bias: bool,
    ) -> Self {
        let weight = init.he(format!("{name}.weight"), [channels, 1, kernel, kernel], kernel * kernel);
        let bias = bias.then(|| init.constant(format!("{name}.bias"), [1, channels, 1, 1], 0.0, ParamKind::NoDecay));
        Self {
            name: name.to_string(),
            weight,
            bias,
            channels,
            kernel,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.depthwise_conv2d(x, w, b, 1, self.pad)
    }

    pub fn params(&self) -> u64 {
        (self.kernel * self.kernel * self.channels + self.bias.map_or(0, |_| self.channels)) as u64
    }

    pub fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        let out = [
            input[0],
            self.channels,
            out_dim(input[2], self.kernel, 1, self.pad),
            out_dim(input[3], self.kernel, 1, self.pad),
        ];
        let macs = (self.kernel * self.kernel) as u64 * elems(out);
        rows.push(CostRow::new(&self.name, "depthwise_conv2d", self.params(), macs));
        out
    }
}

/// Affine map on flattened samples; weight layout `(d, e, 1, 1)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let weight = init.he(format!("{name}.weight"), [din, dout, 1, 1], din);
        let bias = bias.then(|| init.constant(format!("{name}.bias"), [1, dout, 1, 1], 0.0, ParamKind::NoDecay));
        Self {
            name: name.to_string(),
            weight,
            bias,
            din,
            dout,
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x);
        if shape[1] * shape[2] * shape[3] != self.din {
            return Err(Error::InvalidArgument(format!(
                "{} expects {} features per sample, input is {shape:?}",
                self.name, self.din
            )));
        }
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.linear(x, w, b)
    }

    pub fn params(&self) -> u64 {
        (self.din * self.dout + self.bias.map_or(0, |_| self.dout)) as u64
    }

    pub fn account(&self, batch: usize, rows: &mut Vec<CostRow>) -> Shape {
        rows.push(CostRow::new(
            &self.name,
            "linear",
            self.params(),
            (batch * self.din * self.dout) as u64,
        ));
        [batch, self.dout, 1, 1]
    }
}
