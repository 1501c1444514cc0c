use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{numel, Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum KernelLayout {
    /// `(cout, cin, kh, kw)` shared by the whole batch.
    Shared,
    /// `(n * cout, cin, kh, kw)`: sample `s` uses rows `s*cout..(s+1)*cout`.
    PerSample,
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        layout: KernelLayout,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Depthwise {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddConst(usize),
    MulConst(usize, Tensor<T>),
    Scale(usize, T),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Abs(usize),
    Recip(usize),
    SoftmaxChannels(usize),
    GlobalAvgPool(usize),
    ChannelMean(usize),
    Sum(usize),
    SumPerSample(usize),
    Mean(usize),
    L1Norm(usize),
    Concat(Vec<usize>),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    KernelAggregate {
        an: usize,
        asp: usize,
        ai: usize,
        ao: usize,
        bank: usize,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Recording,
    Consumed,
}

/// Single-use tape of recorded operations.
///
/// Nodes are appended in evaluation order, so every operand precedes its
/// consumer and backward is a plain reverse sweep.
pub struct Graph<T: Element = f64> {
    nodes: Vec<Node<T>>,
    tagged: HashMap<usize, Var>,
    state: State,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Element = f64> {
    leaves: HashMap<usize, Tensor<T>>,
    tags: Vec<(usize, Var)>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var.0)
    }

    /// Gradients of tagged leaves, in tag order.
    pub fn tagged(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.tags
            .iter()
            .filter_map(|&(tag, v)| self.leaves.get(&v.0).map(|g| (tag, g)))
    }
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::ShapeMismatch { op, lhs: a, rhs: b }),
        };
    }
    Ok(out)
}

/// Strides of `shape` read through the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: Shape, out: Shape) -> [usize; 4] {
    let dense = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let mut s = [0; 4];
    for d in 0..4 {
        s[d] = if shape[d] == out[d] { dense[d] } else { 0 };
    }
    s
}

fn for_each_broadcast(out: Shape, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut o = 0;
    for i0 in 0..out[0] {
        for i1 in 0..out[1] {
            for i2 in 0..out[2] {
                let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out[3] {
                    f(o, base_a + i3 * sa[3], base_b + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Logistic function evaluated without overflow. Results are kept strictly
/// inside (0, 1): saturated tails map to the nearest representable values.
fn sigmoid<T: Element>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::cast(2.0);
    y.max(T::min_positive_value()).min(hi)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (x * cdf, cdf + x * pdf)
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tagged: HashMap::new(),
            state: State::Recording,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.state == State::Consumed
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        assert!(
            self.state == State::Recording,
            "recording onto a graph consumed by backward"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    /// Registers (once) the leaf identified by `tag`; repeated calls return the same var.
    pub fn tagged_leaf(&mut self, tag: usize, make: impl FnOnce() -> Tensor<T>) -> Var {
        if let Some(&v) = self.tagged.get(&tag) {
            return v;
        }
        let v = self.leaf(make());
        self.tagged.insert(tag, v);
        v
    }

    /// Makes `tag` resolve to an existing var in later [`Graph::tagged_leaf`] calls.
    pub fn bind_tag(&mut self, tag: usize, v: Var) {
        self.tagged.insert(tag, v);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert!(
            self.state == State::Recording,
            "graph values were released by backward"
        );
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape
    }

    /// Value of a single-element var.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data[0]
    }

    // ---------------------------------------------------------------- convolution

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_impl(x, w, b, stride, padding, KernelLayout::Shared)
    }

    /// Convolution where every sample brings its own kernel, stacked as `(n*cout, cin, kh, kw)`.
    pub fn conv2d_per_sample(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv2d_impl(x, w, b, stride, padding, KernelLayout::PerSample)
    }

    fn conv2d_impl(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        layout: KernelLayout,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [n, cin, h, wd] = xs;
        let cout = match layout {
            KernelLayout::Shared => ws[0],
            KernelLayout::PerSample => {
                if n == 0 || !ws[0].is_multiple_of(n) {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d_per_sample",
                        lhs: xs,
                        rhs: ws,
                    });
                }
                ws[0] / n
            }
        };
        if ws[1] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if let Some(b) = b {
            if numel(self.shape(b)) != cout {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ws,
                    rhs: self.shape(b),
                });
            }
        }
        let geom = ConvGeom::new(cin, h, wd, cout, ws[2], ws[3], stride, pad).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "conv2d kernel {ws:?} with stride {stride}, padding {pad} does not fit input {xs:?}"
            ))
        })?;
        let mut out = vec![T::zero(); n * geom.out_len()];
        let mut scratch = Vec::new();
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            let bv = b.map(|b| self.value(b).data.as_slice());
            let wlen = cout * geom.k();
            for s in 0..n {
                let wslice = match layout {
                    KernelLayout::Shared => &wv[..],
                    KernelLayout::PerSample => &wv[s * wlen..(s + 1) * wlen],
                };
                kernels::conv_forward(
                    &xv[s * geom.in_len()..(s + 1) * geom.in_len()],
                    wslice,
                    bv,
                    &geom,
                    &mut out[s * geom.out_len()..(s + 1) * geom.out_len()],
                    &mut scratch,
                );
            }
        }
        let needs = self.needs(x.0) || self.needs(w.0) || b.is_some_and(|b| self.needs(b.0));
        let value = Tensor::new([n, cout, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
                layout,
            },
            needs,
        ))
    }

    /// Transposed convolution with weight `(cin, cout, kh, kw)`; output side `(h-1)*stride - 2*padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [n, cin, h, wd] = xs;
        if ws[0] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let cout = ws[1];
        if let Some(b) = b {
            if numel(self.shape(b)) != cout {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2d bias",
                    lhs: ws,
                    rhs: self.shape(b),
                });
            }
        }
        let geom = kernels::transpose_geom(cin, h, wd, cout, ws[2], ws[3], stride, padding)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "conv_transpose2d kernel {ws:?} with stride {stride}, padding {padding} is invalid for input {xs:?}"
                ))
            })?;
        let out_len = cout * geom.h * geom.w;
        let in_len = cin * h * wd;
        let mut out = vec![T::zero(); n * out_len];
        let mut scratch = Vec::new();
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            let bv = b.map(|b| self.value(b).data.as_slice());
            for s in 0..n {
                kernels::conv_transpose_forward(
                    &xv[s * in_len..(s + 1) * in_len],
                    wv,
                    bv,
                    &geom,
                    &mut out[s * out_len..(s + 1) * out_len],
                    &mut scratch,
                );
            }
        }
        let needs = self.needs(x.0) || self.needs(w.0) || b.is_some_and(|b| self.needs(b.0));
        let value = Tensor::new([n, cout, geom.h, geom.w], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            needs,
        ))
    }

    /// Per-channel convolution with weight `(c, 1, kh, kw)`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [n, c, h, wd] = xs;
        if ws[0] != c || ws[1] != 1 || b.is_some_and(|b| numel(self.shape(b)) != c) {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let geom = ConvGeom::new(c, h, wd, c, ws[2], ws[3], stride, padding).ok_or_else(|| {
            Error::InvalidArgument(format!("depthwise kernel {ws:?} does not fit input {xs:?}"))
        })?;
        let mut out = vec![T::zero(); n * geom.out_len()];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            let bv = b.map(|b| self.value(b).data.as_slice());
            for s in 0..n {
                kernels::depthwise_forward(
                    &xv[s * geom.in_len()..(s + 1) * geom.in_len()],
                    wv,
                    bv,
                    &geom,
                    &mut out[s * geom.out_len()..(s + 1) * geom.out_len()],
                );
            }
        }
        let needs = self.needs(x.0) || self.needs(w.0) || b.is_some_and(|b| self.needs(b.0));
        let value = Tensor::new([n, c, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Depthwise {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            needs,
        ))
    }

    // -------------------------------------------------------------- normalization

    /// Batch normalization. With `stats = None` the batch mean and biased
    /// variance are used (and returned so the caller can update running
    /// statistics); otherwise the given `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xs = self.shape(x);
        let [n, c, h, w] = xs;
        if numel(self.shape(gamma)) != c || numel(self.shape(beta)) != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: xs,
                rhs: self.shape(gamma),
            });
        }
        if let Some((m, v)) = stats {
            if m.len() != c || v.len() != c {
                return Err(Error::InvalidArgument(format!(
                    "batch_norm running statistics of length {} for {c} channels",
                    m.len()
                )));
            }
        }
        let plane = h * w;
        let count = T::cast((n * plane) as f64);
        let xv = &self.value(x).data;
        let (mean, var) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        acc += xv[base..base + plane].iter().copied().sum::<T>();
                    }
                    let mu = acc / count;
                    let mut sq = T::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for &v in &xv[base..base + plane] {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / count;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        let value = Tensor::new(xs, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats: stats.is_none(),
            },
            needs,
        );
        Ok((v, mean, var))
    }

    /// Normalizes over channels independently at every `(n, h, w)` position.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x);
        let [n, c, h, w] = xs;
        if numel(self.shape(gamma)) != c || numel(self.shape(beta)) != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_channels",
                lhs: xs,
                rhs: self.shape(gamma),
            });
        }
        let plane = h * w;
        let cf = T::cast(c as f64);
        let xv = &self.value(x).data;
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * plane];
        for s in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (s * c + ch) * plane + p;
                let mu = (0..c).map(|ch| xv[idx(ch)]).sum::<T>() / cf;
                let var = (0..c).map(|ch| (xv[idx(ch)] - mu).powi(2)).sum::<T>() / cf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[s * plane + p] = is;
                for ch in 0..c {
                    let xh = (xv[idx(ch)] - mu) * is;
                    xhat[idx(ch)] = xh;
                    out[idx(ch)] = g[ch] * xh + bt[ch];
                }
            }
        }
        let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(op, sa, sb)?;
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let data = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![T::zero(); numel(out_shape)];
            let (ta, tb) = (broadcast_strides(sa, out_shape), broadcast_strides(sb, out_shape));
            for_each_broadcast(out_shape, ta, tb, |o, i, j| data[o] = f(av[i], bv[j]));
            data
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok((Tensor::new(out_shape, data)?, needs))
    }

    /// Elementwise sum; either operand may broadcast along unit axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), needs))
    }

    /// `x + c` for a constant tensor `c` of identical shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let xs = self.shape(x);
        if xs != c.shape {
            return Err(Error::ShapeMismatch {
                op: "add_const",
                lhs: xs,
                rhs: c.shape,
            });
        }
        let data = self.value(x).data.iter().zip(&c.data).map(|(&a, &b)| a + b).collect();
        let needs = self.needs(x.0);
        Ok(self.push(Tensor::new(xs, data)?, Op::AddConst(x.0), needs))
    }

    /// `x * c` for a constant tensor `c`, which may broadcast along unit axes of `x`.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let xs = self.shape(x);
        if broadcast_shape("mul_const", xs, c.shape)? != xs {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                lhs: xs,
                rhs: c.shape,
            });
        }
        let xv = &self.value(x).data;
        let mut data = vec![T::zero(); xv.len()];
        for_each_broadcast(xs, broadcast_strides(xs, xs), broadcast_strides(c.shape, xs), |o, i, j| {
            data[o] = xv[i] * c.data[j]
        });
        let needs = self.needs(x.0);
        Ok(self.push(Tensor::new(xs, data)?, Op::MulConst(x.0, c), needs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let needs = self.needs(x.0);
        self.push(t, Op::Scale(x.0, s), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x.0);
        self.push(t, Op::Relu(x.0), needs)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| T::cast(gelu_parts(v.as_f64()).0));
        let needs = self.needs(x.0);
        self.push(t, Op::Gelu(x.0), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let needs = self.needs(x.0);
        self.push(t, Op::Sigmoid(x.0), needs)
    }

    /// `1 / x` elementwise.
    pub fn recip(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| T::one() / v);
        let needs = self.needs(x.0);
        self.push(t, Op::Recip(x.0), needs)
    }

    /// `|x|`, with derivative 0 at the origin.
    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.abs());
        let needs = self.needs(x.0);
        self.push(t, Op::Abs(x.0), needs)
    }

    /// Softmax across the channel axis at every `(n, h, w)`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let [n, c, h, w] = xs;
        let plane = h * w;
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (s * c + ch) * plane + p;
                let m = (0..c).map(|ch| xv[idx(ch)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..c).map(|ch| (xv[idx(ch)] - m).exp()).sum();
                for ch in 0..c {
                    out[idx(ch)] = (xv[idx(ch)] - m).exp() / z;
                }
            }
        }
        let needs = self.needs(x.0);
        self.push(Tensor { shape: xs, data: out, requires_grad: false, grad: None }, Op::SoftmaxChannels(x.0), needs)
    }

    // ----------------------------------------------------------------- reductions

    /// Spatial mean: `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let plane = h * w;
        let inv = T::cast(1.0 / plane as f64);
        let data = self
            .value(x)
            .data
            .chunks(plane.max(1))
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let needs = self.needs(x.0);
        self.push(Tensor { shape: [n, c, 1, 1], data, requires_grad: false, grad: None }, Op::GlobalAvgPool(x.0), needs)
    }

    /// Mean across channels: `(n, c, h, w) -> (n, 1, h, w)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let plane = h * w;
        let inv = T::cast(1.0 / c as f64);
        let xv = &self.value(x).data;
        let mut data = vec![T::zero(); n * plane];
        for s in 0..n {
            let dst = &mut data[s * plane..(s + 1) * plane];
            for ch in 0..c {
                add_into(dst, &xv[(s * c + ch) * plane..(s * c + ch + 1) * plane]);
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let needs = self.needs(x.0);
        self.push(Tensor { shape: [n, 1, h, w], data, requires_grad: false, grad: None }, Op::ChannelMean(x.0), needs)
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), needs)
    }

    /// Per-sample sum: `(n, c, h, w) -> (n, 1, 1, 1)`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let per = (c * h * w).max(1);
        let data = self.value(x).data.chunks(per).map(|p| p.iter().copied().sum()).collect();
        let needs = self.needs(x.0);
        self.push(Tensor { shape: [n, 1, 1, 1], data, requires_grad: false, grad: None }, Op::SumPerSample(x.0), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::cast(t.numel() as f64);
        let needs = self.needs(x.0);
        self.push(Tensor::scalar(m), Op::Mean(x.0), needs)
    }

    /// `sum |x|` as a scalar.
    pub fn l1_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v.abs()).sum();
        let needs = self.needs(x.0);
        self.push(Tensor::scalar(s), Op::L1Norm(x.0), needs)
    }

    // -------------------------------------------------------------------- shaping

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let [n, _, h, w] = self.shape(first);
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.shape(first),
                    rhs: s,
                });
            }
            channels += s[1];
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for s in 0..n {
            for &v in xs {
                let t = self.value(v);
                let per = t.shape[1] * plane;
                data.extend_from_slice(&t.data[s * per..(s + 1) * per]);
            }
        }
        let needs = xs.iter().any(|v| self.needs(v.0));
        let value = Tensor::new([n, channels, h, w], data)?;
        Ok(self.push(value, Op::Concat(xs.iter().map(|v| v.0).collect()), needs))
    }

    /// Affine map of flattened samples: `(n, d, ..) @ (d, e, 1, 1) + (e) -> (n, e, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let n = xs[0];
        let d = xs[1] * xs[2] * xs[3];
        let e = ws[1];
        if ws[0] != d || ws[2] != 1 || ws[3] != 1 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        if let Some(b) = b {
            if numel(self.shape(b)) != e {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: ws,
                    rhs: self.shape(b),
                });
            }
        }
        let mut out = vec![T::zero(); n * e];
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in out.chunks_mut(e.max(1)) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n,
            d,
            e,
            T::one(),
            &self.value(x).data,
            d as isize,
            1,
            &self.value(w).data,
            e as isize,
            1,
            T::one(),
            &mut out,
            e as isize,
            1,
        );
        let needs = self.needs(x.0) || self.needs(w.0) || b.is_some_and(|b| self.needs(b.0));
        let value = Tensor::new([n, e, 1, 1], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            needs,
        ))
    }

    /// Attention-weighted kernel aggregation for dynamic convolution.
    ///
    /// With per-sample attentions over kernels `an (n, K)`, kernel positions
    /// `asp (n, kh*kw)`, input channels `ai (n, cin)` and output channels
    /// `ao (n, cout)`, and a bank of `K` kernels stored as `(K*cout, cin, kh, kw)`,
    /// returns the per-sample kernels
    /// `out[s, o, i, p] = ao[s,o] * ai[s,i] * asp[s,p] * sum_k an[s,k] * bank[k,o,i,p]`
    /// stacked as `(n*cout, cin, kh, kw)`.
    pub fn kernel_aggregate(&mut self, an: Var, asp: Var, ai: Var, ao: Var, bank: Var) -> Result<Var> {
        let bs = self.shape(bank);
        let (sn, ss, si, so) = (self.shape(an), self.shape(asp), self.shape(ai), self.shape(ao));
        let n = sn[0];
        let k = sn[1];
        let (cin, kh, kw) = (bs[1], bs[2], bs[3]);
        let kk = kh * kw;
        let cout = so[1];
        let ok = [ss, si, so].iter().all(|s| s[0] == n && s[2] == 1 && s[3] == 1)
            && sn[2] == 1
            && sn[3] == 1
            && ss[1] == kk
            && si[1] == cin
            && bs[0] == k * cout;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "kernel_aggregate",
                lhs: bs,
                rhs: [n, k, kk, cout],
            });
        }
        let (anv, asv, aiv, aov, bv) = (
            &self.value(an).data,
            &self.value(asp).data,
            &self.value(ai).data,
            &self.value(ao).data,
            &self.value(bank).data,
        );
        let per = cout * cin * kk;
        let mut out = vec![T::zero(); n * per];
        for s in 0..n {
            let dst = &mut out[s * per..(s + 1) * per];
            for kidx in 0..k {
                let a = anv[s * k + kidx];
                dst.iter_mut()
                    .zip(&bv[kidx * per..(kidx + 1) * per])
                    .for_each(|(d, &w)| *d += a * w);
            }
            for o in 0..cout {
                for i in 0..cin {
                    let f = aov[s * cout + o] * aiv[s * cin + i];
                    let base = (o * cin + i) * kk;
                    for p in 0..kk {
                        dst[base + p] *= f * asv[s * kk + p];
                    }
                }
            }
        }
        let needs = [an, asp, ai, ao, bank].iter().any(|v| self.needs(v.0));
        let value = Tensor::new([n * cout, cin, kh, kw], out)?;
        Ok(self.push(
            value,
            Op::KernelAggregate {
                an: an.0,
                asp: asp.0,
                ai: ai.0,
                ao: ao.0,
                bank: bank.0,
            },
            needs,
        ))
    }

    // ------------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Consumes the graph: a second call
    /// (or any further recording) without rebuilding the forward pass fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.state == State::Consumed {
            return Err(Error::StaleGraph);
        }
        let ls = self.nodes[loss.0].value.shape;
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        let mut leaves = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                leaves.insert(i, Tensor::new(node.value.shape, g)?);
            }
        }
        let mut tags: Vec<(usize, Var)> = self.tagged.iter().map(|(&t, &v)| (t, v)).collect();
        tags.sort_unstable();
        self.nodes.clear();
        self.tagged.clear();
        self.state = State::Consumed;
        Ok(Gradients { leaves, tags })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |j: usize| &self.nodes[j].value.data;
        let shape = |j: usize| self.nodes[j].value.shape;
        let needs = |j: usize| self.nodes[j].needs_grad;
        let mut acc = |j: usize, delta: Vec<T>| match &mut grads[j] {
            Some(existing) => add_into(existing, &delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, layout } => {
                let n = shape(*x)[0];
                let (xv, wv) = (val(*x), val(*w));
                let wlen = geom.cout * geom.k();
                let mut dx = needs(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = needs(*w).then(|| vec![T::zero(); wv.len()]);
                let (mut scratch, mut dcols) = (Vec::new(), Vec::new());
                for s in 0..n {
                    let (wslice, dws) = match layout {
                        KernelLayout::Shared => (&wv[..], dw.as_deref_mut()),
                        KernelLayout::PerSample => (
                            &wv[s * wlen..(s + 1) * wlen],
                            dw.as_deref_mut().map(|d| &mut d[s * wlen..(s + 1) * wlen]),
                        ),
                    };
                    kernels::conv_backward(
                        &xv[s * geom.in_len()..(s + 1) * geom.in_len()],
                        wslice,
                        &g[s * geom.out_len()..(s + 1) * geom.out_len()],
                        geom,
                        dx.as_deref_mut().map(|d| &mut d[s * geom.in_len()..(s + 1) * geom.in_len()]),
                        dws,
                        &mut scratch,
                        &mut dcols,
                    );
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut db = vec![T::zero(); geom.cout];
                    let p = geom.p();
                    for s in 0..n {
                        for (o, dbo) in db.iter_mut().enumerate() {
                            let base = s * geom.out_len() + o * p;
                            *dbo += g[base..base + p].iter().copied().sum::<T>();
                        }
                    }
                    acc(b, db);
                }
                if let Some(d) = dx {
                    acc(*x, d);
                }
                if let Some(d) = dw {
                    acc(*w, d);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let [n, cin, h, wd] = shape(*x);
                let in_len = cin * h * wd;
                let out_len = geom.cin * geom.h * geom.w;
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = needs(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = needs(*w).then(|| vec![T::zero(); wv.len()]);
                let mut scratch = Vec::new();
                if dx.is_some() || dw.is_some() {
                    for s in 0..n {
                        kernels::conv_transpose_backward(
                            &xv[s * in_len..(s + 1) * in_len],
                            wv,
                            &g[s * out_len..(s + 1) * out_len],
                            geom,
                            dx.as_deref_mut().map(|d| &mut d[s * in_len..(s + 1) * in_len]),
                            dw.as_deref_mut(),
                            &mut scratch,
                        );
                    }
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let plane = geom.h * geom.w;
                    let mut db = vec![T::zero(); geom.cin];
                    for s in 0..n {
                        for (o, dbo) in db.iter_mut().enumerate() {
                            let base = s * out_len + o * plane;
                            *dbo += g[base..base + plane].iter().copied().sum::<T>();
                        }
                    }
                    acc(b, db);
                }
                if let Some(d) = dx {
                    acc(*x, d);
                }
                if let Some(d) = dw {
                    acc(*w, d);
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let n = shape(*x)[0];
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = needs(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = needs(*w).then(|| vec![T::zero(); wv.len()]);
                for s in 0..n {
                    kernels::depthwise_backward(
                        &xv[s * geom.in_len()..(s + 1) * geom.in_len()],
                        wv,
                        &g[s * geom.out_len()..(s + 1) * geom.out_len()],
                        geom,
                        dx.as_deref_mut().map(|d| &mut d[s * geom.in_len()..(s + 1) * geom.in_len()]),
                        dw.as_deref_mut(),
                    );
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let p = geom.p();
                    let mut db = vec![T::zero(); geom.cout];
                    for s in 0..n {
                        for (o, dbo) in db.iter_mut().enumerate() {
                            let base = s * geom.out_len() + o * p;
                            *dbo += g[base..base + p].iter().copied().sum::<T>();
                        }
                    }
                    acc(b, db);
                }
                if let Some(d) = dx {
                    acc(*x, d);
                }
                if let Some(d) = dw {
                    acc(*w, d);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let [n, c, h, w] = shape(*x);
                let plane = h * w;
                let count = T::cast((n * plane) as f64);
                let gv = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for j in base..base + plane {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            for j in base..base + plane {
                                dx[j] = if *batch_stats {
                                    gv[ch] * inv_std[ch] / count
                                        * (count * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    g[j] * gv[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if needs(*gamma) {
                    acc(*gamma, dgamma);
                }
                if needs(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let [n, c, h, w] = shape(*x);
                let plane = h * w;
                let cf = T::cast(c as f64);
                let gv = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                for s in 0..n {
                    for p in 0..plane {
                        let idx = |ch: usize| (s * c + ch) * plane + p;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for ch in 0..c {
                            let j = idx(ch);
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                            let d = g[j] * gv[ch];
                            sum_d += d;
                            sum_dx += d * xhat[j];
                        }
                        let is = inv_std[s * plane + p];
                        for ch in 0..c {
                            let j = idx(ch);
                            dx[j] = is / cf * (cf * g[j] * gv[ch] - sum_d - xhat[j] * sum_dx);
                        }
                    }
                }
                if needs(*x) {
                    acc(*x, dx);
                }
                if needs(*gamma) {
                    acc(*gamma, dgamma);
                }
                if needs(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let os = out.shape;
                let (sa, sb) = (shape(*a), shape(*b));
                let (ta, tb) = (broadcast_strides(sa, os), broadcast_strides(sb, os));
                let (av, bv) = (val(*a), val(*b));
                let is_mul = matches!(node.op, Op::Mul(..));
                let is_sub = matches!(node.op, Op::Sub(..));
                if needs(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    for_each_broadcast(os, ta, tb, |o, ia, ib| {
                        da[ia] += if is_mul { g[o] * bv[ib] } else { g[o] };
                    });
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for_each_broadcast(os, ta, tb, |o, ia, ib| {
                        db[ib] += if is_mul {
                            g[o] * av[ia]
                        } else if is_sub {
                            -g[o]
                        } else {
                            g[o]
                        };
                    });
                    acc(*b, db);
                }
            }
            Op::AddConst(x) => acc(*x, g.to_vec()),
            Op::MulConst(x, c) => {
                let xs = shape(*x);
                let mut dx = vec![T::zero(); g.len()];
                for_each_broadcast(xs, broadcast_strides(xs, xs), broadcast_strides(c.shape, xs), |o, i, j| {
                    dx[i] = g[o] * c.data[j]
                });
                acc(*x, dx);
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|&v| v * *s).collect()),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, g.iter().zip(xv).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect());
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, g.iter().zip(xv).map(|(&d, &v)| d * T::cast(gelu_parts(v.as_f64()).1)).collect());
            }
            Op::Sigmoid(x) => {
                acc(*x, g.iter().zip(&out.data).map(|(&d, &y)| d * y * (T::one() - y)).collect());
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, g.iter().zip(xv).map(|(&d, &v)| {
                    if v > T::zero() {
                        d
                    } else if v < T::zero() {
                        -d
                    } else {
                        T::zero()
                    }
                }).collect());
            }
            Op::Recip(x) => {
                acc(*x, g.iter().zip(&out.data).map(|(&d, &y)| -d * y * y).collect());
            }
            Op::SoftmaxChannels(x) => {
                let [n, c, h, w] = out.shape;
                let plane = h * w;
                let y = &out.data;
                let mut dx = vec![T::zero(); y.len()];
                for s in 0..n {
                    for p in 0..plane {
                        let idx = |ch: usize| (s * c + ch) * plane + p;
                        let dot: T = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                        for ch in 0..c {
                            dx[idx(ch)] = y[idx(ch)] * (g[idx(ch)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = shape(*x);
                let plane = h * w;
                let inv = T::cast(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(g.len() * plane);
                for &d in g {
                    dx.extend(std::iter::repeat_n(d * inv, plane));
                }
                acc(*x, dx);
            }
            Op::ChannelMean(x) => {
                let [n, c, h, w] = shape(*x);
                let plane = h * w;
                let inv = T::cast(1.0 / c as f64);
                let mut dx = Vec::with_capacity(n * c * plane);
                for s in 0..n {
                    for _ in 0..c {
                        dx.extend(g[s * plane..(s + 1) * plane].iter().map(|&d| d * inv));
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; numel(shape(*x))]),
            Op::SumPerSample(x) => {
                let xs = shape(*x);
                let per = xs[1] * xs[2] * xs[3];
                let mut dx = Vec::with_capacity(numel(xs));
                for &d in g {
                    dx.extend(std::iter::repeat_n(d, per));
                }
                acc(*x, dx);
            }
            Op::Mean(x) => {
                let len = numel(shape(*x));
                acc(*x, vec![g[0] / T::cast(len as f64); len]);
            }
            Op::L1Norm(x) => {
                let xv = val(*x);
                acc(*x, xv.iter().map(|&v| {
                    if v > T::zero() {
                        g[0]
                    } else if v < T::zero() {
                        -g[0]
                    } else {
                        T::zero()
                    }
                }).collect());
            }
            Op::Concat(parts) => {
                let [n, c_total, h, w] = out.shape;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let cp = shape(p)[1];
                    if needs(p) {
                        let mut d = Vec::with_capacity(n * cp * plane);
                        for s in 0..n {
                            let base = (s * c_total + offset) * plane;
                            d.extend_from_slice(&g[base..base + cp * plane]);
                        }
                        acc(p, d);
                    }
                    offset += cp;
                }
            }
            Op::Linear { x, w, b } => {
                let xs = shape(*x);
                let n = xs[0];
                let d = xs[1] * xs[2] * xs[3];
                let e = shape(*w)[1];
                if needs(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(n, e, d, T::one(), g, e as isize, 1, val(*w), 1, e as isize, T::zero(), &mut dx, d as isize, 1);
                    acc(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); d * e];
                    T::gemm(d, n, e, T::one(), val(*x), 1, d as isize, g, e as isize, 1, T::zero(), &mut dw, e as isize, 1);
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut db = vec![T::zero(); e];
                    for row in g.chunks(e.max(1)) {
                        add_into(&mut db, row);
                    }
                    acc(b, db);
                }
            }
            Op::KernelAggregate { an, asp, ai, ao, bank } => {
                let (anv, asv, aiv, aov, bv) = (val(*an), val(*asp), val(*ai), val(*ao), val(*bank));
                let n = shape(*an)[0];
                let k = shape(*an)[1];
                let kk = shape(*asp)[1];
                let cin = shape(*ai)[1];
                let cout = shape(*ao)[1];
                let per = cout * cin * kk;
                let mut dan = vec![T::zero(); anv.len()];
                let mut das = vec![T::zero(); asv.len()];
                let mut dai = vec![T::zero(); aiv.len()];
                let mut dao = vec![T::zero(); aov.len()];
                let mut dbank = needs(*bank).then(|| vec![T::zero(); bv.len()]);
                let mut mixed = vec![T::zero(); per];
                let mut gscaled = vec![T::zero(); per];
                for s in 0..n {
                    mixed.fill(T::zero());
                    for kidx in 0..k {
                        let a = anv[s * k + kidx];
                        mixed.iter_mut().zip(&bv[kidx * per..(kidx + 1) * per]).for_each(|(m, &w)| *m += a * w);
                    }
                    let gs = &g[s * per..(s + 1) * per];
                    for o in 0..cout {
                        let a_o = aov[s * cout + o];
                        for i in 0..cin {
                            let a_i = aiv[s * cin + i];
                            let base = (o * cin + i) * kk;
                            for p in 0..kk {
                                let a_p = asv[s * kk + p];
                                let gm = gs[base + p] * mixed[base + p];
                                dao[s * cout + o] += gm * a_i * a_p;
                                dai[s * cin + i] += gm * a_o * a_p;
                                das[s * kk + p] += gm * a_o * a_i;
                                gscaled[base + p] = gs[base + p] * a_o * a_i * a_p;
                            }
                        }
                    }
                    for kidx in 0..k {
                        let bank_k = &bv[kidx * per..(kidx + 1) * per];
                        dan[s * k + kidx] += gscaled.iter().zip(bank_k).map(|(&a, &b)| a * b).sum::<T>();
                        if let Some(db) = dbank.as_deref_mut() {
                            let a = anv[s * k + kidx];
                            db[kidx * per..(kidx + 1) * per]
                                .iter_mut()
                                .zip(&gscaled)
                                .for_each(|(d, &gv)| *d += gv * a);
                        }
                    }
                }
                for (j, d) in [(*an, dan), (*asp, das), (*ai, dai), (*ao, dao)] {
                    if needs(j) {
                        acc(j, d);
                    }
                }
                if let Some(d) = dbank {
                    acc(*bank, d);
                }
            }
        }
    }
}
