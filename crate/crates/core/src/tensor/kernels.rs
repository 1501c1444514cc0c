//! Convolution numerics on contiguous per-sample slices.
//!
//! Dense convolutions lower to `im2col` + GEMM. Column matrices are laid out
//! with row index `(c, ki, kj)` and column index `(oy, ox)`, matching the
//! `(cout, cin, kh, kw)` weight layout so a weight tensor reads as a
//! `cout x (cin*kh*kw)` row-major matrix.

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.p()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back onto an input-shaped buffer.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.p();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Columns for one sample, borrowing the input directly for 1x1 convolutions.
fn columns<'a, T: Element>(x: &'a [T], g: &ConvGeom, scratch: &'a mut Vec<T>) -> &'a [T] {
    if g.is_pointwise() {
        x
    } else {
        scratch.resize(g.k() * g.p(), T::zero());
        im2col(x, g, scratch);
        scratch
    }
}

/// `out = weight @ cols (+ bias)` for one sample.
pub(crate) fn conv_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    out: &mut [T],
    scratch: &mut Vec<T>,
) {
    let (k, p) = (g.k(), g.p());
    let cols = columns(x, g, scratch);
    T::gemm(
        g.cout,
        k,
        p,
        T::one(),
        weight,
        k as isize,
        1,
        cols,
        p as isize,
        1,
        T::zero(),
        out,
        p as isize,
        1,
    );
    if let Some(b) = bias {
        for (o, &bo) in b.iter().enumerate() {
            out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bo);
        }
    }
}

/// Accumulates `dweight += dout @ cols^T` and, if requested, `dx += col2im(weight^T @ dout)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
    scratch: &mut Vec<T>,
    dcols: &mut Vec<T>,
) {
    let (k, p) = (g.k(), g.p());
    if let Some(dw) = dweight {
        let cols = columns(x, g, scratch);
        T::gemm(
            g.cout,
            p,
            k,
            T::one(),
            dout,
            p as isize,
            1,
            cols,
            1,
            p as isize,
            T::one(),
            dw,
            k as isize,
            1,
        );
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            T::gemm(
                k,
                g.cout,
                p,
                T::one(),
                weight,
                1,
                k as isize,
                dout,
                p as isize,
                1,
                T::one(),
                dx,
                p as isize,
                1,
            );
        } else {
            dcols.resize(k * p, T::zero());
            T::gemm(
                k,
                g.cout,
                p,
                T::one(),
                weight,
                1,
                k as isize,
                dout,
                p as isize,
                1,
                T::zero(),
                dcols,
                p as isize,
                1,
            );
            col2im(dcols, g, dx);
        }
    }
}

/// Geometry of the convolution whose adjoint is the requested transposed
/// convolution: it maps the `(cout_t, oh, ow)` output back to `(cin_t, h, w)`.
pub(crate) fn transpose_geom(
    cin_t: usize,
    h: usize,
    w: usize,
    cout_t: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Option<ConvGeom> {
    if stride == 0 || h == 0 || w == 0 {
        return None;
    }
    let oh = ((h - 1) * stride + kh).checked_sub(2 * pad)?;
    let ow = ((w - 1) * stride + kw).checked_sub(2 * pad)?;
    let g = ConvGeom::new(cout_t, oh, ow, cin_t, kh, kw, stride, pad)?;
    (g.oh == h && g.ow == w).then_some(g)
}

/// Transposed convolution of one sample; `weight` is `(cin_t, cout_t, kh, kw)`.
pub(crate) fn conv_transpose_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    out: &mut [T],
    dcols: &mut Vec<T>,
) {
    // adjoint conv: cin = cout_t (output side), cout = cin_t (input side)
    let (k, p) = (g.k(), g.p());
    dcols.resize(k * p, T::zero());
    T::gemm(
        k,
        g.cout,
        p,
        T::one(),
        weight,
        1,
        k as isize,
        x,
        p as isize,
        1,
        T::zero(),
        dcols,
        p as isize,
        1,
    );
    out.fill(T::zero());
    col2im(dcols, g, out);
    if let Some(b) = bias {
        let plane = g.h * g.w;
        for (o, &bo) in b.iter().enumerate() {
            out[o * plane..(o + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += bo);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let (k, p) = (g.k(), g.p());
    scratch.resize(k * p, T::zero());
    im2col(dout, g, scratch);
    if let Some(dx) = dx {
        T::gemm(
            g.cout,
            k,
            p,
            T::one(),
            weight,
            k as isize,
            1,
            scratch,
            p as isize,
            1,
            T::one(),
            dx,
            p as isize,
            1,
        );
    }
    if let Some(dw) = dweight {
        T::gemm(
            g.cout,
            p,
            k,
            T::one(),
            x,
            p as isize,
            1,
            scratch,
            1,
            p as isize,
            T::one(),
            dw,
            k as isize,
            1,
        );
    }
}

/// Per-channel convolution of one sample; `weight` is `(c, 1, kh, kw)`.
pub(crate) fn depthwise_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    out: &mut [T],
) {
    let kk = g.kh * g.kw;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let wk = &weight[c * kk..(c + 1) * kk];
        let b = bias.map_or(T::zero(), |b| b[c]);
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = b;
                for ki in 0..g.kh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            acc += wk[ki * g.kw + kj] * plane[iy as usize * g.w + ix as usize];
                        }
                    }
                }
                out[(c * g.oh + oy) * g.ow + ox] = acc;
            }
        }
    }
}

pub(crate) fn depthwise_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
) {
    let kk = g.kh * g.kw;
    for c in 0..g.cin {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let d = dout[(c * g.oh + oy) * g.ow + ox];
                for ki in 0..g.kh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let xi = c * g.h * g.w + iy as usize * g.w + ix as usize;
                        let wi = c * kk + ki * g.kw + kj;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xi] += d * weight[wi];
                        }
                        if let Some(dw) = dweight.as_deref_mut() {
                            dw[wi] += d * x[xi];
                        }
                    }
                }
            }
        }
    }
}
