//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use fflab::layers::{DynamicConvConfig, Mode, ParamId, ParamKind, ParamStore, Session};
use fflab::model::{BackboneConfig, FfNet, FtmConfig, Fusion, ModelConfig};
use fflab::tensor::gradcheck::{self, GradCheckReport};
use fflab::{Graph, Tensor, Var};
use rand::SeedableRng;

/// Direct seven-loop convolution; `w` is `(cout, cin, kh, kw)`.
pub fn loop_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, kh, kw] = w.shape();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor::from_fn([n, cout, oh, ow], |[s, o, i, j]| {
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let y = (i * stride + ki) as isize - pad as isize;
                    let xx = (j * stride + kj) as isize - pad as isize;
                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                        acc += w.get([o, c, ki, kj]) * x.get([s, c, y as usize, xx as usize]);
                    }
                }
            }
        }
        acc
    })
}

/// Scatter definition of transposed convolution; `w` is `(cin, cout, kh, kw)`.
pub fn loop_conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, kh, kw] = w.shape();
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for s in 0..n {
        for c in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    let v = x.get([s, c, i, j]);
                    for o in 0..cout {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < oh && (xx as usize) < ow {
                                    let idx = [s, o, y as usize, xx as usize];
                                    out.set(idx, out.get(idx) + v * w.get([c, o, ki, kj]));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}


/// Finite-difference check over every stored parameter in `ids` plus `extra`
/// inputs. `f` receives an eval-mode session with the parameters bound to
/// the perturbed leaves, and the vars of the extra inputs.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], extra: &[Tensor], f: F) -> GradCheckReport
where
    F: Fn(&mut Session<'_>, &[Var]) -> fflab::Result<Var>,
{
    let mut inputs: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
    inputs.extend_from_slice(extra);
    gradcheck::check(
        &inputs,
        |g: &mut Graph, vars| {
            let mut s = Session::from_graph(std::mem::take(g), store, Mode::Eval);
            for (&id, &v) in ids.iter().zip(vars) {
                s.bind(id, v);
            }
            let out = f(&mut s, &vars[ids.len()..]);
            *g = s.into_graph();
            out
        },
        1e-5,
    )
    .unwrap()
}

/// `sum(y * w)` for a fixed random `w`, so every output coordinate matters.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> fflab::Result<Var> {
    use rand::SeedableRng;
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(g.shape(y), -1.0, 1.0, &mut r);
    let p = g.mul_const(y, w)?;
    Ok(g.sum(p))
}

/// Exact balanced transport cost by enumerating every basic feasible solution.
///
/// A vertex of the transportation polytope is supported on at most
/// `m + k - 1` cells; each candidate support is solved as a square linear
/// system with one redundant marginal dropped.
pub fn lp_transport_cost(a: &[f64], b: &[f64], cost: &[f64]) -> f64 {
    let (m, k) = (a.len(), b.len());
    let basis = m + k - 1;
    let cells = m * k;
    let rhs: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut best = f64::INFINITY;
    let mut pick: Vec<usize> = (0..basis).collect();
    loop {
        // rows: m source constraints, then k - 1 target constraints
        let mut mat = vec![vec![0.0; basis + 1]; basis];
        for (col, &cell) in pick.iter().enumerate() {
            let (i, j) = (cell / k, cell % k);
            mat[i][col] = 1.0;
            if j < k - 1 {
                mat[m + j][col] = 1.0;
            }
        }
        for (r, row) in mat.iter_mut().enumerate() {
            row[basis] = rhs[r];
        }
        if let Some(x) = solve(mat) {
            let last: f64 = pick
                .iter()
                .zip(&x)
                .filter(|(&cell, _)| cell % k == k - 1)
                .map(|(_, v)| v)
                .sum();
            if x.iter().all(|&v| v >= -1e-12) && (last - b[k - 1]).abs() < 1e-9 {
                let c: f64 = pick.iter().zip(&x).map(|(&cell, v)| cost[cell] * v).sum();
                best = best.min(c);
            }
        }
        // next combination
        let mut i = basis;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if pick[i] < cells - basis + i {
                pick[i] += 1;
                for t in i + 1..basis {
                    pick[t] = pick[t - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Gauss-Jordan on an augmented square system; `None` when singular.
fn solve(mut mat: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = mat.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| mat[x][col].abs().total_cmp(&mat[y][col].abs()))?;
        if mat[piv][col].abs() < 1e-12 {
            return None;
        }
        mat.swap(col, piv);
        let p = mat[col][col];
        mat[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = mat[r][col];
                if f != 0.0 {
                    for c in col..=n {
                        mat[r][c] -= f * mat[col][c];
                    }
                }
            }
        }
    }
    Some(mat.iter().map(|row| row[n]).collect())
}

/// Random probability vector with every entry at least `floor / len`.
pub fn simplex(len: usize, floor: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| floor / len as f64 + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Under 5k parameters: 2/4/4/4 backbone, FTM out 2, two 3x3 base kernels.
pub fn micro(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stem_channels: 2,
            stage_channels: [4, 4, 4],
            ..BackboneConfig::toy()
        },
        ftm: FtmConfig {
            out_channels: Some([2, 2, 2]),
            dynamic: DynamicConvConfig {
                kernels: 2,
                min_hidden: 2,
                ..DynamicConvConfig::default()
            },
            channel_reduction: 2,
            spatial_kernel: 3,
            ..FtmConfig::default()
        },
        fusion,
        add_width: None,
        head_bias_init: 0.1,
        seed: 11,
    }
}

pub fn param_total(m: &FfNet) -> usize {
    m.store
        .iter()
        .filter(|(_, p)| p.kind != ParamKind::Buffer)
        .map(|(_, p)| p.value.numel())
        .sum()
}

/// Moves every batch-norm affine and running statistic off its initial value.
pub fn perturb_norms(store: &mut ParamStore, seed: u64) {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.contains(".bn.") || p.name.contains(".norm."))
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    for (id, name) in ids {
        let shape = store.get(id).shape();
        let (lo, hi) = if name.ends_with("var") || name.ends_with("gamma") { (0.5, 1.5) } else { (-0.3, 0.3) };
        *store.get_mut(id) = Tensor::uniform(shape, lo, hi, &mut r);
    }
}
