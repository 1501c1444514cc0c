use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropic regularization in squared grid units.
    pub eps: f64,
    pub max_iters: usize,
    /// Stop once the L1 marginal error falls below this.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            eps: 10.0,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// Balanced transport between `a` (length `m`) and `b` (length `k`).
#[derive(Clone, Debug)]
pub struct SinkhornProblem {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Row-major `m x k`.
    pub cost: Vec<f64>,
}

impl SinkhornProblem {
    pub fn new(a: Vec<f64>, b: Vec<f64>, cost: Vec<f64>) -> Result<Self> {
        if b.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if a.is_empty() || cost.len() != a.len() * b.len() {
            return Err(Error::InvalidArgument(format!(
                "cost has {} entries for {} sources and {} targets",
                cost.len(),
                a.len(),
                b.len()
            )));
        }
        let bad = |v: &[f64]| v.iter().any(|&x| !x.is_finite() || x < 0.0);
        if bad(&a) || bad(&b) || bad(&cost) {
            return Err(Error::InvalidArgument(
                "weights and costs must be finite and non-negative".into(),
            ));
        }
        for (name, w) in [("source", &a), ("target", &b)] {
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("{name} weights sum to {total}, not 1")));
            }
        }
        Ok(Self { a, b, cost })
    }

    /// Density on an `h x w` grid against points given in grid units.
    ///
    /// Cell `(i, j)` is centred at `(j + 0.5, i + 0.5)`; costs are squared
    /// Euclidean distances. The density is normalized to unit mass and every
    /// point carries mass `1/k`.
    pub fn from_grid(density: &[f64], h: usize, w: usize, points: &[[f64; 2]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if density.len() != h * w {
            return Err(Error::InvalidArgument(format!(
                "density of length {} for a {h}x{w} grid",
                density.len()
            )));
        }
        let total: f64 = density.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("density has no mass to transport".into()));
        }
        let a = density.iter().map(|&v| v / total).collect();
        let b = vec![1.0 / points.len() as f64; points.len()];
        Self::new(a, b, grid_cost(h, w, points))
    }

    pub fn m(&self) -> usize {
        self.a.len()
    }

    pub fn k(&self) -> usize {
        self.b.len()
    }
}

/// Squared distances from the `h * w` cell centres to each point, row-major `(cell, point)`.
pub fn grid_cost(h: usize, w: usize, points: &[[f64; 2]]) -> Vec<f64> {
    let mut cost = Vec::with_capacity(h * w * points.len());
    for i in 0..h {
        for j in 0..w {
            let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
            for p in points {
                let (dx, dy) = (p[0] - cx, p[1] - cy);
                cost.push(dx * dx + dy * dy);
            }
        }
    }
    cost
}

/// Entropic transport plan and potentials.
///
/// The plan is `pi[i][j] = a[i] * b[j] * exp((alpha[i] + beta[j] - cost[i][j]) / eps)`,
/// so both potentials stay finite even where `a` vanishes.
#[derive(Clone, Debug)]
pub struct SinkhornResult {
    /// Source-side (grid) potential, length `m`.
    pub alpha: Vec<f64>,
    /// Target-side (point) potential, length `k`.
    pub beta: Vec<f64>,
    /// Row-major `m x k`.
    pub plan: Vec<f64>,
    pub iterations: usize,
    /// L1 error of the target marginal after the last iteration.
    pub marginal_error: f64,
    /// Marginal error after every iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl SinkhornResult {
    /// `<cost, plan>`.
    pub fn transport_cost(&self, problem: &SinkhornProblem) -> f64 {
        self.plan.iter().zip(&problem.cost).map(|(p, c)| p * c).sum()
    }

    /// Dual objective `<alpha, a> + <beta, b>`, the entropic OT value at convergence.
    pub fn dual_value(&self, problem: &SinkhornProblem) -> f64 {
        dot(&self.alpha, &problem.a) + dot(&self.beta, &problem.b)
    }

    pub fn mass(&self) -> f64 {
        self.plan.iter().sum()
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Scalings beyond this are folded into the potentials.
const ABSORB: f64 = 1e50;

struct State<'p> {
    p: &'p SinkhornProblem,
    eps: f64,
    f: Vec<f64>,
    g: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    /// `exp((f_i + g_j - c_ij) / eps)`
    kernel: Vec<f64>,
}

impl State<'_> {
    fn rebuild_kernel(&mut self) {
        let k = self.p.k();
        for i in 0..self.p.m() {
            for j in 0..k {
                self.kernel[i * k + j] = ((self.f[i] + self.g[j] - self.p.cost[i * k + j]) / self.eps).exp();
            }
        }
    }

    fn absorb(&mut self) {
        for (f, u) in self.f.iter_mut().zip(&mut self.u) {
            *f += self.eps * u.ln();
            *u = 1.0;
        }
        for (g, v) in self.g.iter_mut().zip(&mut self.v) {
            *g += self.eps * v.ln();
            *v = 1.0;
        }
        self.rebuild_kernel();
    }

    /// Exact log-domain update of `g` then `f`, used when scalings under- or overflow.
    fn log_step(&mut self) {
        let (m, k, eps) = (self.p.m(), self.p.k(), self.eps);
        let cost = &self.p.cost;
        for j in 0..k {
            let terms = (0..m)
                .filter(|&i| self.p.a[i] > 0.0)
                .map(|i| self.p.a[i].ln() + (self.f[i] - cost[i * k + j]) / eps);
            self.g[j] = -eps * logsumexp(terms);
        }
        for i in 0..m {
            let terms = (0..k).map(|j| self.p.b[j].ln() + (self.g[j] - cost[i * k + j]) / eps);
            self.f[i] = -eps * logsumexp(terms);
        }
        self.u.fill(1.0);
        self.v.fill(1.0);
        self.rebuild_kernel();
    }

    /// One scaling sweep: target side then source side. Returns false on overflow.
    fn scale_step(&mut self) -> bool {
        let (m, k) = (self.p.m(), self.p.k());
        let mut col = vec![0.0; k];
        for i in 0..m {
            let w = self.p.a[i] * self.u[i];
            if w == 0.0 {
                continue;
            }
            for (c, &kij) in col.iter_mut().zip(&self.kernel[i * k..(i + 1) * k]) {
                *c += w * kij;
            }
        }
        for (v, c) in self.v.iter_mut().zip(&col) {
            *v = 1.0 / c;
        }
        for i in 0..m {
            let row = &self.kernel[i * k..(i + 1) * k];
            let s: f64 = row
                .iter()
                .zip(&self.v)
                .zip(&self.p.b)
                .map(|((&kij, &v), &b)| kij * v * b)
                .sum();
            self.u[i] = 1.0 / s;
        }
        self.u.iter().chain(&self.v).all(|x| x.is_finite() && *x > 0.0)
    }

    fn needs_absorb(&self) -> bool {
        self.u
            .iter()
            .chain(&self.v)
            .any(|&x| !(1.0 / ABSORB..=ABSORB).contains(&x))
    }

    /// `sum_j |b_j - column_j(plan)|` for the current scalings.
    fn target_error(&self) -> f64 {
        let (m, k) = (self.p.m(), self.p.k());
        let mut col = vec![0.0; k];
        for i in 0..m {
            let w = self.p.a[i] * self.u[i];
            for (c, &kij) in col.iter_mut().zip(&self.kernel[i * k..(i + 1) * k]) {
                *c += w * kij;
            }
        }
        col.iter()
            .zip(&self.v)
            .zip(&self.p.b)
            .map(|((c, v), b)| (c * v * b - b).abs())
            .sum()
    }
}

fn logsumexp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Stabilized Sinkhorn iterations.
///
/// Runs scaling updates on a kernel re-centred by the current potentials,
/// absorbing large scalings into the potentials and falling back to an
/// exact log-domain sweep whenever a scaling is not finite. Iterates are
/// mathematically those of log-domain Sinkhorn, so the marginal error is
/// non-increasing.
pub fn sinkhorn(problem: &SinkhornProblem, config: &SinkhornConfig) -> Result<SinkhornResult> {
    if config.eps <= 0.0 || !config.eps.is_finite() {
        return Err(Error::InvalidArgument(format!("sinkhorn eps must be positive, got {}", config.eps)));
    }
    let (m, k) = (problem.m(), problem.k());
    // start from the c-transform of g = 0 so every kernel row peaks at 1
    let f: Vec<f64> = (0..m)
        .map(|i| problem.cost[i * k..(i + 1) * k].iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let mut st = State {
        p: problem,
        eps: config.eps,
        f,
        g: vec![0.0; k],
        u: vec![1.0; m],
        v: vec![1.0; k],
        kernel: vec![0.0; m * k],
    };
    st.rebuild_kernel();

    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iters.max(1) {
        if !st.scale_step() {
            st.log_step();
        } else if st.needs_absorb() {
            st.absorb();
        }
        let err = st.target_error();
        history.push(err);
        if err < config.tol {
            converged = true;
            break;
        }
    }
    st.absorb();
    let mut plan = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            plan[i * k + j] = problem.a[i] * problem.b[j] * st.kernel[i * k + j];
        }
    }
    Ok(SinkhornResult {
        alpha: st.f,
        beta: st.g,
        plan,
        iterations: history.len(),
        marginal_error: *history.last().unwrap_or(&f64::INFINITY),
        history,
        converged,
    })
}
