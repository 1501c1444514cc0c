//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function, so it stays
//! independent of every backward rule it is used to validate.

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest elementwise relative error over all checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the two one-sided differences disagree,
    /// i.e. the perturbation straddles a kink (relu, abs).
    pub kinks: usize,
    /// `|a - n| / max(|a|, |n|)` over the whole gradient vector, kinks excluded.
    pub norm_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.kinks * 100 <= self.checked.max(1)
    }

    /// Vector-wise variant for whole-model checks, where many coordinates sit
    /// below the resolution of the finite differences.
    pub fn passes_normwise(&self, tol: f64) -> bool {
        self.norm_rel_error < tol && self.kinks * 100 <= self.checked.max(1)
    }
}

/// Compares analytic gradients of `f` with central differences of step `step`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)` where
/// `floor` is `1e-3` times the largest numeric gradient of that input, so
/// coordinates many orders below the gradient scale are judged absolutely.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).map(|t| t.data().to_vec()).unwrap_or_default())
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let base = eval(inputs)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kinks: 0,
        norm_rel_error: 0.0,
    };
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (t, analytic) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut kink = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * step);
            let fwd = (plus - base) / step;
            let bwd = (base - minus) / step;
            let scale = fwd.abs().max(bwd.abs()).max(1e-8);
            kink.push((fwd - bwd).abs() > 1e-2 * scale && (fwd - bwd).abs() > 1e-6);
            numeric.push(central);
        }
        let floor = 1e-3 * numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-12;
        for i in 0..analytic.len() {
            report.checked += 1;
            if kink[i] {
                report.kinks += 1;
                continue;
            }
            let (a, n) = (analytic[i], numeric[i]);
            diff2 += (a - n) * (a - n);
            a2 += a * a;
            n2 += n * n;
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
    }
    report.norm_rel_error = if diff2 == 0.0 { 0.0 } else { (diff2 / a2.max(n2)).sqrt() };
    Ok(report)
}
