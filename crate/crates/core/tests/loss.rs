use fflab::loss::{
    combine, count_loss, grid_cost, ot_loss, sinkhorn, total_loss, variation_loss, LossConfig, LossWeights,
    SinkhornConfig, SinkhornProblem, Variation, NORM_GUARD,
};
use fflab::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{lp_transport_cost, simplex};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tight(eps: f64) -> SinkhornConfig {
    SinkhornConfig {
        eps,
        max_iters: 200_000,
        tol: 1e-12,
    }
}

/// Squared distances between random points in a 4x4 box.
fn random_instance(m: usize, k: usize, r: &mut ChaCha8Rng) -> SinkhornProblem {
    let src: Vec<[f64; 2]> = (0..m).map(|_| [r.random::<f64>() * 4.0, r.random::<f64>() * 4.0]).collect();
    let dst: Vec<[f64; 2]> = (0..k).map(|_| [r.random::<f64>() * 4.0, r.random::<f64>() * 4.0]).collect();
    let cost = src
        .iter()
        .flat_map(|s| dst.iter().map(move |d| (s[0] - d[0]).powi(2) + (s[1] - d[1]).powi(2)))
        .collect();
    SinkhornProblem::new(simplex(m, 0.2, r), simplex(k, 0.2, r), cost).unwrap()
}

fn marginals(plan: &[f64], m: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = (0..m).map(|i| plan[i * k..(i + 1) * k].iter().sum()).collect();
    let cols = (0..k).map(|j| (0..m).map(|i| plan[i * k + j]).sum()).collect();
    (rows, cols)
}

fn l1(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()
}

#[test]
fn sinkhorn_single_pair_moves_everything() {
    let p = SinkhornProblem::new(vec![1.0], vec![1.0], vec![2.5]).unwrap();
    let r = sinkhorn(&p, &SinkhornConfig::default()).unwrap();
    assert!((r.plan[0] - 1.0).abs() < 1e-12);
    assert!((r.transport_cost(&p) - 2.5).abs() < 1e-12);
    assert!(r.converged);
}

#[test]
fn sinkhorn_matching_supports_stay_put() {
    let pts: [[f64; 2]; 4] = [[0.5, 0.5], [1.5, 0.5], [0.5, 1.5], [1.5, 1.5]];
    let cost = pts
        .iter()
        .flat_map(|s| pts.iter().map(move |d| (s[0] - d[0]).powi(2) + (s[1] - d[1]).powi(2)))
        .collect::<Vec<_>>();
    let w = vec![0.25; 4];
    let p = SinkhornProblem::new(w.clone(), w, cost).unwrap();
    let r = sinkhorn(&p, &tight(0.01)).unwrap();
    assert!(r.transport_cost(&p) < 1e-3, "cost {}", r.transport_cost(&p));
    assert!(lp_transport_cost(&p.a, &p.b, &p.cost).abs() < 1e-12);
    for i in 0..4 {
        assert!((r.plan[i * 4 + i] - 0.25).abs() < 1e-6);
    }
}

#[test]
fn sinkhorn_suite_matches_lp_at_small_eps() {
    let mut r = rng(7);
    for case in 0..50 {
        let (m, k) = if case % 2 == 0 { (3, 4) } else { (4, 4) };
        let p = random_instance(m, k, &mut r);
        let res = sinkhorn(&p, &tight(0.01)).unwrap();
        let exact = lp_transport_cost(&p.a, &p.b, &p.cost);
        let got = res.transport_cost(&p);
        assert!(
            (got - exact).abs() <= 0.02 * exact,
            "case {case}: entropic {got} vs exact {exact}"
        );
        assert!(res.marginal_error < 1e-6, "case {case}: error {}", res.marginal_error);
        assert!((res.mass() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn sinkhorn_random_3x4_at_eps_005() {
    let mut r = rng(11);
    let p = random_instance(3, 4, &mut r);
    let res = sinkhorn(&p, &tight(0.05)).unwrap();
    let exact = lp_transport_cost(&p.a, &p.b, &p.cost);
    assert!((res.transport_cost(&p) - exact).abs() <= 0.02 * exact);
}

#[test]
fn sinkhorn_eps_sweep_approaches_lp() {
    let mut r = rng(3);
    for _ in 0..10 {
        let p = random_instance(4, 4, &mut r);
        let exact = lp_transport_cost(&p.a, &p.b, &p.cost);
        let gaps: Vec<f64> = [1.0, 0.1, 0.01]
            .iter()
            .map(|&eps| {
                let res = sinkhorn(&p, &tight(eps)).unwrap();
                let c = res.transport_cost(&p);
                // feasible plans never beat the optimum
                assert!(c >= exact - 1e-9);
                c - exact
            })
            .collect();
        assert!(gaps[2] <= gaps[1] + 1e-12 && gaps[1] <= gaps[0] + 1e-12, "gaps {gaps:?}");
        assert!(gaps[2] < 0.05 * exact.max(1e-3));
    }
}

#[test]
fn sinkhorn_plan_meets_both_marginals() {
    let mut r = rng(5);
    let p = random_instance(4, 3, &mut r);
    let res = sinkhorn(&p, &tight(0.5)).unwrap();
    let (rows, cols) = marginals(&res.plan, 4, 3);
    assert!(l1(&rows, &p.a) < 1e-12);
    assert!(l1(&cols, &p.b) < 1e-9);
    assert!(res.plan.iter().all(|&v| v >= 0.0));
}

#[test]
fn sinkhorn_dual_gap_is_the_entropy_term() {
    let mut r = rng(13);
    let p = random_instance(4, 4, &mut r);
    let eps = 0.3;
    let res = sinkhorn(&p, &tight(eps)).unwrap();
    let kl: f64 = (0..4)
        .flat_map(|i| (0..4).map(move |j| (i, j)))
        .map(|(i, j)| {
            let pi = res.plan[i * 4 + j];
            pi * (pi / (p.a[i] * p.b[j])).ln()
        })
        .sum();
    let gap = res.dual_value(&p) - res.transport_cost(&p);
    assert!((gap - eps * kl).abs() < 1e-9, "gap {gap} vs {}", eps * kl);
}

#[test]
fn sinkhorn_empty_target_is_reported() {
    assert!(matches!(
        SinkhornProblem::from_grid(&[1.0; 4], 2, 2, &[]),
        Err(Error::EmptyTarget)
    ));
    assert!(matches!(SinkhornProblem::new(vec![1.0], vec![], vec![]), Err(Error::EmptyTarget)));
}

#[test]
fn sinkhorn_rejects_unnormalized_weights() {
    assert!(SinkhornProblem::new(vec![0.5, 0.4], vec![1.0], vec![0.0, 1.0]).is_err());
}

#[test]
fn sinkhorn_is_deterministic() {
    let mut r = rng(21);
    let p = random_instance(4, 4, &mut r);
    let x = sinkhorn(&p, &tight(0.05)).unwrap();
    let y = sinkhorn(&p, &tight(0.05)).unwrap();
    assert_eq!(x.plan, y.plan);
    assert_eq!(x.alpha, y.alpha);
}

#[test]
fn sinkhorn_survives_tiny_eps_on_a_grid() {
    let mut r = rng(17);
    let density: Vec<f64> = (0..64).map(|_| r.random::<f64>()).collect();
    let points: Vec<[f64; 2]> = (0..6).map(|_| [r.random::<f64>() * 8.0, r.random::<f64>() * 8.0]).collect();
    let p = SinkhornProblem::from_grid(&density, 8, 8, &points).unwrap();
    let res = sinkhorn(&p, &tight(0.01)).unwrap();
    assert!(res.alpha.iter().chain(&res.beta).all(|v| v.is_finite()));
    assert!(res.marginal_error < 1e-6);
    assert!((res.mass() - 1.0).abs() < 1e-9);
}

#[test]
fn grid_cost_uses_cell_centres() {
    let c = grid_cost(2, 3, &[[2.5, 1.5]]);
    // cell (1, 2) has centre (2.5, 1.5)
    assert_eq!(c[5], 0.0);
    assert_eq!(c[0], 4.0 + 1.0);
    assert_eq!(c.iter().filter(|&&v| v == 0.0).count(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sinkhorn_error_never_increases(seed in 0u64..10_000, m in 1usize..6, k in 1usize..6, eps in 0.01f64..5.0) {
        let mut r = rng(seed);
        let p = random_instance(m, k, &mut r);
        let res = sinkhorn(&p, &SinkhornConfig { eps, max_iters: 500, tol: 1e-6 }).unwrap();
        for w in res.history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-15, "history {:?}", res.history);
        }
        prop_assert!((res.mass() - 1.0).abs() < 1e-9);
        prop_assert!(res.plan.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sinkhorn_converges_within_500(seed in 0u64..10_000, m in 1usize..6, k in 1usize..6, eps in 0.5f64..20.0) {
        let mut r = rng(seed);
        let p = random_instance(m, k, &mut r);
        let res = sinkhorn(&p, &SinkhornConfig { eps, max_iters: 500, tol: 1e-6 }).unwrap();
        prop_assert!(res.converged && res.marginal_error < 1e-6);
    }
}

// ------------------------------------------------------------------- count / variation / total

fn map(values: &[f64], n: usize, h: usize, w: usize) -> Tensor {
    Tensor::new([n, 1, h, w], values.to_vec()).unwrap()
}

fn eval(
    pred: &Tensor,
    f: impl FnOnce(&mut Graph<f64>, fflab::Var) -> fflab::Result<fflab::Var>,
) -> f64 {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(pred.clone());
    let out = f(&mut g, p).unwrap();
    g.scalar(out)
}

fn random_pair(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> (Tensor, Tensor) {
    let z = Tensor::from_fn([n, 1, h, w], |_| if r.random::<f64>() < 0.2 { r.random_range(1..3) as f64 } else { 0.0 });
    let p = Tensor::uniform([n, 1, h, w], 0.0, 0.3, r);
    (z, p)
}

fn sums(t: &Tensor) -> Vec<f64> {
    let [n, ..] = t.shape();
    (0..n).map(|s| t.sample(s).sum()).collect()
}

#[test]
fn count_loss_examples() {
    let z = map(&[2.0, 3.0, 0.0, 0.0], 1, 2, 2);
    let p = map(&[1.0, 1.0, 1.0, 2.0], 1, 2, 2);
    assert_eq!(eval(&p, |g, v| count_loss(g, v, &z)), 0.0);
    let z = map(&[1.0, 2.0, 0.0, 0.0], 1, 2, 2);
    let p = map(&[1.0, 1.5, 2.0, 3.0], 1, 2, 2);
    assert!((eval(&p, |g, v| count_loss(g, v, &z)) - 4.5).abs() < 1e-15);
}

#[test]
fn count_loss_gradient_is_sign_per_cell() {
    let z = map(&[1.0, 2.0, 0.0, 0.0], 1, 2, 2);
    for (p, sign) in [(map(&[1.0, 1.5, 2.0, 3.0], 1, 2, 2), 1.0), (map(&[0.1; 4], 1, 2, 2), -1.0)] {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(p.with_requires_grad(true));
        let l = count_loss(&mut g, v, &z).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(v).unwrap().data().iter().all(|&d| d == sign));
    }
}

#[test]
fn count_loss_is_symmetric() {
    let mut r = rng(1);
    let (z, p) = random_pair(&mut r, 2, 4, 4);
    let a = eval(&p, |g, v| count_loss(g, v, &z));
    let b = eval(&z, |g, v| count_loss(g, v, &p));
    assert!((a - b).abs() < 1e-14);
}

#[test]
fn count_loss_rejects_mismatched_grids() {
    let mut g = Graph::<f64>::new();
    let v = g.leaf(Tensor::zeros([1, 1, 2, 2]));
    assert!(matches!(
        count_loss(&mut g, v, &Tensor::zeros([1, 1, 2, 3])),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn count_and_variation_match_direct_formulas() {
    let mut r = rng(99);
    for _ in 0..100 {
        let n = r.random_range(1..4);
        let (z, p) = random_pair(&mut r, n, 4, 6);
        let (zs, ps) = (sums(&z), sums(&p));
        let want_c = (0..n).map(|s| (zs[s] - ps[s]).abs()).sum::<f64>() / n as f64;
        let want_v = (0..n)
            .map(|s| {
                let residual: f64 = z.sample(s).data().iter().zip(p.sample(s).data()).map(|(a, b)| (a - b).abs()).sum();
                zs[s] * residual
            })
            .sum::<f64>()
            / n as f64;
        let got_c = eval(&p, |g, v| count_loss(g, v, &z));
        let got_v = eval(&p, |g, v| variation_loss(g, v, &z, Variation::Paper));
        assert!((got_c - want_c).abs() < 1e-10);
        assert!((got_v - want_v).abs() < 1e-10);

        let want_n = (0..n)
            .map(|s| {
                let zn = if zs[s] > 0.0 { 1.0 / zs[s] } else { 0.0 };
                let pn = 1.0 / (ps[s] + NORM_GUARD);
                let d: f64 = z.sample(s).data().iter().zip(p.sample(s).data()).map(|(a, b)| (a * zn - b * pn).abs()).sum();
                zs[s] * d
            })
            .sum::<f64>()
            / n as f64;
        let got_n = eval(&p, |g, v| variation_loss(g, v, &z, Variation::Normalized));
        assert!((got_n - want_n).abs() < 1e-10);

        let weights = LossWeights::default();
        let cfg = LossConfig::default();
        let pts = vec![Vec::new(); n];
        let mut g = Graph::<f64>::new();
        let v = g.leaf(p.clone());
        let (total, report) = total_loss(&mut g, v, &z, &pts, &cfg).unwrap();
        let want_t = want_c + weights.ot * report.ot + weights.variation * want_v;
        assert!((g.scalar(total) - want_t).abs() < 1e-10);
        assert!((report.total - combine(&weights, report.count, report.ot, report.variation)).abs() < 1e-12);
    }
}

#[test]
fn variation_examples() {
    let z = map(&[1.0, 1.0, 0.0, 0.0], 1, 2, 2);
    assert_eq!(eval(&z, |g, v| variation_loss(g, v, &z, Variation::Paper)), 0.0);
    let p = map(&[1.25, 0.75, 0.0, 0.0], 1, 2, 2);
    assert!((eval(&p, |g, v| variation_loss(g, v, &z, Variation::Paper)) - 1.0).abs() < 1e-15);
    // doubling the mass of z with the same residual doubles the loss
    let z2 = map(&[2.0, 2.0, 0.0, 0.0], 1, 2, 2);
    let p2 = map(&[2.25, 1.75, 0.0, 0.0], 1, 2, 2);
    assert!((eval(&p2, |g, v| variation_loss(g, v, &z2, Variation::Paper)) - 2.0).abs() < 1e-15);
}

#[test]
fn variation_is_not_symmetric() {
    let z = map(&[1.0, 0.0, 0.0, 0.0], 1, 2, 2);
    let p = map(&[0.0, 3.0, 0.0, 0.0], 1, 2, 2);
    let a = eval(&p, |g, v| variation_loss(g, v, &z, Variation::Paper));
    let b = eval(&z, |g, v| variation_loss(g, v, &p, Variation::Paper));
    assert_eq!((a, b), (4.0, 12.0));
}

#[test]
fn total_loss_weights_and_recombination() {
    let w = LossWeights::default();
    assert_eq!((w.ot, w.variation), (0.1, 0.01));
    assert!((combine(&w, 2.0, 10.0, 100.0) - 4.0).abs() < 1e-15);
    assert_eq!(combine(&w, 0.0, 0.0, 0.0), 0.0);
}

#[test]
fn total_loss_with_points_recombines_terms() {
    let mut r = rng(4);
    let (z, p) = random_pair(&mut r, 2, 4, 4);
    let points = vec![vec![[5.0, 9.0], [20.0, 30.0]], vec![[1.0, 1.0]]];
    let cfg = LossConfig::default();
    let mut g = Graph::<f64>::new();
    let v = g.leaf(p.clone());
    let (total, report) = total_loss(&mut g, v, &z, &points, &cfg).unwrap();
    let c = eval(&p, |g, v| count_loss(g, v, &z));
    let var = eval(&p, |g, v| variation_loss(g, v, &z, Variation::Paper));
    let ot = eval(&p, |g, v| Ok(ot_loss(g, v, &points, &cfg.sinkhorn)?.loss));
    assert!((g.scalar(total) - (c + 0.1 * ot + 0.01 * var)).abs() < 1e-10);
    assert_eq!((report.count, report.variation), (c, var));
    assert_eq!(report.ot_skipped, 0);
}

#[test]
fn total_loss_rejects_negative_weights() {
    let mut g = Graph::<f64>::new();
    let v = g.leaf(Tensor::zeros([1, 1, 2, 2]));
    let cfg = LossConfig {
        weights: LossWeights { ot: -1.0, variation: 0.0 },
        ..LossConfig::default()
    };
    assert!(total_loss(&mut g, v, &Tensor::zeros([1, 1, 2, 2]), &[vec![]], &cfg).is_err());
}

// ------------------------------------------------------------------------------------ OT

#[test]
fn ot_loss_vanishes_for_uniform_prediction_and_constant_potential() {
    // one point at the centre of a symmetric 1x1 grid: alpha is a constant
    let p = map(&[0.7], 1, 1, 1);
    let v = eval(&p, |g, v| Ok(ot_loss(g, v, &[vec![[4.0, 4.0]]], &SinkhornConfig::default())?.loss));
    assert!(v.abs() < 1e-15);
}

#[test]
fn ot_loss_single_cell_by_hand() {
    let p = map(&[2.0], 1, 1, 1);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(p);
    let term = ot_loss(&mut g, x, &[vec![[12.0, 4.0]]], &SinkhornConfig::default()).unwrap();
    let alpha = term.results[0].as_ref().unwrap().alpha[0];
    let beta = term.results[0].as_ref().unwrap().beta[0];
    // point (1.5, 0.5) in grid units against centre (0.5, 0.5): cost 1
    assert!((alpha + beta - 1.0).abs() < 1e-12);
    let norm = 2.0 + NORM_GUARD;
    let want = (alpha / norm - alpha * 2.0 / (norm * norm)) * 2.0;
    assert!((g.scalar(term.loss) - want).abs() < 1e-15);
    assert!((term.objective - alpha * 2.0 / norm).abs() < 1e-15);
}

#[test]
fn ot_loss_skips_empty_images() {
    let p = map(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2, 2, 2);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(p);
    let term = ot_loss(&mut g, x, &[vec![], vec![[3.0, 3.0]]], &SinkhornConfig::default()).unwrap();
    assert!(term.results.iter().all(Option::is_none));
    assert_eq!(g.scalar(term.loss), 0.0);
}

fn ot_setup(seed: u64) -> (Tensor, Vec<Vec<[f64; 2]>>) {
    let mut r = rng(seed);
    let p = Tensor::uniform([2, 1, 3, 4], 0.05, 1.0, &mut r);
    let points = vec![
        (0..3).map(|_| [r.random::<f64>() * 32.0, r.random::<f64>() * 24.0]).collect(),
        (0..5).map(|_| [r.random::<f64>() * 32.0, r.random::<f64>() * 24.0]).collect(),
    ];
    (p, points)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    num / den.max(1e-300)
}

#[test]
fn ot_gradient_matches_frozen_potential_differences() {
    let (p, points) = ot_setup(31);
    let cfg = tight(1.0);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(p.clone().with_requires_grad(true));
    let term = ot_loss(&mut g, x, &points, &cfg).unwrap();
    let alphas: Vec<Vec<f64>> = term.results.iter().map(|r| r.as_ref().unwrap().alpha.clone()).collect();
    let grads = g.backward(term.loss).unwrap();
    let analytic = grads.get(x).unwrap().data().to_vec();

    let frozen = |t: &Tensor| -> f64 {
        (0..2)
            .map(|s| {
                let z = t.sample(s);
                let norm = z.sum() + NORM_GUARD;
                alphas[s].iter().zip(z.data()).map(|(a, v)| a * v).sum::<f64>() / norm
            })
            .sum::<f64>()
            / 2.0
    };
    let h = 1e-6;
    let numeric: Vec<f64> = (0..p.numel())
        .map(|i| {
            let (mut up, mut dn) = (p.clone(), p.clone());
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            (frozen(&up) - frozen(&dn)) / (2.0 * h)
        })
        .collect();
    assert!(rel_err(&analytic, &numeric) < 1e-4, "{analytic:?} vs {numeric:?}");
}

#[test]
fn ot_gradient_matches_resolved_entropic_value() {
    let (p, points) = ot_setup(47);
    let cfg = tight(2.0);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(p.clone().with_requires_grad(true));
    let term = ot_loss(&mut g, x, &points, &cfg).unwrap();
    let grads = g.backward(term.loss).unwrap();
    let analytic = grads.get(x).unwrap().data().to_vec();

    // the entropic value as a function of the prediction, re-solved at every probe
    let value = |t: &Tensor| -> f64 {
        (0..2)
            .map(|s| {
                let z = t.sample(s);
                let grid: Vec<[f64; 2]> = points[s].iter().map(|q| [q[0] / 8.0, q[1] / 8.0]).collect();
                let prob = SinkhornProblem::from_grid(z.data(), 3, 4, &grid).unwrap();
                sinkhorn(&prob, &cfg).unwrap().dual_value(&prob)
            })
            .sum::<f64>()
            / 2.0
    };
    let h = 1e-5;
    let numeric: Vec<f64> = (0..p.numel())
        .map(|i| {
            let (mut up, mut dn) = (p.clone(), p.clone());
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            (value(&up) - value(&dn)) / (2.0 * h)
        })
        .collect();
    assert!(rel_err(&analytic, &numeric) < 1e-4, "{analytic:?} vs {numeric:?}");
}

#[test]
fn ot_loss_value_is_zero_up_to_the_guard() {
    let (p, points) = ot_setup(5);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(p.clone());
    let term = ot_loss(&mut g, x, &points, &SinkhornConfig::default()).unwrap();
    // <alpha, z> * guard / (|z| + guard)^2 per image
    let want = (0..2)
        .map(|s| {
            let z = p.sample(s);
            let alpha = &term.results[s].as_ref().unwrap().alpha;
            let inner: f64 = alpha.iter().zip(z.data()).map(|(a, v)| a * v).sum();
            inner * NORM_GUARD / (z.sum() + NORM_GUARD).powi(2)
        })
        .sum::<f64>()
        / 2.0;
    assert!((g.scalar(term.loss) - want).abs() < 1e-12, "{} vs {want}", g.scalar(term.loss));
}
