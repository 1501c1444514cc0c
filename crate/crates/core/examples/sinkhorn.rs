//! Entropic transport between a density grid and a few annotated points.

use fflab::loss::{sinkhorn, SinkhornConfig, SinkhornProblem};
use fflab::Result;

fn main() -> Result<()> {
    let density = [0.0, 1.0, 0.0, 2.0, 0.5, 0.0, 0.0, 0.0, 3.0];
    let points = [[1.5, 0.5], [0.5, 1.5], [2.5, 2.5]];
    let problem = SinkhornProblem::from_grid(&density, 3, 3, &points)?;
    for eps in [1.0, 0.1, 0.01] {
        let config = SinkhornConfig { eps, max_iters: 20_000, tol: 1e-9 };
        let r = sinkhorn(&problem, &config)?;
        println!(
            "eps {eps:<5} cost {:.5}  dual {:.5}  iterations {:>5}  marginal error {:.1e}",
            r.transport_cost(&problem),
            r.dual_value(&problem),
            r.iterations,
            r.marginal_error
        );
    }
    Ok(())
}
