//! Build a small graph, backpropagate, and compare against finite differences.

use fflab::tensor::gradcheck;
use fflab::{Graph, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn([1, 2, 6, 6], 1.0, &mut rng);
    let w = Tensor::<f64>::randn([3, 2, 3, 3], 0.5, &mut rng);

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let wv = g.leaf(w.clone().with_requires_grad(true));
    let y = g.conv2d(xv, wv, None, 1, 1)?;
    let y = g.sigmoid(y);
    let loss = g.sum(y);
    println!("loss {:.6}", g.scalar(loss));
    let grads = g.backward(loss)?;
    println!("|dL/dw| = {:.6}", grads.get(wv).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt());

    let report = gradcheck::check(
        &[x, w],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        },
        1e-5,
    )?;
    println!(
        "gradcheck: max rel error {:.2e} over {} coordinates, passes 1e-4: {}",
        report.max_rel_error,
        report.checked,
        report.passes(1e-4)
    );
    Ok(())
}
