//! Count, transport and variation terms of the training loss on one prediction.

use fflab::data::{rasterize, Annotation, RasterMode};
use fflab::loss::{total_loss, LossConfig};
use fflab::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let annotation = Annotation::new(64, 64, vec![[10.0, 12.0], [40.0, 33.0], [41.0, 36.0], [60.0, 5.0]])?;
    let dots = rasterize::<f64>(&annotation, 8, RasterMode::Additive)?;
    let pred = Tensor::full([1, 1, 8, 8], 0.05);

    let config = LossConfig::default();
    let mut g = Graph::new();
    let p = g.leaf(pred.with_requires_grad(true));
    let (total, report) = total_loss(&mut g, p, &dots, std::slice::from_ref(&annotation.points), &config)?;
    println!("weights ot {} variation {}", report.weights.ot, report.weights.variation);
    println!(
        "count {:.4}  ot objective {:.4}  variation {:.4}  total {:.4}",
        report.count, report.ot_objective, report.variation, report.total
    );
    let grads = g.backward(total)?;
    println!("gradient at the empty corner {:.5}", grads.get(p).unwrap().get([0, 0, 0, 7]));
    Ok(())
}
