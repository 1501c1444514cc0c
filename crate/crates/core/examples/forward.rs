//! Toy model forward pass: backbone features, branch maps, fused map and density.

use fflab::layers::Mode;
use fflab::model::{FfNet, Fusion, ModelConfig};
use fflab::{Result, Tensor};

fn main() -> Result<()> {
    for fusion in [Fusion::Concat, Fusion::Add, Fusion::Stepwise] {
        let config = ModelConfig { fusion, ..ModelConfig::toy() };
        let model = FfNet::<f64>::new(config)?;
        let mut s = model.session(Mode::Eval);
        let x = s.graph.input(Tensor::full([1, 1, 128, 128], 0.5));
        let trace = model.trace(&mut s, x)?;
        let shapes = |vs: &[fflab::Var]| vs.iter().map(|&v| s.graph.shape(v)).collect::<Vec<_>>();
        println!("{fusion}: {} parameters", model.store.trainable_count());
        println!("  features {:?}", shapes(&trace.features));
        println!("  branches {:?}", shapes(&trace.branches));
        println!("  fused {:?} -> density {:?}", s.graph.shape(trace.fused), s.graph.shape(trace.density));
    }
    Ok(())
}
