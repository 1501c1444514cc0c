//! Attention-weighted kernel aggregation of a dynamic convolution.

use fflab::layers::{DynamicConv2d, DynamicConvConfig, Init, Mode, ParamStore, Session};
use fflab::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let config = DynamicConvConfig::default();
    let conv = DynamicConv2d::new(&mut Init { store: &mut store, rng: &mut rng }, "dyn", 8, 4, &config);
    println!("{} parameters, {} base kernels", conv.params(), config.kernels);

    let x = Tensor::<f64>::randn([2, 8, 16, 16], 1.0, &mut rng);
    let mut s = Session::new(&store, Mode::Eval);
    let xv = s.graph.input(x);
    let att = conv.attention(&mut s, xv)?;
    for (name, v) in [("kernel", att.kernel), ("spatial", att.spatial), ("input", att.input), ("output", att.output)] {
        let t = s.graph.value(v);
        println!("{name:>8} attention {:?}, first sample {:.3?}", t.shape(), &t.data()[..t.numel() / 2]);
    }
    let y = conv.forward_with(&mut s, xv, &att)?;
    println!("output {:?}", s.graph.shape(y));
    Ok(())
}
