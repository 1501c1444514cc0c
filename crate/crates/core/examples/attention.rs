//! Channel and spatial attention gates on a random feature map.

use fflab::layers::{ChannelAttention, Init, Mode, ParamStore, Session, SpatialAttention};
use fflab::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init { store: &mut store, rng: &mut rng };
    let channel = ChannelAttention::new(&mut init, "ca", 16, 4);
    let spatial = SpatialAttention::new(&mut init, "sa", 7);

    let f = Tensor::<f64>::randn([1, 16, 12, 12], 1.0, &mut rng);
    let mut s = Session::new(&store, Mode::Eval);
    let fv = s.graph.input(f.clone());
    let gated = channel.forward(&mut s, fv)?;
    let out = spatial.forward(&mut s, gated)?;
    let energy = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
    println!("input energy {:.2}", energy(&f));
    println!("after channel gate {:.2}", energy(s.graph.value(gated)));
    println!("after spatial gate {:.2} with shape {:?}", energy(s.graph.value(out)), s.graph.shape(out));
    Ok(())
}
