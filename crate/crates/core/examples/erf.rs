//! Effective receptive fields of a single 3x3 convolution and of the three
//! branch maps of an untrained toy model.

use fflab::analysis::{branch_erf, erf_of, random_probes, theoretical_receptive_field, Branch, ErfConfig};
use fflab::layers::{Conv2d, Init, ParamStore};
use fflab::model::{FfNet, ModelConfig};
use fflab::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut Init { store: &mut store, rng: &mut rng }, "c", 1, 1, 3, 1, 1, false);
    let probes = random_probes([1, 1, 15, 15], 4, 0);
    let map = erf_of(&store, &probes, "conv3x3", |s, x| conv.forward(s, x))?;
    println!(
        "3x3 conv: support {:?}, theoretical side {}",
        map.support(),
        theoretical_receptive_field(&[(3, 1)])
    );

    let model = FfNet::<f64>::new(ModelConfig::toy())?;
    let cfg = ErfConfig { probes: 4, size: 128, ..ErfConfig::default() };
    for b in Branch::ALL {
        let map = branch_erf(&model, b, &cfg)?;
        println!("{b}: area {} px at 0.05, support {:?}", map.area(0.05), map.support());
    }
    Ok(())
}
