//! Overfit the toy model on eight synthetic scenes.
//!
//! `cargo run --release --example train_overfit -- 2000` runs the full
//! schedule; the default is a short run.

use fflab::data::{generate_dataset, SceneConfig};
use fflab::model::{FfNet, ModelConfig};
use fflab::trainer::{evaluate, train, TrainConfig, TrainOptions};
use fflab::Result;

fn main() -> Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let ds = generate_dataset(&SceneConfig { seed: 1, ..SceneConfig::default() }, 8)?;
    let mut model = FfNet::<f64>::new(ModelConfig::toy())?;
    let cfg = TrainConfig { steps, ..TrainConfig::overfit() };
    let every = (steps / 10).max(1);
    train(&mut model, &ds, &cfg, &TrainOptions::default(), |r| {
        if r.step % every == 0 {
            println!("step {:>5}  total {:.4}  count {:.4}", r.step, r.total, r.count);
        }
    })?;
    print!("{}", evaluate(&model, &ds)?.to_text());
    Ok(())
}
