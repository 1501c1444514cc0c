//! Train every fusion strategy, plus one model without transition modules,
//! on the same scenes and print the comparison table.

use fflab::data::{generate_dataset, SceneConfig};
use fflab::model::{FfNet, Fusion, ModelConfig};
use fflab::trainer::{ablation_report, evaluate, full_density, train, AblationRun, TrainConfig, TrainOptions};
use fflab::Result;

fn main() -> Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let scene = SceneConfig { seed: 1, width: 128, height: 128, ..SceneConfig::default() };
    let ds = generate_dataset(&scene, 8)?;
    let cfg = TrainConfig { steps, crop: 128, ..TrainConfig::overfit() };
    let variants = [
        ("concat", Fusion::Concat, true),
        ("add", Fusion::Add, true),
        ("stepwise", Fusion::Stepwise, true),
        ("concat, no ftm", Fusion::Concat, false),
    ];
    let mut runs = Vec::new();
    for (label, fusion, ftm) in variants {
        let mut config = ModelConfig { fusion, ..ModelConfig::toy() };
        config.ftm.enabled = ftm;
        let mut model = FfNet::<f64>::new(config)?;
        let outcome = train(&mut model, &ds, &cfg, &TrainOptions::default(), |_| {})?;
        runs.push(AblationRun {
            label: label.to_string(),
            fusion: fusion.to_string(),
            ftm,
            params: model.store.trainable_count(),
            density_shape: full_density(&model, &ds.samples[0].image)?.shape(),
            curve: outcome.curve,
            metrics: evaluate(&model, &ds)?,
        });
    }
    print!("{}", ablation_report(&runs));
    Ok(())
}
