//! Per-branch heatmaps and the density export of one synthetic scene.

use fflab::analysis::{branch_heatmap, export_density, write_heatmap, Branch};
use fflab::data::{generate_scene, rasterize, RasterMode, SceneConfig};
use fflab::model::{FfNet, ModelConfig, DENSITY_STRIDE};
use fflab::Result;

fn main() -> Result<()> {
    let out = std::env::temp_dir().join("fflab_heatmaps");
    std::fs::create_dir_all(&out).map_err(|e| fflab::Error::Io { path: out.clone(), source: e })?;
    let (image, annotation) = generate_scene(&SceneConfig { width: 128, height: 96, ..SceneConfig::default() })?;
    let dots = rasterize::<f64>(&annotation, DENSITY_STRIDE, RasterMode::Additive)?;
    let model = FfNet::<f64>::new(ModelConfig::toy())?;
    for b in Branch::ALL {
        let map = branch_heatmap(&model, &image, b)?;
        write_heatmap(&out.join(format!("{b}.pgm")), &map)?;
        println!("{b}: correlation with dots {:.3}", map.correlation(&dots)?);
    }
    let export = export_density(&model, &image, &out.join("density"))?;
    println!(
        "density {}x{} cells, count {:.3} against {} heads, written to {}",
        export.rows,
        export.cols,
        export.count,
        annotation.count(),
        export.csv.display()
    );
    Ok(())
}
