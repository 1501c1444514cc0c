//! Generate clustered synthetic scenes and write them as a dataset directory.

use fflab::data::{generate_dataset, read_dataset, write_dataset, SceneConfig};
use fflab::Result;

fn main() -> Result<()> {
    let out = std::env::temp_dir().join("fflab_gen_data");
    let scene = SceneConfig { seed: 1, ..SceneConfig::default() };
    let ds = generate_dataset(&scene, 8)?;
    let manifest = write_dataset(&out, &ds)?;
    for e in &manifest.entries {
        println!("{}  {:>3} heads", e.image, e.count);
    }
    let back = read_dataset(&out)?;
    println!("reloaded {} scenes from {}", back.len(), out.display());
    Ok(())
}
