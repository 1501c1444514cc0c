use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Annotation, Image};
use crate::error::{Error, Result};

/// Parameters of a synthetic crowd scene.
///
/// Heads follow a Thomas cluster process: a Poisson number of parents placed
/// uniformly, each with a Poisson number of offspring scattered by an
/// isotropic Gaussian. Offspring leaving the frame are reflected back in, so
/// the expected count is exactly `parents * offspring_mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (gray replicated into RGB).
    pub channels: usize,
    /// Expected number of cluster parents per image.
    pub parents: f64,
    /// Expected offspring per parent.
    pub offspring_mean: f64,
    /// Offspring spread in pixels.
    pub spread: f64,
    /// Blob radius at the top row; grows linearly to `radius_bottom`.
    pub radius_top: f64,
    pub radius_bottom: f64,
    pub amplitude_top: f64,
    pub amplitude_bottom: f64,
    pub background: f64,
    /// Peak-to-peak amplitude of the diagonal background gradient.
    pub gradient: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            channels: 1,
            parents: 6.0,
            offspring_mean: 5.0,
            spread: 12.0,
            radius_top: 1.5,
            radius_bottom: 3.0,
            amplitude_top: 0.5,
            amplitude_bottom: 0.8,
            background: 0.15,
            gradient: 0.1,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!("scene size {}x{} is empty", self.width, self.height)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("scene channels must be 1 or 3, got {}", self.channels)));
        }
        let values = [
            ("parents", self.parents),
            ("offspring_mean", self.offspring_mean),
            ("spread", self.spread),
            ("radius_top", self.radius_top),
            ("radius_bottom", self.radius_bottom),
            ("amplitude_top", self.amplitude_top),
            ("amplitude_bottom", self.amplitude_bottom),
            ("background", self.background),
            ("gradient", self.gradient),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in values {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("scene parameter {name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Same scene parameters with the seed of the `index`-th scene of a dataset.
    pub fn for_index(&self, index: usize) -> Self {
        Self {
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64),
            ..self.clone()
        }
    }
}

/// Folds `v` into `[0, len)` by mirroring at both edges.
fn reflect(v: f64, len: f64) -> f64 {
    let r = v.rem_euclid(2.0 * len);
    let r = if r >= len { 2.0 * len - r } else { r };
    if r >= len {
        len.next_down()
    } else {
        r
    }
}

/// Rounds to the six decimals of the annotation format, staying below `len`.
fn quantize(v: f64, len: f64) -> f64 {
    let q = (v * 1e6).round() / 1e6;
    if q >= len {
        ((len - 1e-6) * 1e6).round() / 1e6
    } else {
        q
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as usize
}

/// Draws head positions for one scene.
pub fn sample_points(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let (w, h) = (config.width as f64, config.height as f64);
    let spread = Normal::new(0.0, config.spread).expect("finite spread");
    let mut points = Vec::new();
    for _ in 0..poisson(rng, config.parents) {
        let px = rng.random::<f64>() * w;
        let py = rng.random::<f64>() * h;
        for _ in 0..poisson(rng, config.offspring_mean) {
            let x = reflect(px + spread.sample(rng), w);
            let y = reflect(py + spread.sample(rng), h);
            points.push([quantize(x, w), quantize(y, h)]);
        }
    }
    points
}

/// Renders one scene from `config.seed`.
pub fn generate_scene(config: &SceneConfig) -> Result<(Image, Annotation)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let points = sample_points(config, &mut rng);
    let (w, h) = (config.width, config.height);
    let (wf, hf) = (w as f64, h as f64);

    let mut canvas = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 * ((x as f64 + 0.5) / wf + (y as f64 + 0.5) / hf);
            canvas[y * w + x] = config.background + config.gradient * t;
        }
    }
    for p in &points {
        let depth = p[1] / hf;
        let radius = config.radius_top + (config.radius_bottom - config.radius_top) * depth;
        let amp = config.amplitude_top + (config.amplitude_bottom - config.amplitude_top) * depth;
        if radius <= 0.0 {
            continue;
        }
        let reach = (3.0 * radius).ceil() as isize;
        let (cx, cy) = (p[0].floor() as isize, p[1].floor() as isize);
        let inv = 1.0 / (2.0 * radius * radius);
        for y in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                let dx = x as f64 + 0.5 - p[0];
                let dy = y as f64 + 0.5 - p[1];
                canvas[y as usize * w + x as usize] += amp * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std).expect("finite noise");
        canvas.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let gray: Vec<u8> = canvas
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let data = if config.channels == 3 {
        let mut rgb = Vec::with_capacity(3 * gray.len());
        for _ in 0..3 {
            rgb.extend_from_slice(&gray);
        }
        rgb
    } else {
        gray
    };
    let image = Image::new(w, h, config.channels, data)?;
    Ok((image, Annotation::new(w, h, points)?))
}
