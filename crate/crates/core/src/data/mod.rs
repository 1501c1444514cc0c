//! Synthetic dot-annotated scenes, ground-truth rasterization, augmentation
//! and the on-disk dataset format.
//!
//! Coordinates are continuous pixel positions: pixel `i` covers `[i, i + 1)`.

mod io;
mod scene;

pub use io::{
    decode_pnm, encode_pnm, read_annotation_csv, read_dataset, read_pnm, write_annotation_csv, write_dataset, write_pnm,
    Manifest, ManifestEntry, MANIFEST_VERSION,
};
pub use scene::{generate_scene, sample_points, SceneConfig};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// 8-bit image stored plane by plane (`c, h, w`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "{} bytes for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `(1, c, h, w)` tensor with values in `[0, 1]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let scale = 1.0 / 255.0;
        Tensor::new(
            [1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::cast(v as f64 * scale)).collect(),
        )
        .expect("image buffer matches its shape")
    }

    /// The `width x height` window whose top-left pixel is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        let mut data = Vec::with_capacity(width * height * self.channels);
        for c in 0..self.channels {
            for y in y0..y0 + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
            }
        }
        Self {
            width,
            height,
            channels: self.channels,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..self.clone() }
    }
}

/// Head positions in one image.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Annotation {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 2]>,
}

impl Annotation {
    /// Rejects the first point outside `[0, width) x [0, height)`.
    pub fn new(width: usize, height: usize, points: Vec<[f64; 2]>) -> Result<Self> {
        let a = Self { width, height, points };
        a.check()?;
        Ok(a)
    }

    pub fn check(&self) -> Result<()> {
        let (w, h) = (self.width as f64, self.height as f64);
        for (index, p) in self.points.iter().enumerate() {
            if !(p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h) {
                return Err(Error::PointOutOfBounds {
                    index,
                    x: p[0],
                    y: p[1],
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterMode {
    /// Every point adds 1 to its cell.
    #[default]
    Additive,
    /// Cells hold 1 if any point falls inside, else 0.
    Clamped,
}

/// Dot map on the `ceil(h / stride) x ceil(w / stride)` grid as a `(1, 1, gh, gw)` tensor.
pub fn rasterize<T: Element>(annotation: &Annotation, stride: usize, mode: RasterMode) -> Result<Tensor<T>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("rasterize stride must be positive".into()));
    }
    annotation.check()?;
    let gh = annotation.height.div_ceil(stride);
    let gw = annotation.width.div_ceil(stride);
    let mut grid = vec![0.0f64; gh * gw];
    let s = stride as f64;
    for p in &annotation.points {
        let cx = ((p[0] / s) as usize).min(gw - 1);
        let cy = ((p[1] / s) as usize).min(gh - 1);
        let cell = &mut grid[cy * gw + cx];
        *cell = match mode {
            RasterMode::Additive => *cell + 1.0,
            RasterMode::Clamped => 1.0,
        };
    }
    Tensor::new([1, 1, gh, gw], grid.into_iter().map(T::cast).collect())
}

/// Cuts the window at `(x0, y0)`, keeping points strictly inside it, translated.
pub fn crop(image: &Image, annotation: &Annotation, x0: usize, y0: usize, size: usize) -> Result<(Image, Annotation)> {
    if x0 + size > image.width || y0 + size > image.height {
        return Err(Error::InvalidArgument(format!(
            "crop {size} at ({x0}, {y0}) exceeds {}x{}",
            image.width, image.height
        )));
    }
    let (fx, fy, fs) = (x0 as f64, y0 as f64, size as f64);
    let points = annotation
        .points
        .iter()
        .map(|p| [p[0] - fx, p[1] - fy])
        .filter(|p| p[0] >= 0.0 && p[0] < fs && p[1] >= 0.0 && p[1] < fs)
        .collect();
    Ok((image.crop(x0, y0, size, size), Annotation::new(size, size, points)?))
}

/// Mirrors image columns and maps every point's `x` to `width - x`.
pub fn flip(image: &Image, annotation: &Annotation) -> (Image, Annotation) {
    let w = annotation.width as f64;
    let points = annotation
        .points
        .iter()
        .map(|p| {
            let x = w - p[0];
            [if x >= w { w.next_down() } else { x }, p[1]]
        })
        .collect();
    (
        image.flip_horizontal(),
        Annotation {
            points,
            ..annotation.clone()
        },
    )
}

/// Random square crop (uniform window) followed by a horizontal flip with probability `flip_prob`.
pub fn augment(
    image: &Image,
    annotation: &Annotation,
    size: usize,
    flip_prob: f64,
    rng: &mut impl Rng,
) -> Result<(Image, Annotation)> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::InvalidArgument(format!("crop size {size} is not a positive multiple of 32")));
    }
    if size > image.width || size > image.height {
        return Err(Error::InvalidArgument(format!(
            "crop size {size} exceeds image {}x{}",
            image.width, image.height
        )));
    }
    let x0 = rng.random_range(0..=image.width - size);
    let y0 = rng.random_range(0..=image.height - size);
    let (img, ann) = crop(image, annotation, x0, y0, size)?;
    if rng.random::<f64>() < flip_prob {
        Ok(flip(&img, &ann))
    } else {
        Ok((img, ann))
    }
}

/// One scene of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub seed: u64,
    pub image: Image,
    pub annotation: Annotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: SceneConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `count` scenes, scene `i` seeded by [`SceneConfig::for_index`].
pub fn generate_dataset(scene: &SceneConfig, count: usize) -> Result<Dataset> {
    scene.validate()?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let cfg = scene.for_index(i);
            let (image, annotation) = generate_scene(&cfg)?;
            Ok(Sample {
                name: format!("scene_{i:04}"),
                seed: cfg.seed,
                image,
                annotation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        scene: scene.clone(),
        samples,
    })
}
