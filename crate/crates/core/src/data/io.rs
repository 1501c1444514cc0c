use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, Dataset, Image, Sample, SceneConfig};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub annotation: String,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub scene: SceneConfig,
    pub entries: Vec<ManifestEntry>,
}

/// Binary PGM (one channel) or PPM (three channels), maxval 255.
pub fn encode_pnm(image: &Image) -> Result<Vec<u8>> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::InvalidArgument(format!("cannot store a {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    if image.channels == 1 {
        out.extend_from_slice(&image.data);
    } else {
        let plane = image.width * image.height;
        for i in 0..plane {
            out.extend((0..3).map(|c| image.data[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn write_pnm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_pnm(image)?).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            what: "PNM image",
            position: self.pos,
            message: message.into(),
        })
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(format!("expected {what}"));
        }
        match std::str::from_utf8(&self.bytes[start..self.pos]).ok().and_then(|s| s.parse().ok()) {
            Some(v) => Ok(v),
            None => {
                self.pos = start;
                self.fail(format!("{what} out of range"))
            }
        }
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            // point at the first byte that breaks the magic
            cur.pos = match bytes.first() {
                Some(b'P') => 1,
                _ => 0,
            };
            return cur.fail("expected magic P5 or P6");
        }
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return cur.fail(format!("maxval {maxval} is not 255"));
    }
    match bytes.get(cur.pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => cur.pos += 1,
        _ => return cur.fail("expected a single whitespace byte before the raster"),
    }
    let need = width * height * channels;
    let raster = &bytes[cur.pos..];
    if raster.len() != need {
        cur.pos += raster.len().min(need);
        return cur.fail(format!("raster has {} bytes, header promises {need}", raster.len()));
    }
    let data = if channels == 1 {
        raster.to_vec()
    } else {
        let plane = width * height;
        let mut planar = vec![0u8; need];
        for (i, px) in raster.chunks(3).enumerate() {
            for c in 0..3 {
                planar[c * plane + i] = px[c];
            }
        }
        planar
    };
    Image::new(width, height, channels, data)
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format { position, message, .. } => Error::Dataset(format!(
            "{}: malformed image at byte {position}: {message}",
            path.display()
        )),
        other => other,
    })
}

/// CSV with header `x,y`, six decimals.
pub fn write_annotation_csv(path: &Path, annotation: &Annotation) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y"])?;
    for p in &annotation.points {
        w.write_record([format!("{:.6}", p[0]), format!("{:.6}", p[1])])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotation_csv(path: &Path, width: usize, height: usize) -> Result<Annotation> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "y"] {
        return Err(Error::Dataset(format!("{}: header must be x,y", path.display())));
    }
    let mut points = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                Error::Dataset(format!("{}: row {} is not a pair of numbers", path.display(), line + 2))
            })
        };
        points.push([parse(0)?, parse(1)?]);
    }
    Annotation::new(width, height, points)
}

/// Writes `images/<name>.pgm`, `annotations/<name>.csv` and `manifest.json`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<Manifest> {
    let ext = match dataset.scene.channels {
        3 => "ppm",
        _ => "pgm",
    };
    for sub in ["images", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let image = format!("images/{}.{ext}", s.name);
        let annotation = format!("annotations/{}.csv", s.name);
        write_pnm(&dir.join(&image), &s.image)?;
        write_annotation_csv(&dir.join(&annotation), &s.annotation)?;
        entries.push(ManifestEntry {
            image,
            annotation,
            count: s.annotation.count(),
            seed: s.seed,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        scene: dataset.scene.clone(),
        entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "{}: manifest version {} (expected {MANIFEST_VERSION})",
            path.display(),
            manifest.version
        )));
    }
    let images = dir.join("images");
    let on_disk = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?.count();
    if on_disk != manifest.entries.len() {
        return Err(Error::Dataset(format!(
            "{}: manifest lists {} scenes but images/ holds {on_disk} files",
            path.display(),
            manifest.entries.len()
        )));
    }
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let image = read_pnm(&dir.join(&e.image))?;
        let annotation = read_annotation_csv(&dir.join(&e.annotation), image.width, image.height)?;
        if annotation.count() != e.count {
            return Err(Error::Dataset(format!(
                "{}: manifest says {} points, file has {}",
                e.annotation,
                e.count,
                annotation.count()
            )));
        }
        let name = Path::new(&e.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        samples.push(Sample {
            name,
            seed: e.seed,
            image,
            annotation,
        });
    }
    Ok(Dataset {
        scene: manifest.scene,
        samples,
    })
}
