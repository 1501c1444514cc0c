use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{to_gray, Branch};
use crate::data::{write_pnm, Image};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{FfNet, DENSITY_STRIDE};
use crate::tensor::{Element, Tensor};
use crate::trainer::{full_density, padded_input};

/// Channel-mean `|branch map|`, min-max normalized and upsampled (nearest)
/// to the image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub branch: Branch,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_image(&self) -> Image {
        to_gray(self.width, self.height, &self.values)
    }

    /// Pearson correlation with a `(1, 1, gh, gw)` dot map, after averaging
    /// the heatmap over each dot-map cell.
    pub fn correlation<T: Element>(&self, dots: &Tensor<T>) -> Result<f64> {
        let [_, _, gh, gw] = dots.shape();
        if gh != self.height.div_ceil(DENSITY_STRIDE) || gw != self.width.div_ceil(DENSITY_STRIDE) {
            return Err(Error::InvalidArgument(format!(
                "dot map {gh}x{gw} does not tile a {}x{} heatmap",
                self.height, self.width
            )));
        }
        let mut cells = vec![0.0; gh * gw];
        let mut counts = vec![0usize; gh * gw];
        for y in 0..self.height {
            for x in 0..self.width {
                let k = (y / DENSITY_STRIDE) * gw + x / DENSITY_STRIDE;
                cells[k] += self.get(y, x);
                counts[k] += 1;
            }
        }
        cells.iter_mut().zip(&counts).for_each(|(c, &n)| *c /= n as f64);
        Ok(pearson(&cells, &dots.to_f64_vec()))
    }
}

/// Sample Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

pub fn branch_heatmap<T: Element>(model: &FfNet<T>, image: &Image, branch: Branch) -> Result<Heatmap> {
    let mut s = model.session(Mode::Eval);
    let x = s.graph.input(padded_input(image)?);
    let trace = model.trace(&mut s, x)?;
    let map = s.graph.value(trace.branches[branch.index()]);
    let [_, c, bh, bw] = map.shape();
    let stride = branch.stride();
    let (gh, gw) = (image.height.div_ceil(stride).min(bh), image.width.div_ceil(stride).min(bw));
    let mut cells = vec![0.0; gh * gw];
    for ch in 0..c {
        for i in 0..gh {
            for j in 0..gw {
                cells[i * gw + j] += map.get([0, ch, i, j]).as_f64().abs() / c as f64;
            }
        }
    }
    let lo = cells.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cells.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    cells.iter_mut().for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
    let values = (0..image.height * image.width)
        .map(|k| {
            let (y, x) = (k / image.width, k % image.width);
            cells[(y / stride) * gw + x / stride]
        })
        .collect();
    Ok(Heatmap {
        branch,
        height: image.height,
        width: image.width,
        values,
    })
}

pub fn write_heatmap(path: &Path, map: &Heatmap) -> Result<()> {
    write_pnm(path, &map.to_image())
}

/// Predicted density of one image as written by [`export_density`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityExport {
    pub count: f64,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<f64>,
    pub pgm: PathBuf,
    pub csv: PathBuf,
}

/// Writes `<stem>.pgm` (density divided by its maximum) and `<stem>.csv`.
///
/// The CSV starts with a `count,<value>` record followed by a
/// `row,col,density` header and one record per cell.
pub fn export_density<T: Element>(model: &FfNet<T>, image: &Image, stem: &Path) -> Result<DensityExport> {
    let d = full_density(model, image)?;
    let [_, _, rows, cols] = d.shape();
    let cells = d.to_f64_vec();
    let count: f64 = cells.iter().sum();
    let max = cells.iter().fold(0.0f64, |m, &v| m.max(v));
    let normalized: Vec<f64> = cells.iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect();
    let pgm = stem.with_extension("pgm");
    let csv = stem.with_extension("csv");
    write_pnm(&pgm, &to_gray(cols, rows, &normalized))?;
    let mut text = format!("count,{count}\nrow,col,density\n");
    for (k, v) in cells.iter().enumerate() {
        text.push_str(&format!("{},{},{v}\n", k / cols, k % cols));
    }
    let mut f = fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&csv, e))?;
    Ok(DensityExport {
        count,
        rows,
        cols,
        cells,
        pgm,
        csv,
    })
}

/// Reads the count and the `(row, col, density)` records of an exported CSV.
pub fn read_density_csv(path: &Path) -> Result<(f64, Vec<(usize, usize, f64)>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut records = r.records();
    let bad = |line: usize, m: &str| Error::Format {
        what: "density CSV",
        position: line,
        message: m.to_string(),
    };
    let head = records.next().ok_or_else(|| bad(1, "empty file"))??;
    let count = match (head.get(0), head.get(1)) {
        (Some("count"), Some(v)) => v.parse::<f64>().map_err(|e| bad(1, &e.to_string()))?,
        _ => return Err(bad(1, "expected count,<value>")),
    };
    let header = records.next().ok_or_else(|| bad(2, "missing header"))??;
    if header.iter().collect::<Vec<_>>() != ["row", "col", "density"] {
        return Err(bad(2, "expected row,col,density"));
    }
    let mut cells = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).ok_or_else(|| bad(i + 3, "short record"));
        let row = field(0)?.parse().map_err(|_| bad(i + 3, "bad row"))?;
        let col = field(1)?.parse().map_err(|_| bad(i + 3, "bad col"))?;
        let v = field(2)?.parse().map_err(|_| bad(i + 3, "bad density"))?;
        cells.push((row, col, v));
    }
    Ok((count, cells))
}
