//! Binary PPM (P6) dumps of layer activations, min-max normalized per
//! image, for eyeballing what the protected activations still reveal.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::model::SplitModel;
use crate::numcore::Matrix;

/// Encode one row as a P6 image of shape (h, w, c), c <= 3. Grayscale
/// replicates into all three channels; a constant image renders mid-gray.
pub fn row_to_ppm(row: &[f64], h: usize, w: usize, c: usize) -> Result<Vec<u8>> {
    if c == 0 || c > 3 {
        return Err(Error::Config(format!("ppm needs 1..=3 channels, got {}", c)));
    }
    if row.len() != h * w * c {
        return Err(Error::Config(format!(
            "{} values cannot reshape to {}x{}x{}",
            row.len(),
            h,
            w,
            c
        )));
    }
    let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let to_byte = |v: f64| -> u8 {
        if span < 1e-12 {
            128
        } else {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        }
    };
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for y in 0..h {
        for x in 0..w {
            match c {
                1 => {
                    let b = to_byte(row[y * w + x]);
                    out.extend_from_slice(&[b, b, b]);
                }
                _ => {
                    for ch in 0..3 {
                        let b = if ch < c {
                            to_byte(row[(y * w + x) * c + ch])
                        } else {
                            0
                        };
                        out.push(b);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn write_matrix_images(
    m: &Matrix,
    h: usize,
    w: usize,
    c: usize,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let bytes = row_to_ppm(m.row(i), h, w, c)?;
        let path = dir.join(format!("{}_{:04}.ppm", prefix, i));
        std::fs::write(&path, bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Forward the data through the first `layer_count` layers and dump each
/// sample's activations as a P6 image of the given shape.
pub fn dump_activation_images(
    model: &SplitModel,
    data: &Dataset,
    layer_count: usize,
    shape: (usize, usize, usize),
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    let (h, w, c) = shape;
    let acts = model.forward_layers_plain(&data.x, layer_count)?;
    if acts.cols() != h * w * c || c > 3 {
        return Err(Error::Config(format!(
            "layer output of width {} is not reshapeable to {}x{}x{}",
            acts.cols(),
            h,
            w,
            c
        )));
    }
    write_matrix_images(&acts, h, w, c, dir, "activation")
}
