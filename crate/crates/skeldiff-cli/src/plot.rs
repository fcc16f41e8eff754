//! Grayscale heatmap export for averaged attention maps.

use image::{GrayImage, Luma};
use ndarray::Array2;
use skeldiff::{Error, Result};
use std::path::Path;

/// Writes `m` (rows = joints, columns = frames) as a PNG, min-max normalized
/// and upscaled by `scale` pixels per cell so small maps stay legible.
pub fn heatmap_png(path: &Path, m: &Array2<f64>, scale: u32) -> Result<()> {
    let (rows, cols) = m.dim();
    let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if (hi - lo).abs() < 1e-12 { 1.0 } else { hi - lo };
    let img = GrayImage::from_fn(cols as u32 * scale, rows as u32 * scale, |x, y| {
        let v = m[[(y / scale) as usize, (x / scale) as usize]];
        Luma([(255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8])
    });
    img.save(path).map_err(|e| Error::Config(format!("plot {}: {e}", path.display())))
}
