//! CSV matrices and grayscale PNG heatmaps of space-time fields.

use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use pcno_gas::Field2;

/// One row per time index, one column per grid point.
pub fn matrix_csv(f: &Field2) -> String {
    let mut s = String::with_capacity(f.data.len() * 12);
    for t in 0..f.nt {
        let row: Vec<String> = (0..f.nx).map(|x| format!("{:e}", f.get(t, x))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Map `[lo, hi]` onto `0..=255`; a degenerate range maps everything to 0.
pub fn gray_levels(f: &Field2, lo: f64, hi: f64) -> Vec<u8> {
    let span = hi - lo;
    f.data
        .iter()
        .map(|&v| if span > 0.0 { (255.0 * ((v - lo) / span).clamp(0.0, 1.0)).round() as u8 } else { 0 })
        .collect()
}

/// Time runs down the image, space to the right.
pub fn write_png(path: &Path, f: &Field2, lo: f64, hi: f64) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), f.nx as u32, f.nt as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&gray_levels(f, lo, hi))?;
    Ok(())
}

pub fn range_of<'a>(fields: impl IntoIterator<Item = &'a Field2>) -> (f64, f64) {
    fields
        .into_iter()
        .flat_map(|f| f.data.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}
