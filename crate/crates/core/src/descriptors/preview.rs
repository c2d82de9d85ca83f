//! 8-bit visualizations of the descriptors.

use std::io::Cursor;

use candle_core::DType;
use image::{ImageFormat, Rgb, RgbImage as Rgb8};

use super::bundle::DescriptorBundle;
use super::segments::render_segmentation;
use crate::error::Result;

/// Edge magnitude as grey levels, stretched so the strongest edge is white.
pub fn edge_preview(bundle: &DescriptorBundle) -> Result<Rgb8> {
    let m = bundle.edges.magnitude.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let peak = m.iter().flatten().copied().fold(0.0, f64::max).max(1e-12);
    let (h, w) = (bundle.height(), bundle.width());
    Ok(Rgb8::from_fn(w as u32, h as u32, |x, y| {
        let v = (m[y as usize][x as usize] / peak * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([v, v, v])
    }))
}

pub fn segmentation_preview(bundle: &DescriptorBundle) -> Result<Rgb8> {
    render_segmentation(&bundle.segmentation)?.display_rgb.to_rgb8()
}

/// Bar chart of the histogram, one column group per bin, dark bars on white.
pub fn histogram_preview(bundle: &DescriptorBundle, height: u32) -> Result<Rgb8> {
    let w = bundle.histogram.weights_vec()?;
    let bar = 3u32;
    let peak = w.iter().copied().fold(0.0, f64::max).max(1e-12);
    let mut img = Rgb8::from_pixel(bar * w.len() as u32, height, Rgb([255, 255, 255]));
    for (i, v) in w.iter().enumerate() {
        let bar_h = ((v / peak) * (height - 1) as f64).round() as u32;
        // shade each bar by the grey level it counts
        let shade = (i as f64 / (w.len() - 1) as f64 * 200.0) as u8;
        for x in i as u32 * bar..(i as u32 + 1) * bar - 1 {
            for y in height - bar_h..height {
                img.put_pixel(x, y, Rgb([shade, shade, shade]));
            }
        }
    }
    Ok(img)
}

pub fn png_bytes(img: &Rgb8) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}
