//! Seeded synthetic images: small scenes for overfitting and a ten-class
//! periodic-pattern set for probing.

use std::path::Path;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colour::RgbImage;
use crate::error::{Error, Result};
use crate::evaluation::LabelledImages;

pub const PATTERN_CLASSES: [&str; 10] = [
    "hstripes-fine",
    "hstripes-coarse",
    "vstripes-fine",
    "vstripes-coarse",
    "diagonal",
    "antidiagonal",
    "checker-fine",
    "checker-coarse",
    "dots",
    "rings",
];

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn luma(c: [f64; 3]) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

// Renders with 2x2 supersampling; `paint` returns the colour at (x, y) in
// pixel units.
fn render(size: usize, paint: impl Fn(f64, f64) -> [f64; 3]) -> Result<RgbImage> {
    let mut v = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let c = paint(x as f64 + dx, y as f64 + dy);
                for k in 0..3 {
                    acc[k] += c[k] / 4.0;
                }
            }
            v.extend_from_slice(&acc);
        }
    }
    RgbImage::from_hwc(&v, size, size, DType::F32)
}

/// Gradient background with two or three discs and rectangles.
pub fn scene(size: usize, seed: u64) -> Result<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (top, bottom) = (colour(&mut rng), colour(&mut rng));
    let count = rng.random_range(2..=3);
    let s = size as f64;
    let shapes: Vec<(bool, f64, f64, f64, f64, [f64; 3])> = (0..count)
        .map(|_| {
            (
                rng.random_bool(0.5),
                rng.random_range(0.2..0.8) * s,
                rng.random_range(0.2..0.8) * s,
                rng.random_range(0.1..0.25) * s,
                rng.random_range(0.1..0.25) * s,
                colour(&mut rng),
            )
        })
        .collect();
    render(size, |x, y| {
        let t = y / s;
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = top[k] * (1.0 - t) + bottom[k] * t;
        }
        for &(disc, cx, cy, rx, ry, fill) in &shapes {
            let inside = if disc {
                ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) < 1.0
            } else {
                (x - cx).abs() < rx && (y - cy).abs() < ry
            };
            if inside {
                c = fill;
            }
        }
        c
    })
}

pub fn scenes(n: usize, size: usize, seed: u64) -> Result<Vec<RgbImage>> {
    (0..n).map(|i| scene(size, seed.wrapping_mul(1000).wrapping_add(i as u64))).collect()
}

fn frac(t: f64) -> f64 {
    t - t.floor()
}

// Foreground test at (x, y) for a pattern with period `p`, phase `(px, py)`
// and centre `(cx, cy)` (rings only).
fn on(class: usize, x: f64, y: f64, p: f64, px: f64, py: f64, cx: f64, cy: f64) -> bool {
    let stripe = |t: f64, period: f64| frac(t / period) < 0.5;
    match class {
        0 => stripe(y + py, p),
        1 => stripe(y + py, 2.0 * p),
        2 => stripe(x + px, p),
        3 => stripe(x + px, 2.0 * p),
        4 => stripe(x + y + px, 1.5 * p),
        5 => stripe(x - y + px, 1.5 * p),
        6 => stripe(x + px, p) == stripe(y + py, p),
        7 => stripe(x + px, 2.0 * p) == stripe(y + py, 2.0 * p),
        8 => {
            let q = 2.0 * p;
            let (u, v) = (frac((x + px) / q) - 0.5, frac((y + py) / q) - 0.5);
            (u * u + v * v).sqrt() < 0.25
        }
        _ => stripe(((x - cx).powi(2) + (y - cy).powi(2)).sqrt(), 1.5 * p),
    }
}

/// One full-frame periodic pattern; colours, phase and period vary.
pub fn pattern(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<RgbImage> {
    if class >= PATTERN_CLASSES.len() {
        return Err(Error::Index {
            what: "pattern classes",
            index: class,
            len: PATTERN_CLASSES.len(),
        });
    }
    let s = size as f64;
    let (fg, bg) = loop {
        let (f, b) = (colour(rng), colour(rng));
        if (luma(f) - luma(b)).abs() > 0.25 {
            break (f, b);
        }
    };
    let p = rng.random_range(3.6..4.4) * s / 32.0;
    let (px, py) = (rng.random_range(0.0..4.0 * p), rng.random_range(0.0..4.0 * p));
    let (cx, cy) = (rng.random_range(0.25..0.75) * s, rng.random_range(0.25..0.75) * s);
    render(size, |x, y| if on(class, x, y, p, px, py, cx, cy) { fg } else { bg })
}

/// `per_class` images for each of the first `classes` patterns, classes
/// interleaved.
pub fn patterns(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<LabelledImages> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for _ in 0..per_class {
        for c in 0..classes {
            images.push(pattern(c, size, &mut rng)?);
            labels.push(c);
        }
    }
    let names = PATTERN_CLASSES.iter().take(classes).map(|s| s.to_string()).collect();
    LabelledImages::new(names, images, labels)
}

/// Writes `root/<class>/<index>.png`.
pub fn write_labelled(data: &LabelledImages, root: &Path) -> Result<()> {
    for name in &data.class_names {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let path = root.join(&data.class_names[label]).join(format!("{i:05}.png"));
        img.to_rgb8()?.save(&path)?;
    }
    Ok(())
}

/// Writes `root/<index>.png`.
pub fn write_images(images: &[RgbImage], root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (i, img) in images.iter().enumerate() {
        img.to_rgb8()?.save(root.join(format!("{i:05}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_in_range() {
        let a = scene(32, 7).unwrap().to_hwc().unwrap();
        let b = scene(32, 7).unwrap().to_hwc().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, scene(32, 8).unwrap().to_hwc().unwrap());
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn patterns_are_balanced() {
        let d = patterns(10, 3, 24, 0).unwrap();
        assert_eq!(d.len(), 30);
        for c in 0..10 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 3);
        }
        assert!(pattern(10, 24, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn every_class_covers_part_of_the_frame() {
        for c in 0..10 {
            let hits = (0..1024).filter(|i| on(c, (i % 32) as f64, (i / 32) as f64, 4.0, 1.0, 2.0, 16.0, 16.0)).count();
            assert!(hits > 100 && hits < 900, "class {c}: {hits}");
        }
    }

    #[test]
    fn folders_load_back() {
        let d = patterns(3, 2, 16, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_labelled(&d, dir.path()).unwrap();
        let back = LabelledImages::load(dir.path(), 16).unwrap();
        let mut names = d.class_names.clone();
        names.sort();
        assert_eq!(back.class_names, names);
        assert_eq!(back.len(), 6);
    }
}
