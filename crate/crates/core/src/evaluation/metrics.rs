//! PSNR and SSIM on `[0, 1]` images, computed on the host in f64.

use serde::{Serialize, Serializer};

use crate::colour::RgbImage;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn planes(a: &RgbImage, b: &RgbImage) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "metric inputs differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let flat = |img: &RgbImage| -> Result<Vec<f64>> {
        Ok(img.tensor().to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    };
    Ok((flat(a)?, flat(b)?))
}

/// `10 log10(1 / MSE)`; `f64::INFINITY` for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let (x, y) = planes(a, b)?;
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

// Separable valid-mode filtering of an h x w plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows, averaged over channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let (x, y) = planes(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..3 {
        let p = &x[c * h * w..(c + 1) * h * w];
        let q = &y[c * h * w..(c + 1) * h * w];
        let prod = |f: fn(f64, f64) -> f64| p.iter().zip(q).map(|(u, v)| f(*u, *v)).collect::<Vec<_>>();
        let mx = filter_valid(p, h, w, &taps);
        let my = filter_valid(q, h, w, &taps);
        let mxx = filter_valid(&prod(|u, _| u * u), h, w, &taps);
        let myy = filter_valid(&prod(|_, v| v * v), h, w, &taps);
        let mxy = filter_valid(&prod(|u, v| u * v), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Infinite PSNR is written as the string `"inf"`.
pub fn serialize_db<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" }),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub class: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(serialize_with = "serialize_db", skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<ClassScore>,
}

impl MetricReport {
    pub fn reconstruction(original: &RgbImage, recon: &RgbImage) -> Result<Self> {
        Ok(Self {
            psnr: Some(psnr(original, recon)?),
            ssim: Some(ssim(original, recon)?),
            ..Self::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> (Vec<f64>, RgbImage) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
        let img = RgbImage::from_hwc(&v, h, w, DType::F64).unwrap();
        (v, img)
    }

    #[test]
    fn psnr_cases() {
        let (_, a) = random(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let g = RgbImage::constant(8, 8, [0.3; 3], DType::F64).unwrap();
        let g2 = RgbImage::constant(8, 8, [0.4; 3], DType::F64).unwrap();
        assert!((psnr(&g, &g2).unwrap() - 20.0).abs() < 1e-9);
        let (va, a) = random(8, 8, 2);
        let (vb, b) = random(8, 8, 3);
        let mut se = 0.0;
        for i in 0..va.len() {
            se += (va[i] - vb[i]) * (va[i] - vb[i]);
        }
        let oracle = 10.0 * (1.0 / (se / va.len() as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
        let small = RgbImage::constant(4, 8, [0.3; 3], DType::F64).unwrap();
        assert!(psnr(&a, &small).is_err());
    }

    #[test]
    fn report_writes_infinity_as_string() {
        let r = MetricReport { psnr: Some(f64::INFINITY), ssim: Some(1.0), ..Default::default() };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"psnr":"inf","ssim":1.0}"#);
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert!((w[i] - w[10 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn ssim_identity_and_size_check() {
        let (_, a) = random(16, 16, 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let (_, small) = random(10, 16, 5);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_constant_closed_form() {
        let (c, d) = (0.4, 0.5);
        let a = RgbImage::constant(12, 12, [c; 3], DType::F64).unwrap();
        let b = RgbImage::constant(12, 12, [d; 3], DType::F64).unwrap();
        let expected = (2.0 * c * d + SSIM_C1) / (c * c + d * d + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn inverted_checkerboard_is_negative() {
        let n = 16;
        let v: Vec<f64> = (0..n * n).flat_map(|i| [((i / n + i % n) % 2) as f64; 3]).collect();
        let inv: Vec<f64> = v.iter().map(|x| 1.0 - x).collect();
        let a = RgbImage::from_hwc(&v, n, n, DType::F64).unwrap();
        let b = RgbImage::from_hwc(&inv, n, n, DType::F64).unwrap();
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    // Direct 2-D window loop, no separability.
    fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let g = gaussian_window(11, 1.5);
        let mut total = 0.0;
        for c in 0..3 {
            let at = |v: &[f64], r: usize, col: usize| v[(r * w + col) * 3 + c];
            let mut sum = 0.0;
            let mut count = 0;
            for r0 in 0..=h - 11 {
                for c0 in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let k = g[i] * g[j];
                            let (p, q) = (at(x, r0 + i, c0 + j), at(y, r0 + i, c0 + j));
                            mx += k * p;
                            my += k * q;
                            sxx += k * p * p;
                            syy += k * q * q;
                            sxy += k * p * q;
                        }
                    }
                    let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    sum += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    count += 1;
                }
            }
            total += sum / count as f64;
        }
        total / 3.0
    }

    #[test]
    fn ssim_matches_window_loop() {
        for seed in 0..3 {
            let (va, a) = random(13, 15, 10 + seed);
            let (vb, b) = random(13, 15, 20 + seed);
            // Correlate b with a so the score is not near zero.
            let mix: Vec<f64> = va.iter().zip(&vb).map(|(p, q)| 0.7 * p + 0.3 * q).collect();
            let m = RgbImage::from_hwc(&mix, 13, 15, DType::F64).unwrap();
            assert!((ssim(&a, &m).unwrap() - ssim_oracle(&va, &mix, 13, 15)).abs() < 1e-6);
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&va, &vb, 13, 15)).abs() < 1e-6);
        }
    }
}
