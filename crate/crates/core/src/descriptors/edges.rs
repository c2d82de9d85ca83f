use candle_core::{Device, Tensor};

use crate::colour::LabImage;
use crate::error::{Error, Result};

/// Smoothing constant under the square root; keeps the magnitude differentiable at zero.
pub const SOBEL_DELTA: f64 = 1e-8;

/// Sobel kernel for the horizontal derivative, cross-correlation orientation.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
/// Sobel kernel for the vertical derivative.
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Largest Sobel magnitude reachable by a 3x3 window with values in `[0, 100]`.
///
/// The magnitude is convex in the window, so the maximum sits on a vertex of the
/// `[0, 100]^9` cube; all 512 vertices are enumerated.
pub fn max_sobel_response() -> f64 {
    (0u32..512)
        .map(|bits| {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for i in 0..9 {
                if bits & (1 << i) != 0 {
                    gx += SOBEL_X[i / 3][i % 3] * 100.0;
                    gy += SOBEL_Y[i / 3][i % 3] * 100.0;
                }
            }
            (gx * gx + gy * gy).sqrt()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct EdgeMap {
    /// `(H, W)` normalized gradient magnitude.
    pub magnitude: Tensor,
    /// Divisor applied to the raw magnitude.
    pub normalization: f64,
}

impl EdgeMap {
    pub fn height(&self) -> usize {
        self.magnitude.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.magnitude.dims()[1]
    }
}

/// Reflect (mirror without repeating the edge) indices for a 1-pixel border.
pub(crate) fn reflect_indices(n: usize) -> Vec<u32> {
    let n = n as i64;
    (-1..=n)
        .map(|i| {
            let r = if n == 1 {
                0
            } else if i < 0 {
                -i
            } else if i >= n {
                2 * n - 2 - i
            } else {
                i
            };
            r as u32
        })
        .collect()
}

/// Raw `(Gx, Gy)` Sobel responses of a `(H, W)` plane under reflect padding.
pub fn sobel_gradients(plane: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w) = plane.dims2()?;
    let dev = Device::Cpu;
    let rows = Tensor::new(reflect_indices(h), &dev)?;
    let cols = Tensor::new(reflect_indices(w), &dev)?;
    let padded = plane
        .index_select(&rows, 0)?
        .index_select(&cols, 1)?
        .reshape((1, 1, h + 2, w + 2))?;
    let kernel: Vec<f64> = SOBEL_X.iter().chain(SOBEL_Y.iter()).flatten().copied().collect();
    let kernel = Tensor::from_vec(kernel, (2, 1, 3, 3), &dev)?.to_dtype(plane.dtype())?;
    let out = padded.conv2d(&kernel, 0, 1, 1, 1)?;
    let gx = out.get(0)?.get(0)?;
    let gy = out.get(0)?.get(1)?;
    Ok((gx, gy))
}

/// Unnormalized smoothed magnitude `sqrt(Gx^2 + Gy^2 + delta)` of a plane.
pub fn sobel_magnitude(plane: &Tensor) -> Result<Tensor> {
    let (gx, gy) = sobel_gradients(plane)?;
    Ok((gx.sqr()? + gy.sqr()?)?.affine(1.0, SOBEL_DELTA)?.sqrt()?)
}

/// Sobel edge map of the L channel, scaled into `[0, 1]`.
pub fn extract_edges(lab: &LabImage) -> Result<EdgeMap> {
    if lab.height() < 1 || lab.width() < 1 {
        return Err(Error::shape("empty image"));
    }
    let normalization = max_sobel_response();
    let magnitude = (sobel_magnitude(&lab.l)? / normalization)?;
    Ok(EdgeMap {
        magnitude,
        normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn plane(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let v: Vec<f64> = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::from_vec(v, (h, w), &Device::Cpu).unwrap()
    }

    fn lab_from_l(l: Tensor) -> LabImage {
        let z = l.zeros_like().unwrap();
        LabImage::new(l, z.clone(), z).unwrap()
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect_indices(4), vec![1, 0, 1, 2, 3, 2]);
        assert_eq!(reflect_indices(1), vec![0, 0, 0]);
    }

    #[test]
    fn max_response_between_axis_and_diagonal_bounds() {
        let m = max_sobel_response();
        // two-sided bound: the axis-aligned step reaches 400, the unattainable corner bound is 400*sqrt(2)
        assert!(m >= 400.0 && m < 400.0 * 2f64.sqrt(), "{m}");
    }

    #[test]
    fn constant_plane_has_no_edges() {
        let edges = extract_edges(&lab_from_l(plane(6, 7, |_, _| 50.0))).unwrap();
        let max = edges.magnitude.max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(max <= SOBEL_DELTA.sqrt(), "{max}");
    }

    #[test]
    fn unit_ramp_interior_response_is_eight() {
        let l = plane(6, 6, |_, x| x as f64);
        let (gx, gy) = sobel_gradients(&l).unwrap();
        let gx = gx.to_vec2::<f64>().unwrap();
        let gy = gy.to_vec2::<f64>().unwrap();
        let mag = sobel_magnitude(&l).unwrap().to_vec2::<f64>().unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert!((gx[y][x] - 8.0).abs() < 1e-12);
                assert!(gy[y][x].abs() < 1e-12);
                assert!((mag[y][x] - 8.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn vertical_step_matches_direct_convolution() {
        let h = 8;
        let w = 8;
        let step = 37.5;
        let f = |_: usize, x: usize| if x >= 4 { step } else { 0.0 };
        let (gx, _) = sobel_gradients(&plane(h, w, f)).unwrap();
        let gx = gx.to_vec2::<f64>().unwrap();
        // brute-force cross-correlation over interior pixels
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += SOBEL_X[dy][dx] * f(y + dy - 1, x + dx - 1);
                    }
                }
                assert_eq!(gx[y][x], acc, "at ({y},{x})");
            }
        }
        assert_eq!(gx[3][3], 4.0 * step);
        assert_eq!(gx[3][4], 4.0 * step);
    }

    #[test]
    fn magnitudes_are_non_negative() {
        let l = plane(5, 9, |y, x| ((y * 31 + x * 17) % 13) as f64 * 7.0);
        let edges = extract_edges(&lab_from_l(l.to_dtype(DType::F32).unwrap())).unwrap();
        let min = edges.magnitude.min_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(min >= 0.0);
    }
}
