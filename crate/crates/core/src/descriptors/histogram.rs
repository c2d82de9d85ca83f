use candle_core::{DType, Device, Tensor};

use crate::colour::LabImage;
use crate::error::{Error, Result};

pub const L_RANGE: (f64, f64) = (0.0, 100.0);

/// Gaussian-kernel grey-level histogram of the L channel.
#[derive(Debug, Clone)]
pub struct GreyLevelHistogram {
    /// `(num_bins,)` non-negative weights summing to one.
    pub weights: Tensor,
    /// Bin centres in L units, strictly increasing.
    pub centres: Vec<f64>,
    /// Kernel standard deviation in L units.
    pub bandwidth: f64,
}

impl GreyLevelHistogram {
    pub fn num_bins(&self) -> usize {
        self.centres.len()
    }

    pub fn weights_vec(&self) -> Result<Vec<f64>> {
        Ok(self.weights.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Spacing between neighbouring centres.
    pub fn bin_width(&self) -> f64 {
        let n = self.centres.len();
        (self.centres[n - 1] - self.centres[0]) / (n - 1) as f64
    }

    /// Expected L under the histogram.
    pub fn mean_l(&self) -> Result<f64> {
        let w = self.weights_vec()?;
        Ok(w.iter().zip(&self.centres).map(|(w, c)| w * c).sum())
    }

    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.num_bins() {
            return Err(Error::shape(format!(
                "{} weights for {} bins",
                weights.len(),
                self.num_bins()
            )));
        }
        let t = Tensor::from_slice(weights, weights.len(), &Device::Cpu)?
            .to_dtype(self.weights.dtype())?;
        Ok(Self {
            weights: t,
            centres: self.centres.clone(),
            bandwidth: self.bandwidth,
        })
    }
}

/// Centres at the midpoints of `num_bins` equal-width bins spanning `[0, 100]`.
pub fn bin_centres(num_bins: usize) -> Vec<f64> {
    let (lo, hi) = L_RANGE;
    let width = (hi - lo) / num_bins as f64;
    (0..num_bins).map(|i| lo + (i as f64 + 0.5) * width).collect()
}

/// Unnormalized kernel mass per bin for a flat tensor of L values.
fn kernel_mass(l: &Tensor, centres: &[f64], bandwidth: f64) -> Result<Tensor> {
    let n = centres.len();
    let p = l.elem_count();
    let c = Tensor::from_slice(centres, (1, n), &Device::Cpu)?.to_dtype(l.dtype())?;
    let diff = l.reshape((p, 1))?.broadcast_sub(&c)?;
    let k = diff
        .sqr()?
        .affine(-1.0 / (2.0 * bandwidth * bandwidth), 0.0)?
        .exp()?;
    Ok(k.sum(0)?)
}

/// Smooth histogram of a `(H, W)` L plane.
pub fn histogram_of_plane(l: &Tensor, num_bins: usize, bandwidth: f64) -> Result<GreyLevelHistogram> {
    if num_bins < 2 {
        return Err(Error::config(format!("num_bins must be >= 2, got {num_bins}")));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::config(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    let centres = bin_centres(num_bins);
    let mass = kernel_mass(&l.flatten_all()?, &centres, bandwidth)?;
    let weights = mass.broadcast_div(&mass.sum_all()?)?;
    Ok(GreyLevelHistogram {
        weights,
        centres,
        bandwidth,
    })
}

pub fn extract_histogram(lab: &LabImage, num_bins: usize, bandwidth: f64) -> Result<GreyLevelHistogram> {
    histogram_of_plane(&lab.l, num_bins, bandwidth)
}

/// Moves histogram mass by `delta_l` along the L axis.
///
/// Each bin's mass lands on the two bins bracketing its shifted centre, split by
/// linear interpolation; mass past either end piles into the boundary bin.
pub fn shift_histogram(hist: &GreyLevelHistogram, delta_l: f64) -> Result<GreyLevelHistogram> {
    if !delta_l.is_finite() {
        return Err(Error::Range(format!("brightness shift {delta_l}")));
    }
    if delta_l == 0.0 {
        return Ok(hist.clone());
    }
    let weights = hist.weights_vec()?;
    let n = weights.len();
    let offset = delta_l / hist.bin_width();
    let mut out = vec![0.0; n];
    for (i, &w) in weights.iter().enumerate() {
        let target = i as f64 + offset;
        let lo = target.floor();
        let frac = target - lo;
        let clamp = |j: f64| j.max(0.0).min((n - 1) as f64) as usize;
        out[clamp(lo)] += w * (1.0 - frac);
        out[clamp(lo + 1.0)] += w * frac;
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    hist.with_weights(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_plane(h: usize, w: usize, v: f64) -> Tensor {
        Tensor::full(v, (h, w), &Device::Cpu).unwrap()
    }

    fn weights(h: &GreyLevelHistogram) -> Vec<f64> {
        h.weights_vec().unwrap()
    }

    #[test]
    fn centres_cover_l_range() {
        let c = bin_centres(100);
        assert_eq!(c.len(), 100);
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[99] - 99.5).abs() < 1e-12);
        assert!(c.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn sums_to_one() {
        let v: Vec<f64> = (0..48).map(|i| (i * 37 % 101) as f64).collect();
        let l = Tensor::from_vec(v, (6, 8), &Device::Cpu).unwrap();
        let s: f64 = weights(&histogram_of_plane(&l, 100, 2.0).unwrap()).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_fifty_is_symmetric_about_fifty() {
        let h = histogram_of_plane(&constant_plane(4, 4, 50.0), 100, 2.0).unwrap();
        let w = weights(&h);
        let argmax = (0..100).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
        // centres 49.5 and 50.5 tie for nearest
        assert!(argmax == 49 || argmax == 50);
        for j in 0..50 {
            assert!((w[49 - j] - w[50 + j]).abs() < 1e-6);
        }
    }

    #[test]
    fn half_and_half_is_mean_of_constant_histograms() {
        let v: Vec<f64> = (0..32).map(|i| if i < 16 { 20.0 } else { 80.0 }).collect();
        let mixed = histogram_of_plane(&Tensor::from_vec(v, (4, 8), &Device::Cpu).unwrap(), 100, 2.0).unwrap();
        let a = weights(&histogram_of_plane(&constant_plane(4, 8, 20.0), 100, 2.0).unwrap());
        let b = weights(&histogram_of_plane(&constant_plane(4, 8, 80.0), 100, 2.0).unwrap());
        for (i, m) in weights(&mixed).iter().enumerate() {
            assert!((m - 0.5 * (a[i] + b[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let l = constant_plane(2, 2, 10.0);
        assert!(matches!(histogram_of_plane(&l, 1, 2.0), Err(Error::Config(_))));
        assert!(matches!(histogram_of_plane(&l, 10, 0.0), Err(Error::Config(_))));
    }

    fn delta_hist(at: usize) -> GreyLevelHistogram {
        let mut w = vec![0.0; 100];
        w[at] = 1.0;
        let h = histogram_of_plane(&constant_plane(1, 2, 1.0), 100, 2.0).unwrap();
        h.with_weights(&w).unwrap()
    }

    #[test]
    fn zero_shift_is_identity() {
        let h = histogram_of_plane(&constant_plane(3, 3, 33.0), 100, 2.0).unwrap();
        assert_eq!(weights(&shift_histogram(&h, 0.0).unwrap()), weights(&h));
    }

    #[test]
    fn whole_bin_shift_moves_peak() {
        // centre 49.5 is index 49; +10 L with unit bins lands exactly on index 59
        let shifted = weights(&shift_histogram(&delta_hist(49), 10.0).unwrap());
        assert!((shifted[59] - 1.0).abs() < 1e-6);
        assert!(shifted.iter().enumerate().all(|(i, v)| i == 59 || v.abs() < 1e-6));
    }

    #[test]
    fn fractional_shift_splits_mass() {
        let shifted = weights(&shift_histogram(&delta_hist(10), 2.25).unwrap());
        assert!((shifted[12] - 0.75).abs() < 1e-12);
        assert!((shifted[13] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn overflow_piles_into_boundary_bins() {
        let up = weights(&shift_histogram(&delta_hist(95), 30.0).unwrap());
        assert!((up[99] - 1.0).abs() < 1e-12);
        let down = weights(&shift_histogram(&delta_hist(3), -12.5).unwrap());
        assert!((down[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shift_preserves_total_mass() {
        let v: Vec<f64> = (0..64).map(|i| (i * 13 % 97) as f64).collect();
        let h = histogram_of_plane(&Tensor::from_vec(v, (8, 8), &Device::Cpu).unwrap(), 100, 2.0).unwrap();
        for d in [-45.3, -7.0, 0.4, 19.9, 80.0] {
            let s: f64 = weights(&shift_histogram(&h, d).unwrap()).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
