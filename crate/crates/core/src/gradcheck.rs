//! Central finite-difference gradient checks for f64 tensor functions.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|)` over whole gradient vectors.
    pub fn relative_error(&self) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = self.analytic.iter().zip(&self.numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&self.analytic).max(norm(&self.numeric));
        if scale == 0.0 {
            return 0.0;
        }
        norm(&diff) / scale
    }
}

/// Fixed random weights for reducing a non-scalar output to a scalar.
pub fn projection(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(w, shape, &Device::Cpu)?)
}

/// `sum(f(x) * w)` with `w` a seeded random projection of f's output.
pub fn projected<F>(f: F, seed: u64) -> impl Fn(&Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    move |x| {
        let y = f(x)?;
        let w = projection(y.dims(), seed)?;
        Ok((y * w)?.sum_all()?)
    }
}

/// Checks the autograd gradient of the scalar function `f` at `x` (f64)
/// against the five-point central difference with step `h`. The soft k-means
/// path is curved enough that the three-point stencil's O(h^2) error shows.
pub fn check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if x.dtype() != DType::F64 {
        return Err(Error::config("gradient checks run in f64"));
    }
    let var = Var::from_tensor(x)?;
    let y = f(var.as_tensor())?;
    if y.elem_count() != 1 {
        return Err(Error::shape("gradient check needs a scalar function"));
    }
    let grads = y.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x.elem_count()],
    };
    let base = x.flatten_all()?.to_vec1::<f64>()?;
    let eval = |v: &[f64]| -> Result<f64> {
        let t = Tensor::from_slice(v, x.dims(), &Device::Cpu)?;
        Ok(f(&t)?.sum_all()?.to_scalar::<f64>()?)
    };
    let mut numeric = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        let mut at = |offset: f64| -> Result<f64> {
            probe[i] = base[i] + offset;
            eval(&probe)
        };
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        probe[i] = base[i];
        numeric.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
    }
    Ok(GradCheck { analytic, numeric })
}
