//! Minimal transformer building blocks on candle tensors with named,
//! deterministically initialized parameters.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;

/// Named trainable parameters, ordered by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// SHA-256 over names, shapes and f32 bytes of the matching parameters.
    pub fn digest(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in self.vars.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for x in vals {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrites a parameter in place; every module holding it sees the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!(
                "{name}: stored {:?}, given {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::config(format!("parameter {name} defined twice")));
        }
        let v = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.vars.insert(name, v.clone());
        Ok(v)
    }
}

/// Creates parameters under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        Init {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}{}.", self.prefix, name),
        }
    }

    fn name(&self, n: &str) -> String {
        format!("{}{}", self.prefix, n)
    }

    fn from_values(&mut self, n: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?;
        let name = self.name(n);
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, n: &str, shape: &[usize]) -> Result<Var> {
        let count = shape.iter().product();
        self.from_values(n, vec![0.0; count], shape)
    }

    pub fn ones(&mut self, n: &str, shape: &[usize]) -> Result<Var> {
        let count = shape.iter().product();
        self.from_values(n, vec![1.0; count], shape)
    }

    pub fn normal(&mut self, n: &str, shape: &[usize], std: f64) -> Result<Var> {
        let count = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let values = (0..count).map(|_| dist.sample(self.rng)).collect();
        self.from_values(n, values, shape)
    }

    /// Glorot uniform for a `(fan_in, fan_out)` matrix.
    pub fn xavier(&mut self, n: &str, fan_in: usize, fan_out: usize) -> Result<Var> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.from_values(n, values, &[fan_in, fan_out])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    Xavier,
    Zero,
}

/// `y = x W + b` over the last dimension, with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, w: WeightInit) -> Result<Self> {
        let mut p = init.sub(name);
        let weight = match w {
            WeightInit::Xavier => p.xavier("weight", fan_in, fan_out)?,
            WeightInit::Zero => p.zeros("weight", &[fan_in, fan_out])?,
        };
        let bias = p.zeros("bias", &[fan_out])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| Error::shape("scalar input to linear layer"))?;
        let rows = x.elem_count() / fan_in.max(1);
        let y = x
            .reshape((rows, fan_in))?
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dims()[1];
        Ok(y.reshape(out)?)
    }
}

/// Normalizes over the last dimension without an affine transform.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centred.broadcast_div(&var.affine(1.0, LN_EPS)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        let mut p = init.sub(name);
        Ok(Self {
            gamma: p.ones("gamma", &[dim])?,
            beta: p.zeros("beta", &[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm(x)?
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Scaled dot-product attention over `(B, heads, T, dh)` inputs.
fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dh = q.dims()[3];
    let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
    Ok(softmax_last(&scores)?.matmul(v)?)
}

/// `(B, T, D)` -> `(B, heads, T, D / heads)`
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    Ok(x.reshape((b, t, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, t, h * dh))?)
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("width {dim} not divisible by {heads} heads")));
        }
        let mut p = init.sub(name);
        Ok(Self {
            qkv: Linear::new(&mut p, "qkv", dim, 3 * dim, WeightInit::Xavier)?,
            proj: Linear::new(&mut p, "proj", dim, dim, WeightInit::Xavier)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, d) = x.dims3()?;
        let qkv = self.qkv.forward(x)?;
        let q = split_heads(&qkv.narrow(2, 0, d)?, self.heads)?;
        let k = split_heads(&qkv.narrow(2, d, d)?, self.heads)?;
        let v = split_heads(&qkv.narrow(2, 2 * d, d)?, self.heads)?;
        self.proj.forward(&merge_heads(&attend(&q, &k, &v)?)?)
    }
}

/// Queries from the token stream, keys and values from a context sequence.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("width {dim} not divisible by {heads} heads")));
        }
        let mut p = init.sub(name);
        Ok(Self {
            q: Linear::new(&mut p, "q", dim, dim, WeightInit::Xavier)?,
            kv: Linear::new(&mut p, "kv", dim, 2 * dim, WeightInit::Xavier)?,
            proj: Linear::new(&mut p, "proj", dim, dim, WeightInit::Xavier)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (_, _, d) = x.dims3()?;
        let q = split_heads(&self.q.forward(x)?, self.heads)?;
        let kv = self.kv.forward(context)?;
        let k = split_heads(&kv.narrow(2, 0, d)?, self.heads)?;
        let v = split_heads(&kv.narrow(2, d, d)?, self.heads)?;
        self.proj.forward(&merge_heads(&attend(&q, &k, &v)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let mut p = init.sub(name);
        Ok(Self {
            fc1: Linear::new(&mut p, "fc1", dim, hidden, WeightInit::Xavier)?,
            fc2: Linear::new(&mut p, "fc2", hidden, dim, WeightInit::Xavier)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer block: self-attention then MLP, both residual.
#[derive(Debug, Clone)]
pub struct PlainBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl PlainBlock {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        let mut p = init.sub(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut p, "norm1", dim)?,
            attn: SelfAttention::new(&mut p, "attn", dim, heads)?,
            norm2: LayerNorm::new(&mut p, "norm2", dim)?,
            mlp: Mlp::new(&mut p, "mlp", dim, (dim as f64 * mlp_ratio) as usize)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// Fixed 2-D sine-cosine position table `(gh * gw, dim)`, row-major over the grid.
///
/// The first half of each vector encodes the row, the second half the column.
pub fn sincos_2d(gh: usize, gw: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    if !dim.is_multiple_of(4) {
        return Err(Error::config(format!("embedding width {dim} must be divisible by 4")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let encode = |pos: f64, out: &mut Vec<f64>| {
        out.extend(omega.iter().map(|w| (pos * w).sin()));
        out.extend(omega.iter().map(|w| (pos * w).cos()));
    };
    let mut table = Vec::with_capacity(gh * gw * dim);
    for y in 0..gh {
        for x in 0..gw {
            encode(y as f64, &mut table);
            encode(x as f64, &mut table);
        }
    }
    Ok(Tensor::from_vec(table, (gh * gw, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_matches_manual_product() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut Init::new(&mut store, &mut rng, ""), "l", 3, 2, WeightInit::Xavier).unwrap();
        let x = Tensor::new(&[[[1.0f64, 2.0, -1.0]]], &Device::Cpu).unwrap();
        let y = lin.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let w = lin.weight.as_tensor().to_vec2::<f64>().unwrap();
        for j in 0..2 {
            let want = w[0][j] + 2.0 * w[1][j] - w[2][j];
            assert!((y[j] - want).abs() < 1e-12);
        }
        assert_eq!(store.len(), 2);
        assert!(store.get("l.weight").is_some());
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut store = ParamStore::new(DType::F32);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            Mlp::new(&mut Init::new(&mut store, &mut rng, "m."), "mlp", 8, 16).unwrap();
            store.digest("").unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = layer_norm(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000.0f64, 1001.0, 999.0], [-3.0, 0.0, 2.0]], &Device::Cpu).unwrap();
        for row in softmax_last(&x).unwrap().to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sincos_table_shape_and_origin() {
        let t = sincos_2d(3, 4, 8, DType::F64).unwrap();
        assert_eq!(t.dims(), &[12, 8]);
        let first = t.get(0).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(first, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(sincos_2d(2, 2, 6, DType::F64).is_err());
    }
}
