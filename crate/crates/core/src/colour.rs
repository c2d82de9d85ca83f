//! sRGB <-> CIE-LAB (D65) conversion on tensors.
//!
//! Both directions are built from differentiable tensor ops so that
//! gradients flow from any LAB-derived descriptor back to RGB pixels.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// D65 reference white in XYZ.
pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

/// Linear sRGB -> XYZ (D65).
pub const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

/// An sRGB image stored channel-first as a `(3, H, W)` tensor with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct RgbImage {
    data: Tensor,
}

impl RgbImage {
    pub fn new(data: Tensor) -> Result<Self> {
        let (c, h, w) = data.dims3()?;
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "expected a (3, H, W) image tensor, got {:?}",
                data.dims()
            )));
        }
        Ok(Self { data })
    }

    /// Builds an image from interleaved `H x W x 3` values.
    pub fn from_hwc(values: &[f64], height: usize, width: usize, dtype: DType) -> Result<Self> {
        if values.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{} values cannot fill a {height}x{width}x3 image",
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, (height, width, 3), &Device::Cpu)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?;
        Self::new(t)
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3], dtype: DType) -> Result<Self> {
        let values: Vec<f64> = (0..height * width).flat_map(|_| rgb).collect();
        Self::from_hwc(&values, height, width, dtype)
    }

    pub fn from_rgb8(img: &image::RgbImage, dtype: DType) -> Result<Self> {
        let (w, h) = img.dimensions();
        let values: Vec<f64> = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Self::from_hwc(&values, h as usize, w as usize, dtype)
    }

    /// Quantizes to 8 bits, clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        let hwc = self.to_hwc()?;
        let bytes = hwc
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width() as u32, self.height() as u32, bytes)
            .ok_or_else(|| Error::shape("pixel buffer does not match image size"))
    }

    /// Interleaved `H x W x 3` values in f64.
    pub fn to_hwc(&self) -> Result<Vec<f64>> {
        Ok(self
            .data
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            data: self.data.to_dtype(dtype)?,
        })
    }
}

/// CIE-LAB image with separate `(H, W)` planes.
#[derive(Debug, Clone)]
pub struct LabImage {
    pub l: Tensor,
    pub a: Tensor,
    pub b: Tensor,
}

impl LabImage {
    pub fn new(l: Tensor, a: Tensor, b: Tensor) -> Result<Self> {
        let dims = l.dims2()?;
        if a.dims2()? != dims || b.dims2()? != dims {
            return Err(Error::shape("L, a and b planes must share H x W"));
        }
        Ok(Self { l, a, b })
    }

    /// Mean of the L plane.
    pub fn mean_l(&self) -> Result<f64> {
        Ok(self.l.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
    }

    pub fn height(&self) -> usize {
        self.l.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.l.dims()[1]
    }

    /// Per-pixel chromaticity as a `(H*W, 2)` tensor.
    pub fn ab_pixels(&self) -> Result<Tensor> {
        let a = self.a.flatten_all()?;
        let b = self.b.flatten_all()?;
        Ok(Tensor::stack(&[a, b], 1)?)
    }
}

fn matrix_tensor(m: &[[f64; 3]; 3], dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (3, 3), &Device::Cpu)?.to_dtype(dtype)?)
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            // cofactor of (c, r) for the adjugate
            let rows: Vec<usize> = (0..3).filter(|&i| i != c).collect();
            let cols: Vec<usize> = (0..3).filter(|&j| j != r).collect();
            let minor = m[rows[0]][cols[0]] * m[rows[1]][cols[1]]
                - m[rows[0]][cols[1]] * m[rows[1]][cols[0]];
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            *v = sign * minor / det;
        }
    }
    inv
}

fn srgb_to_linear(x: &Tensor) -> Result<Tensor> {
    let knee = 0.04045;
    let hi = ((x.maximum(knee)? + 0.055)? / 1.055)?.powf(2.4)?;
    let lo = (x / 12.92)?;
    Ok(x.gt(knee)?.where_cond(&hi, &lo)?)
}

fn linear_to_srgb(x: &Tensor) -> Result<Tensor> {
    let knee = 0.0031308;
    let hi = ((x.maximum(knee)?.powf(1.0 / 2.4)? * 1.055)? - 0.055)?;
    let lo = (x * 12.92)?;
    Ok(x.gt(knee)?.where_cond(&hi, &lo)?)
}

fn lab_f(t: &Tensor) -> Result<Tensor> {
    let hi = t.maximum(LAB_EPSILON)?.powf(1.0 / 3.0)?;
    let lo = t.affine(LAB_KAPPA / 116.0, 16.0 / 116.0)?;
    Ok(t.gt(LAB_EPSILON)?.where_cond(&hi, &lo)?)
}

fn lab_f_inv(f: &Tensor) -> Result<Tensor> {
    let cube = f.powf(3.0)?;
    let lo = f.affine(116.0 / LAB_KAPPA, -16.0 / LAB_KAPPA)?;
    Ok(cube.gt(LAB_EPSILON)?.where_cond(&cube, &lo)?)
}

/// Converts sRGB in `[0, 1]` to CIE-LAB under a D65 white point.
pub fn rgb_to_lab(image: &RgbImage) -> Result<LabImage> {
    let x = image.tensor();
    let (_, h, w) = x.dims3()?;
    let dtype = x.dtype();
    let lin = srgb_to_linear(x)?.reshape((3, h * w))?;
    let xyz = matrix_tensor(&SRGB_TO_XYZ, dtype)?.matmul(&lin)?;
    let white = Tensor::from_slice(&D65_WHITE, (3, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let f = lab_f(&xyz.broadcast_div(&white)?)?;
    let fx = f.get(0)?;
    let fy = f.get(1)?;
    let fz = f.get(2)?;
    let l = fy.affine(116.0, -16.0)?.reshape((h, w))?;
    let a = ((&fx - &fy)? * 500.0)?.reshape((h, w))?;
    let b = ((&fy - &fz)? * 200.0)?.reshape((h, w))?;
    LabImage::new(l, a, b)
}

/// Converts CIE-LAB back to sRGB, clamping out-of-gamut values into `[0, 1]`.
pub fn lab_to_rgb(lab: &LabImage) -> Result<RgbImage> {
    let (h, w) = lab.l.dims2()?;
    let dtype = lab.l.dtype();
    let fy = lab.l.affine(1.0 / 116.0, 16.0 / 116.0)?.flatten_all()?;
    let fx = (&fy + lab.a.flatten_all()?.affine(1.0 / 500.0, 0.0)?)?;
    let fz = (&fy - lab.b.flatten_all()?.affine(1.0 / 200.0, 0.0)?)?;
    let f = Tensor::stack(&[fx, fy, fz], 0)?;
    let white = Tensor::from_slice(&D65_WHITE, (3, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let xyz = lab_f_inv(&f)?.broadcast_mul(&white)?;
    let lin = matrix_tensor(&invert3(&SRGB_TO_XYZ), dtype)?
        .matmul(&xyz)?
        .clamp(0.0, 1.0)?;
    let rgb = linear_to_srgb(&lin)?.clamp(0.0, 1.0)?.reshape((3, h, w))?;
    RgbImage::new(rgb)
}
