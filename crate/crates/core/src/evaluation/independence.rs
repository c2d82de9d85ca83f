//! Does editing one descriptor change only its own attribute of the output?

use candle_core::{DType, Tensor};
use serde::Serialize;

use crate::colour::{rgb_to_lab, RgbImage};
use crate::descriptors::{extract_edges, recolour_region, shift_histogram, DescriptorBundle};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Serialize)]
pub struct IndependenceReport {
    pub deltas: Vec<f64>,
    /// Mean L of each variant's reconstruction.
    pub mean_l: Vec<f64>,
    /// Mean absolute edge-map difference from the unshifted reconstruction.
    pub edge_l1: Vec<f64>,
    /// Mean absolute difference between the unshifted reconstruction's edge
    /// map and the input edge map.
    pub noise_floor: f64,
    /// Size of every decrease in mean L between consecutive sorted deltas.
    pub inversions: Vec<f64>,
}

impl IndependenceReport {
    /// Non-decreasing, allowing one dip of at most `tolerance` L units.
    pub fn monotone(&self, tolerance: f64) -> bool {
        match self.inversions.as_slice() {
            [] => true,
            [one] => *one <= tolerance,
            _ => false,
        }
    }

    /// Every edge distance within `factor` times the noise floor.
    pub fn structure_preserved(&self, factor: f64) -> bool {
        self.edge_l1.iter().all(|d| *d <= factor * self.noise_floor)
    }
}

fn mean(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
}

fn edge_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    mean(&(a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?.abs()?)
}

fn edges_of(img: &RgbImage) -> Result<Tensor> {
    Ok(extract_edges(&rgb_to_lab(img)?)?.magnitude)
}

/// Reconstructs with the histogram shifted by each delta, edges and
/// segmentation held fixed.
pub fn input_independence_report(model: &Model, bundle: &DescriptorBundle, deltas: &[f64]) -> Result<IndependenceReport> {
    let baseline = model.reconstruct(bundle)?;
    let base_edges = edges_of(&baseline)?;
    let noise_floor = edge_l1(&base_edges, &bundle.edges.magnitude)?;
    let (mut mean_l, mut dists) = (Vec::new(), Vec::new());
    for &delta in deltas {
        let recon = if delta == 0.0 {
            baseline.clone()
        } else {
            let mut edited = bundle.clone();
            edited.histogram = shift_histogram(&bundle.histogram, delta)?;
            model.reconstruct(&edited)?
        };
        mean_l.push(rgb_to_lab(&recon)?.mean_l()?);
        dists.push(edge_l1(&edges_of(&recon)?, &base_edges)?);
    }
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&i, &j| deltas[i].total_cmp(&deltas[j]));
    let inversions = order
        .windows(2)
        .filter_map(|w| {
            let drop = mean_l[w[0]] - mean_l[w[1]];
            (drop > 0.0).then_some(drop)
        })
        .collect();
    Ok(IndependenceReport {
        deltas: deltas.to_vec(),
        mean_l,
        edge_l1: dists,
        noise_floor,
        inversions,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ColourEditReport {
    pub cluster: usize,
    pub new_ab: [f64; 2],
    pub inside_pixels: usize,
    pub outside_pixels: usize,
    /// Mean per-pixel ab displacement of the reconstruction inside the
    /// cluster's argmax mask.
    pub inside_change: f64,
    pub outside_change: f64,
}

impl ColourEditReport {
    pub fn ratio(&self) -> f64 {
        if self.outside_change == 0.0 {
            return if self.inside_change > 0.0 { f64::INFINITY } else { 0.0 };
        }
        self.inside_change / self.outside_change
    }
}

/// Recolours one cluster and compares reconstructed chromaticity inside and
/// outside that cluster's region.
pub fn colour_edit_report(model: &Model, bundle: &DescriptorBundle, cluster: usize, new_ab: [f64; 2]) -> Result<ColourEditReport> {
    let mut edited = bundle.clone();
    edited.segmentation = recolour_region(&bundle.segmentation, cluster, new_ab)?;
    let before = rgb_to_lab(&model.reconstruct(bundle)?)?;
    let after = rgb_to_lab(&model.reconstruct(&edited)?)?;
    let flat = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?) };
    let (a0, b0, a1, b1) = (flat(&before.a)?, flat(&before.b)?, flat(&after.a)?, flat(&after.b)?);
    let labels = bundle.segmentation.argmax_labels()?;
    let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..labels.len() {
        let d = ((a1[i] - a0[i]).powi(2) + (b1[i] - b0[i]).powi(2)).sqrt();
        let acc = if labels[i] as usize == cluster { &mut inside } else { &mut outside };
        acc.0 += d;
        acc.1 += 1;
    }
    if inside.1 == 0 || outside.1 == 0 {
        return Err(Error::Range(format!(
            "cluster {cluster} covers {} of {} pixels; need a region with both sides non-empty",
            inside.1,
            labels.len()
        )));
    }
    Ok(ColourEditReport {
        cluster,
        new_ab,
        inside_pixels: inside.1,
        outside_pixels: outside.1,
        inside_change: inside.0 / inside.1 as f64,
        outside_change: outside.0 / outside.1 as f64,
    })
}
