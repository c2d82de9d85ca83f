//! The `.vsd` descriptor bundle file (format "VSD1").

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::bundle::{DescriptorBundle, ExtractionConfig};
use super::edges::EdgeMap;
use super::histogram::GreyLevelHistogram;
use super::segments::ColourSegmentationMap;
use crate::archive::{self, ArrayEntry, NamedArray};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VSD1";
pub const FORMAT: &str = "VSD1";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    extraction: ExtractionConfig,
    edge_normalization: f64,
    /// Starting centroids of the clustering, needed to re-segment comparably.
    seg_init_centroids: Vec<[f32; 2]>,
    arrays: Vec<ArrayEntry>,
}

const ARRAY_NAMES: [&str; 5] = [
    "edge_magnitude",
    "seg_assignments",
    "seg_centroids",
    "hist_weights",
    "hist_centres",
];

pub fn encode_bundle(bundle: &DescriptorBundle) -> Result<Vec<u8>> {
    let seg = &bundle.segmentation;
    let centres = Tensor::from_slice(&bundle.histogram.centres, bundle.histogram.num_bins(), &Device::Cpu)?;
    let arrays = vec![
        NamedArray::from_tensor(ARRAY_NAMES[0], &bundle.edges.magnitude)?,
        NamedArray::from_tensor(ARRAY_NAMES[1], &seg.assignments)?,
        NamedArray::from_tensor(ARRAY_NAMES[2], &seg.centroids)?,
        NamedArray::from_tensor(ARRAY_NAMES[3], &bundle.histogram.weights)?,
        NamedArray::from_tensor(ARRAY_NAMES[4], &centres)?,
    ];
    let init = NamedArray::from_tensor("init", &seg.init_centroids)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        height: bundle.height(),
        width: bundle.width(),
        extraction: bundle.config.clone(),
        edge_normalization: bundle.edges.normalization,
        seg_init_centroids: init.data.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        arrays: archive::array_table(&arrays),
    };
    archive::encode(MAGIC, &manifest, &arrays)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<DescriptorBundle> {
    let (manifest, payload) = archive::split(bytes, MAGIC, FORMAT, VERSION)?;
    let m: Manifest = serde_json::from_slice(manifest)?;
    let names: Vec<&str> = m.arrays.iter().map(|e| e.name.as_str()).collect();
    if names != ARRAY_NAMES {
        return Err(Error::Format(format!("unexpected array table {names:?}")));
    }
    let arrays = archive::decode_arrays(payload, &m.arrays)?;
    let (h, w, k, n) = (m.height, m.width, m.extraction.clusters, m.extraction.num_bins);
    let expect: [&[usize]; 5] = [&[h, w], &[h, w, k], &[k, 2], &[n], &[n]];
    for (a, s) in arrays.iter().zip(expect) {
        if a.shape != s {
            return Err(Error::Format(format!("{} has shape {:?}, expected {s:?}", a.name, a.shape)));
        }
    }
    if m.seg_init_centroids.len() != k {
        return Err(Error::Format("initial centroid count disagrees with K".into()));
    }
    let init: Vec<f32> = m.seg_init_centroids.iter().flatten().copied().collect();
    let dtype = DType::F32;
    let edges = EdgeMap {
        magnitude: arrays[0].to_tensor(dtype)?,
        normalization: m.edge_normalization,
    };
    let segmentation = ColourSegmentationMap {
        assignments: arrays[1].to_tensor(dtype)?,
        centroids: arrays[2].to_tensor(dtype)?,
        init_centroids: Tensor::from_vec(init, (k, 2), &Device::Cpu)?,
        temperature: m.extraction.temperature,
    };
    let histogram = GreyLevelHistogram {
        weights: arrays[3].to_tensor(dtype)?,
        centres: arrays[4].data.iter().map(|&v| v as f64).collect(),
        bandwidth: m.extraction.bandwidth,
    };
    DescriptorBundle::new(edges, segmentation, histogram, m.extraction)
}

pub fn write_bundle(path: &Path, bundle: &DescriptorBundle) -> Result<()> {
    archive::write_file(path, &encode_bundle(bundle)?)
}

pub fn read_bundle(path: &Path) -> Result<DescriptorBundle> {
    decode_bundle(&archive::read_file(path)?)
}
