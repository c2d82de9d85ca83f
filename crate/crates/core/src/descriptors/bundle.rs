use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::edges::{extract_edges, EdgeMap};
use super::histogram::{extract_histogram, GreyLevelHistogram};
use super::segments::{extract_colour_segments, render_ab, ColourSegmentationMap, SegmentParams};
use crate::colour::{rgb_to_lab, RgbImage};
use crate::error::{Error, Result};

/// Scale applied to chromaticity before it enters the network or the colour loss.
pub const AB_SCALE: f64 = 128.0;

/// Every knob the extraction depends on. Stored with each bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    /// Number of colour clusters K.
    pub clusters: usize,
    pub num_bins: usize,
    /// Histogram kernel standard deviation, L units.
    pub bandwidth: f64,
    /// Soft-assignment temperature, squared ab units.
    pub temperature: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Pixels considered by k-means++ seeding.
    pub subsample: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            clusters: 6,
            num_bins: 100,
            bandwidth: 2.0,
            temperature: 25.0,
            iterations: 10,
            seed: 0,
            subsample: 1024,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 1 {
            return Err(Error::config("clusters must be >= 1"));
        }
        if self.num_bins < 2 {
            return Err(Error::config("num_bins must be >= 2"));
        }
        if !(self.bandwidth > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::config("bandwidth and temperature must be > 0"));
        }
        if self.iterations < 1 {
            return Err(Error::config("iterations must be >= 1"));
        }
        Ok(())
    }

    pub fn segment_params(&self) -> SegmentParams {
        SegmentParams {
            clusters: self.clusters,
            iterations: self.iterations,
            temperature: self.temperature,
            seed: self.seed,
            subsample: self.subsample,
        }
    }
}

/// The three descriptors of one image.
#[derive(Debug, Clone)]
pub struct DescriptorBundle {
    pub edges: EdgeMap,
    pub segmentation: ColourSegmentationMap,
    pub histogram: GreyLevelHistogram,
    pub config: ExtractionConfig,
}

impl DescriptorBundle {
    pub fn new(
        edges: EdgeMap,
        segmentation: ColourSegmentationMap,
        histogram: GreyLevelHistogram,
        config: ExtractionConfig,
    ) -> Result<Self> {
        let size = (edges.height(), edges.width());
        if (segmentation.height(), segmentation.width()) != size {
            return Err(Error::shape(format!(
                "edge map is {}x{} but segmentation is {}x{}",
                size.0,
                size.1,
                segmentation.height(),
                segmentation.width()
            )));
        }
        if segmentation.clusters() != config.clusters || histogram.num_bins() != config.num_bins {
            return Err(Error::shape("descriptor sizes disagree with extraction config"));
        }
        Ok(Self {
            edges,
            segmentation,
            histogram,
            config,
        })
    }

    pub fn height(&self) -> usize {
        self.edges.height()
    }

    pub fn width(&self) -> usize {
        self.edges.width()
    }

    pub fn dtype(&self) -> DType {
        self.edges.magnitude.dtype()
    }

    /// The `(3, H, W)` spatial encoder input: edge magnitude and the scaled
    /// colour render. Built from descriptor fields only.
    pub fn spatial_input(&self) -> Result<Tensor> {
        let edges = self.edges.magnitude.unsqueeze(0)?;
        let ab = (render_ab(&self.segmentation)?.permute((2, 0, 1))? / AB_SCALE)?;
        Ok(Tensor::cat(&[&edges, &ab], 0)?)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let seg = &self.segmentation;
        Ok(Self {
            edges: EdgeMap {
                magnitude: self.edges.magnitude.to_dtype(dtype)?,
                normalization: self.edges.normalization,
            },
            segmentation: ColourSegmentationMap {
                assignments: seg.assignments.to_dtype(dtype)?,
                centroids: seg.centroids.to_dtype(dtype)?,
                init_centroids: seg.init_centroids.to_dtype(dtype)?,
                temperature: seg.temperature,
            },
            histogram: GreyLevelHistogram {
                weights: self.histogram.weights.to_dtype(dtype)?,
                centres: self.histogram.centres.clone(),
                bandwidth: self.histogram.bandwidth,
            },
            config: self.config.clone(),
        })
    }

    /// Cuts every tensor loose from the autograd graph.
    pub fn detach(&self) -> Self {
        let seg = &self.segmentation;
        Self {
            edges: EdgeMap {
                magnitude: self.edges.magnitude.detach(),
                normalization: self.edges.normalization,
            },
            segmentation: ColourSegmentationMap {
                assignments: seg.assignments.detach(),
                centroids: seg.centroids.detach(),
                init_centroids: seg.init_centroids.detach(),
                temperature: seg.temperature,
            },
            histogram: GreyLevelHistogram {
                weights: self.histogram.weights.detach(),
                ..self.histogram.clone()
            },
            config: self.config.clone(),
        }
    }
}

/// Extracts all three descriptors from one shared LAB conversion.
pub fn extract_bundle(image: &RgbImage, config: &ExtractionConfig) -> Result<DescriptorBundle> {
    config.validate()?;
    let lab = rgb_to_lab(image)?;
    let edges = extract_edges(&lab)?;
    let histogram = extract_histogram(&lab, config.num_bins, config.bandwidth)?;
    let segmentation = extract_colour_segments(&lab, &config.segment_params())?;
    DescriptorBundle::new(edges, segmentation, histogram, config.clone())
}
