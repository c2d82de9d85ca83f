//! The three classical descriptors: Sobel edges, soft k-means colour
//! segmentation and a Gaussian-kernel grey-level histogram.

mod bundle;
pub mod edges;
pub mod edit;
pub mod histogram;
pub mod preview;
pub mod segments;
pub mod vsd;

pub use bundle::{extract_bundle, DescriptorBundle, ExtractionConfig, AB_SCALE};
pub use edges::{extract_edges, EdgeMap};
pub use edit::{apply_edit, apply_edits, parse_script, EditOp};
pub use histogram::{extract_histogram, shift_histogram, GreyLevelHistogram};
pub use segments::{
    extract_colour_segments, recolour_region, render_ab, render_segmentation, resegment_from,
    soft_kmeans, ColourSegmentationMap, SegmentParams, SegmentationRender,
};
