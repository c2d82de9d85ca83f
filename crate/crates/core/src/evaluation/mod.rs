//! Reconstruction metrics, representation probes, descriptor-edit
//! independence checks and the cluster-count sweep.

pub mod independence;
pub mod metrics;
pub mod probe;
pub mod sweep;

pub use independence::{colour_edit_report, input_independence_report, ColourEditReport, IndependenceReport};
pub use metrics::{psnr, ssim, ClassScore, MetricReport};
pub use probe::{probe, LabelledImages, ProbeConfig, ProbeData, ProbeMode, ProbeReport, Representation};
pub use sweep::{sweep_clusters, write_sweep_csv, SweepRecipe, SweepRow, DEFAULT_SWEEP, REFERENCE_ACCURACY};
