//! Decomposes images into edge, colour-segmentation and grey-level histogram
//! descriptors, and learns to reconstruct images from those descriptors alone.

pub mod archive;
pub mod colour;
pub mod decoder;
pub mod descriptors;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod training;

pub use colour::{lab_to_rgb, rgb_to_lab, LabImage, RgbImage};
pub use error::{Error, Result};
