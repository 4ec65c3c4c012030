//! Automatic point-prompt generation for promptable lung-field segmentation in chest
//! radiographs.
//!
//! The pipeline: a coarse lung model and a coarse heart model run on a downscaled copy of the
//! radiograph; their masks are split into lung / heart / outside regions; PAM k-medoids picks
//! two positive points in the lungs, five negatives outside and three negatives in the heart;
//! a promptable segmenter turns the prompts into a full-resolution mask, which is cleaned with
//! a morphological opening and scored with Dice, IoU and Cohen's kappa.
//!
//! The learned components (coarse U-Nets, the foundation segmenter) live behind the
//! [`prelim::MaskPredictor`] and [`segmenter::PromptableSegmenter`] traits so the whole
//! pipeline runs hermetically against the stand-ins in [`prelim::BandPredictor`] and
//! [`segmenter::FakeSegmenter`].

pub mod clustering;
pub mod dataset;
pub mod error;
pub mod fixtures;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod postprocess;
pub mod prelim;
pub mod prompting;
pub mod segmenter;

pub use error::{Error, Result};
pub use grid::{BinaryMask, Coord, CxrImage};
