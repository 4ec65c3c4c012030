//! Learned components: coarse U-Net lung and heart segmenters and the Segment Anything
//! adapter, both built on candle and running on the CPU.

pub mod coarse;
pub mod error;
pub mod sam;
pub mod unet;

pub use coarse::{train_model, CoarseModel, TrainOptions, WEIGHTS_FILE};
pub use error::{ModelError, Result};
pub use sam::SamSegmenter;
