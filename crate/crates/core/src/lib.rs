//! Audio-visual active speaker detection.
//!
//! Sliding-window audio and video encoders produce 512-D embedding sequences
//! for every five-frame window of a face track; a bidirectional LSTM or a
//! temporal-convolution back-end classifies the centre frame as speaking or
//! not. Scores can be ensembled, smoothed over time and evaluated with
//! average precision.

pub mod audio_features;
pub mod backends;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod postprocess;

pub use error::{Error, Result};
