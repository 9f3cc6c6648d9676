//! Sketch cleanup: synthetic rough/clean sketch pairs, a fully convolutional
//! encoder-decoder trained with a KDE-weighted class-balanced loss, image
//! quality metrics, and a small retrieval harness for measuring how much
//! cleaning helps sketch-based search.

pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod retrieval;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
