//! Frequency-domain domain generalization toolkit.
//!
//! Images are decomposed per channel into amplitude and phase spectra. Training
//! views get their amplitude interpolated toward a random partner while the
//! phase is kept, and an encoder is trained to classify both views while
//! matching patch embeddings of the two views across an online and a
//! momentum-averaged network.

pub mod ablation;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fourier;
pub mod model;
pub mod nn;
pub mod objective;
pub mod raster;
pub mod rng;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
pub use raster::ImageTensor;
