//! Occlusion-aware memory-based refinement (OMR) for video lane detection.
//!
//! The crate is self-contained: a small `f64` tensor library with tape-based
//! reverse-mode autodiff, an eigenlane curve basis, the intra-frame lane
//! network with its latent obstacle head, the recurrent refinement module, a
//! deterministic synthetic road-video generator, two-step training, and
//! image/video lane metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod eigenlane;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod omr;
pub mod par;
pub mod params;
pub mod raster;
pub mod render;
pub mod rng;
pub mod scenegen;
pub mod tensor;
pub mod training;

pub use autodiff::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
