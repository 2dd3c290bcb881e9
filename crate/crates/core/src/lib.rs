//! Desk-scale multi-rater segmentation framework.
//!
//! The crate implements a probabilistic U-Net whose decoder features pass
//! through an attention-based harmonization module, a wavelet-domain
//! personalization head that adapts latent codes to individual raters, the
//! two-phase training pipeline that wires them together, and the synthetic
//! multi-rater data generator plus evaluation suite used to exercise the
//! whole system. Everything computes in f64 with seeded randomness, so every
//! result in the crate is reproducible bit for bit.

pub mod backbone;
pub mod error;
pub mod harmonizer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod personalizer;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::adam::{AdamConfig, AdamState};
pub use tensor::conv::Conv2dSpec;
pub use tensor::params::{ParamId, ParamSet};
pub use tensor::tape::{Tape, Var};
pub use tensor::Tensor;
pub use wavelet::FrequencyBands;
