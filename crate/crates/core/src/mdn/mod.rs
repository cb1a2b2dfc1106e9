//! Mixture-density heads and the canvas-conditioned networks that emit them.
//!
//! All three models share a strided convolutional canvas encoder. The
//! location model maps the encoding to a mixture over stroke starts, the
//! stroke model is an LSTM with additive attention over the encoded grid
//! that emits a mixture over the next offset plus a stop logit, and the
//! termination model maps the encoding to a stop-drawing logit. Mixtures
//! live in normalized coordinates; see [`ArchConfig::normalize`].

mod gmm;
mod network;

pub use gmm::{gmm_log_pdf_var, raw_len, GmmParams, RHO_LIMIT, SCALE_FLOOR};
pub use network::{canvas_batch, ArchConfig, Bound, NetworkWeights, StrokeState};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AdError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdnError {
    #[error("invalid mixture: {0}")]
    InvalidGmm(String),
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

/// Sampling temperature and seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(temperature: f64, seed: u64) -> Result<Self, MdnError> {
        if !(temperature > 0.0 && temperature <= 16.0) {
            return Err(MdnError::Config(format!("temperature {temperature} outside (0, 16]")));
        }
        Ok(Self { temperature, seed })
    }
}
