//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every op is evaluated eagerly when it is recorded, so a [`Var`]'s value
//! is available immediately. Calling [`Tape::backward`] on a scalar node
//! sweeps the tape once in reverse. Leaves created with [`Tape::constant`]
//! and everything computed only from constants are skipped by the sweep,
//! which keeps inference-only passes cheap.
//!
//! ```
//! use gns::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! assert_eq!(y.item(), 9.0);
//! let g = tape.gradient(y, &[x]).unwrap();
//! assert_eq!(g[0].item(), 6.0);
//! ```

mod kernels;
mod tape;
mod tensor;

pub use kernels::log_sum_exp;
pub use tape::{CustomOp, Grads, Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::{sigmoid, softplus};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("gradient root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let hi = f(&probe);
            probe[i] = orig - step;
            let lo = f(&probe);
            probe[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// `max|a - b| / max(max|a|, max|b|)`, the error measure used by gradient checks.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
