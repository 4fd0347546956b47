//! Cross-user activity recognition via temporal-state domain adaptation.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`autodiff`] — a minimal reverse-mode differentiation
//!   engine over plain row-major arrays, generic over the scalar type.
//! * [`labeling`] — temporal-state pseudo labeling: cosine distances,
//!   switch-penalty matrices and the minimum-cost state path.
//! * [`data`] / [`synth`] — sensor ingestion, sliding-window segmentation
//!   and a synthetic cross-user generator with known ground truth.
//! * [`networks`] / [`training`] — the adversarial three-component model
//!   and its training loop.
//! * [`eval`] / [`experiment`] — metrics, baselines and the experiment
//!   runner emitting CSV/SVG reports.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod labeling;
pub mod model_io;
pub mod networks;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

/// Scalar type used by the model stack. The numeric core is generic over
/// [`scalar::Real`]; everything above it runs in 64-bit precision.
pub type Scalar = f64;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = autodiff::Graph<f64>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("model file error: {0}")]
    ModelFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
