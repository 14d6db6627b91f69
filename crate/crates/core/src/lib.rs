//! Recurrent-convolutional multi-station weather forecasting.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`graph`]: dense `f64` tensors and a reverse-mode tape.
//! * [`layers`]: ConvLSTM, batch normalization, dense layers, single-head
//!   attention and the encoder block, plus the parameter container format.
//! * [`models`]: the Unistream / Multistream forecasters (with and without
//!   the encoder block).
//! * [`data`]: ingestion of the long-form station CSV, min-max scaling,
//!   windowing and chronological splitting.
//! * [`training`]: MSE + Adam training and per-city descaled evaluation.
//! * [`explain`]: occlusion analysis, score maximization and heatmap output.

pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use layers::Mode;
pub use models::{Forecaster, LinearForecaster, ModelConfig, ModelGraph, Variant};
pub use tensor::Tensor;
