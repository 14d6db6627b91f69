//! Neural building blocks over the differentiation tape.
//!
//! Layers own no tensors themselves; they hold [`ParamId`]s into a
//! [`ParamStore`] and read the bound graph variables through a [`Binding`].

pub mod attention;
pub mod batchnorm;
pub mod container;
pub mod convlstm;
pub mod dense;
pub mod params;

pub use attention::{AttentionHead, EncoderBlock};
pub use batchnorm::{BatchNormLayer, StatUpdate};
pub use container::ParamContainer;
pub use convlstm::{ConvLSTMLayer, Gate, GateInput};
pub use dense::Dense;
pub use params::{Binding, Param, ParamId, ParamStore};

/// Forward-pass mode. Only batch normalization distinguishes the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
