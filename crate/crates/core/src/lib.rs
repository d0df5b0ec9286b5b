//! Toy encoder-decoder transformer with a trainable bridge layer between the
//! encoder stack and every decoder layer.
//!
//! The bridge is one bias-free matrix per decoder layer. It maps the
//! concatenation of all encoder-layer hidden states at a source position to a
//! `d_model`-wide vector that the decoder layer uses as its cross-attention
//! memory. Different initializations of those matrices reproduce the stock
//! last-layer-only wiring, a layer-reversed routing, or free-form controls,
//! and the crate ships the training, evaluation and weight-analysis tooling
//! needed to study how the matrices move during training.

pub mod analysis;
pub mod bridge;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod manifest;
pub mod model;
pub mod tensor;
pub mod train;

pub use bridge::{BridgeWeights, InitScheme};
pub use model::{EncoderOutputs, ModelConfig, ModelError, ModelRun, ParamStore};
pub use tensor::{Graph, Scalar, Tensor, TensorError, TensorId};
