//! Encoder-decoder transformer with per-layer encoder taps and bridged
//! cross-attention memory.
//!
//! The encoder keeps the hidden states of *all* layers. For decoder layer `i`
//! the cross-attention memory is either the last encoder layer (stock wiring)
//! or, when the bridge is enabled, the concatenation of all encoder layer
//! states multiplied by that layer's bias-free bridge matrix.

mod decode;
mod params;
mod run;

pub use decode::greedy_decode;
pub use params::{bridge_param_name, BodyInit, ParamStore};
pub use run::{EncoderOutputs, ModelRun, Trainability};

use serde::{Deserialize, Serialize};

use crate::data::{BOS_ID, EOS_ID, PAD_ID, RESERVED_TOKENS};
use crate::tensor::TensorError;

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;
/// Additive attention-mask bias for disallowed positions.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("decoder layer {layer} out of range; model has {count}")]
    LayerOutOfRange { layer: usize, count: usize },
    #[error("parameter {name} missing from store")]
    MissingParam { name: String },
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unexpected parameter {name} in store")]
    UnexpectedParam { name: String },
    #[error("bridge is disabled in this config")]
    BridgeDisabled,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_seq_len: usize,
    pub pad_id: u32,
    pub bos_id: u32,
    pub eos_id: u32,
    pub bridge_enabled: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough to train on one CPU core in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_enc_layers: 4,
            n_dec_layers: 4,
            max_seq_len: 64,
            pad_id: PAD_ID,
            bos_id: BOS_ID,
            eos_id: EOS_ID,
            bridge_enabled: false,
        }
    }

    /// The reference architecture scale: d_model 512, six layers per stack,
    /// which makes each bridge matrix 3072x512.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            n_enc_layers: 6,
            n_dec_layers: 6,
            max_seq_len: 64,
            pad_id: PAD_ID,
            bos_id: BOS_ID,
            eos_id: EOS_ID,
            bridge_enabled: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("d_model, n_heads and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return fail("layer counts must be positive".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return fail(format!(
                "vocab_size {} leaves no room beyond the {} reserved ids",
                self.vocab_size, RESERVED_TOKENS
            ));
        }
        let ids = [self.pad_id, self.bos_id, self.eos_id];
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            return fail("pad/bos/eos ids must be distinct".into());
        }
        if ids.iter().any(|id| *id as usize >= self.vocab_size) {
            return fail("pad/bos/eos ids must be < vocab_size".into());
        }
        Ok(())
    }
}
