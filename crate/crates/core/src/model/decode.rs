//! Greedy autoregressive decoding.

use crate::data::TokenMatrix;
use crate::tensor::{Scalar, TensorId};

use super::{ModelConfig, ModelError, ModelRun, ParamStore, Trainability};

/// Greedy-decode one source sentence: start from bos, append the argmax token
/// each step (ties broken toward the lowest id), stop at eos, `max_len`
/// emitted tokens, or the model's context limit. Returns the emitted ids
/// without bos/eos.
///
/// The encoder and bridge run once; each step appends only a decoder pass to
/// the same graph.
pub fn greedy_decode<S: Scalar>(
    config: &ModelConfig,
    store: &ParamStore<S>,
    src: &[u32],
    max_len: usize,
) -> Result<Vec<u32>, ModelError> {
    let mut run = ModelRun::new(config, store, Trainability::Frozen)?;
    let src_m = if src.is_empty() {
        TokenMatrix::new(1, 1, vec![config.pad_id])
    } else {
        TokenMatrix::new(1, src.len(), src.to_vec())
    };
    let enc = run.encoder_forward(&src_m)?;
    let memories: Vec<TensorId> = (0..config.n_dec_layers)
        .map(|i| run.memory(&enc, i))
        .collect::<Result<_, _>>()?;

    let vocab = config.vocab_size;
    let mut out: Vec<u32> = Vec::new();
    while out.len() < max_len {
        let mut prefix = Vec::with_capacity(out.len() + 1);
        prefix.push(config.bos_id);
        prefix.extend_from_slice(&out);
        if prefix.len() > config.max_seq_len {
            break;
        }
        let t = prefix.len();
        let tgt = TokenMatrix::new(1, t, prefix);
        let logits = run.decoder_over_memories(&tgt, &memories, &enc.src_pad)?;
        let last = &run.graph.data(logits)[(t - 1) * vocab..t * vocab];
        let next = argmax_lowest(last);
        if next == config.eos_id {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// Index of the maximum value; on ties the lowest index wins.
fn argmax_lowest<S: Scalar>(row: &[S]) -> u32 {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}
