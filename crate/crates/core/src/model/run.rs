//! Graph-building forward passes: encoder, bridge, decoder, loss.

use std::collections::BTreeMap;

use crate::data::{ParallelBatch, TokenMatrix};
use crate::tensor::{Graph, Scalar, Tensor, TensorId};

use super::params::bridge_param_name;
use super::{ModelConfig, ModelError, ParamStore, LN_EPS, MASK_BIAS};

/// Which parameters receive gradients in this run.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Trainability {
    All,
    Frozen,
    /// Only `bridge.*` parameters train; the body stays fixed.
    BridgeOnly,
}

impl Trainability {
    fn trains(self, name: &str) -> bool {
        match self {
            Trainability::All => true,
            Trainability::Frozen => false,
            Trainability::BridgeOnly => name.starts_with("bridge."),
        }
    }
}

/// All per-layer encoder hidden states for one source batch, each taken after
/// the layer's final residual+norm, ordered lowest layer first.
#[derive(Debug, Clone)]
pub struct EncoderOutputs {
    pub layers: Vec<TensorId>,
    /// Row-major `[batch, src_len]` pad flags for masking cross-attention.
    pub src_pad: Vec<bool>,
    pub batch: usize,
    pub src_len: usize,
}

/// One forward-capable model instance: a graph with all parameters registered
/// as leaves. Build one per training step (or one per decoded sentence).
pub struct ModelRun<S: Scalar> {
    pub graph: Graph<S>,
    config: ModelConfig,
    ids: BTreeMap<String, TensorId>,
}

impl<S: Scalar> ModelRun<S> {
    pub fn new(
        config: &ModelConfig,
        store: &ParamStore<S>,
        trainability: Trainability,
    ) -> Result<Self, ModelError> {
        store.validate(config)?;
        let mut graph = Graph::new();
        let mut ids = BTreeMap::new();
        for (name, tensor) in store.iter() {
            let id = graph.param(name, tensor, trainability.trains(name));
            ids.insert(name.clone(), id);
        }
        Ok(Self {
            graph,
            config: config.clone(),
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn pid(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} was validated at construction"))
    }

    /// Copy current graph values of every parameter back into a store (after
    /// an optimizer writes updated values into the graph this is not needed;
    /// it exists for tests that mutate through the graph).
    pub fn snapshot_params(&self) -> ParamStore<S> {
        let mut store = ParamStore::new();
        for (name, id) in &self.ids {
            store.insert(name.clone(), self.graph.value(*id));
        }
        store
    }

    // ---- shared building blocks -----------------------------------------

    /// Token embedding lookup, scaled by sqrt(d_model), plus sinusoidal
    /// position encoding.
    fn embed(&mut self, tokens: &TokenMatrix) -> Result<TensorId, ModelError> {
        let (b, t, d) = (tokens.rows, tokens.cols, self.config.d_model);
        if t > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        let table = self.pid("emb.tok");
        let flat = self.graph.gather(table, &tokens.ids)?;
        let emb = self.graph.reshape(flat, vec![b, t, d])?;
        let scaled = self.graph.scale(emb, S::from_f64((d as f64).sqrt()));
        let pe = self.graph.constant(position_encoding::<S>(b, t, d));
        Ok(self.graph.add(scaled, pe)?)
    }

    fn layer_norm(&mut self, x: TensorId, prefix: &str) -> Result<TensorId, ModelError> {
        let g = self.pid(&format!("{prefix}.g"));
        let b = self.pid(&format!("{prefix}.b"));
        Ok(self.graph.layer_norm(x, g, b, S::from_f64(LN_EPS))?)
    }

    fn residual_norm(
        &mut self,
        x: TensorId,
        sublayer: TensorId,
        ln_prefix: &str,
    ) -> Result<TensorId, ModelError> {
        let sum = self.graph.add(x, sublayer)?;
        self.layer_norm(sum, ln_prefix)
    }

    fn feed_forward(&mut self, x: TensorId, prefix: &str) -> Result<TensorId, ModelError> {
        let w1 = self.pid(&format!("{prefix}.w1"));
        let b1 = self.pid(&format!("{prefix}.b1"));
        let w2 = self.pid(&format!("{prefix}.w2"));
        let b2 = self.pid(&format!("{prefix}.b2"));
        let h = self.graph.matmul(x, w1)?;
        let h = self.graph.add_row(h, b1)?;
        let h = self.graph.relu(h);
        let h = self.graph.matmul(h, w2)?;
        Ok(self.graph.add_row(h, b2)?)
    }

    /// Multi-head scaled dot-product attention. `mask` is an optional
    /// additive `[batch*heads, tq, tk]` bias (0 allowed, MASK_BIAS blocked).
    fn attention(
        &mut self,
        q_in: TensorId,
        kv_in: TensorId,
        prefix: &str,
        mask: Option<TensorId>,
    ) -> Result<TensorId, ModelError> {
        let heads = self.config.n_heads;
        let head_dim = self.config.head_dim();
        let wq = self.pid(&format!("{prefix}.wq"));
        let wk = self.pid(&format!("{prefix}.wk"));
        let wv = self.pid(&format!("{prefix}.wv"));
        let wo = self.pid(&format!("{prefix}.wo"));
        let q = self.graph.matmul(q_in, wq)?;
        let k = self.graph.matmul(kv_in, wk)?;
        let v = self.graph.matmul(kv_in, wv)?;
        let qh = self.graph.split_heads(q, heads)?;
        let kh = self.graph.split_heads(k, heads)?;
        let vh = self.graph.split_heads(v, heads)?;
        let scores = self.graph.bmm_nt(qh, kh)?;
        let scaled = self
            .graph
            .scale(scores, S::from_f64(1.0 / (head_dim as f64).sqrt()));
        let biased = match mask {
            Some(m) => self.graph.add(scaled, m)?,
            None => scaled,
        };
        let attn = self.graph.softmax(biased, 2)?;
        let ctx = self.graph.bmm_nn(attn, vh)?;
        let merged = self.graph.merge_heads(ctx, heads)?;
        Ok(self.graph.matmul(merged, wo)?)
    }

    /// Additive bias masking pad keys: `[batch*heads, tq, tk]`.
    fn pad_mask_bias(&mut self, pad: &[bool], batch: usize, tq: usize, tk: usize) -> TensorId {
        debug_assert_eq!(pad.len(), batch * tk);
        let heads = self.config.n_heads;
        let mut data = vec![S::ZERO; batch * heads * tq * tk];
        for b in 0..batch {
            for k in 0..tk {
                if !pad[b * tk + k] {
                    continue;
                }
                for h in 0..heads {
                    let base = ((b * heads + h) * tq) * tk + k;
                    for q in 0..tq {
                        data[base + q * tk] = S::from_f64(MASK_BIAS);
                    }
                }
            }
        }
        self.graph.constant(
            Tensor::new(vec![batch * heads, tq, tk], data).expect("mask shape consistent"),
        )
    }

    /// Additive bias blocking attention to future positions.
    fn causal_mask_bias(&mut self, batch: usize, t: usize) -> TensorId {
        let heads = self.config.n_heads;
        let mut block = vec![S::ZERO; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                block[i * t + j] = S::from_f64(MASK_BIAS);
            }
        }
        let mut data = Vec::with_capacity(batch * heads * t * t);
        for _ in 0..batch * heads {
            data.extend_from_slice(&block);
        }
        self.graph.constant(
            Tensor::new(vec![batch * heads, t, t], data).expect("mask shape consistent"),
        )
    }

    // ---- encoder ---------------------------------------------------------

    /// Run the encoder stack, returning every layer's hidden states.
    pub fn encoder_forward(&mut self, src: &TokenMatrix) -> Result<EncoderOutputs, ModelError> {
        let (batch, src_len) = (src.rows, src.cols);
        let src_pad: Vec<bool> = src
            .ids
            .iter()
            .map(|id| *id == self.config.pad_id)
            .collect();
        let mut x = self.embed(src)?;
        let mask = self.pad_mask_bias(&src_pad, batch, src_len, src_len);
        let mut layers = Vec::with_capacity(self.config.n_enc_layers);
        for i in 0..self.config.n_enc_layers {
            let sa = self.attention(x, x, &format!("enc.l{i}.sa"), Some(mask))?;
            x = self.residual_norm(x, sa, &format!("enc.l{i}.ln1"))?;
            let ff = self.feed_forward(x, &format!("enc.l{i}.ff"))?;
            x = self.residual_norm(x, ff, &format!("enc.l{i}.ln2"))?;
            layers.push(x);
        }
        Ok(EncoderOutputs {
            layers,
            src_pad,
            batch,
            src_len,
        })
    }

    // ---- bridge ----------------------------------------------------------

    /// Bridge output for one decoder layer: concatenate all encoder layer
    /// states per position (layer 0 first) and multiply by that layer's
    /// bridge matrix. Errors if the bridge is disabled.
    pub fn bridge_forward(
        &mut self,
        enc: &EncoderOutputs,
        dec_layer: usize,
    ) -> Result<TensorId, ModelError> {
        if dec_layer >= self.config.n_dec_layers {
            return Err(ModelError::LayerOutOfRange {
                layer: dec_layer,
                count: self.config.n_dec_layers,
            });
        }
        if !self.config.bridge_enabled {
            return Err(ModelError::BridgeDisabled);
        }
        let cat = self.graph.concat_cols(&enc.layers)?;
        let w = self.pid(&bridge_param_name(dec_layer));
        Ok(self.graph.matmul(cat, w)?)
    }

    /// Cross-attention memory for a decoder layer: bridge output when the
    /// bridge is enabled, otherwise the last encoder layer (stock wiring).
    pub fn memory(
        &mut self,
        enc: &EncoderOutputs,
        dec_layer: usize,
    ) -> Result<TensorId, ModelError> {
        if dec_layer >= self.config.n_dec_layers {
            return Err(ModelError::LayerOutOfRange {
                layer: dec_layer,
                count: self.config.n_dec_layers,
            });
        }
        if self.config.bridge_enabled {
            self.bridge_forward(enc, dec_layer)
        } else {
            Ok(*enc.layers.last().expect("encoder has at least one layer"))
        }
    }

    // ---- decoder ---------------------------------------------------------

    /// Decoder stack over explicit per-layer memories (one per decoder
    /// layer). `src_pad` masks memory positions during cross-attention; the
    /// bridge map is position-wise, so pad positions stay pad positions.
    pub fn decoder_over_memories(
        &mut self,
        tgt_in: &TokenMatrix,
        memories: &[TensorId],
        src_pad: &[bool],
    ) -> Result<TensorId, ModelError> {
        assert_eq!(memories.len(), self.config.n_dec_layers);
        let (batch, t) = (tgt_in.rows, tgt_in.cols);
        let src_len = src_pad.len() / batch;
        let mut y = self.embed(tgt_in)?;
        let causal = self.causal_mask_bias(batch, t);
        let cross = self.pad_mask_bias(src_pad, batch, t, src_len);
        for i in 0..self.config.n_dec_layers {
            let sa = self.attention(y, y, &format!("dec.l{i}.sa"), Some(causal))?;
            y = self.residual_norm(y, sa, &format!("dec.l{i}.ln1"))?;
            let ca = self.attention(y, memories[i], &format!("dec.l{i}.ca"), Some(cross))?;
            y = self.residual_norm(y, ca, &format!("dec.l{i}.ln2"))?;
            let ff = self.feed_forward(y, &format!("dec.l{i}.ff"))?;
            y = self.residual_norm(y, ff, &format!("dec.l{i}.ln3"))?;
        }
        let out_w = self.pid("out.w");
        let out_b = self.pid("out.b");
        let logits = self.graph.matmul(y, out_w)?;
        Ok(self.graph.add_row(logits, out_b)?)
    }

    /// Full decoder pass: memory per layer comes from the bridge (or the last
    /// encoder layer when the bridge is disabled).
    pub fn decoder_forward(
        &mut self,
        tgt_in: &TokenMatrix,
        enc: &EncoderOutputs,
    ) -> Result<TensorId, ModelError> {
        let memories: Vec<TensorId> = (0..self.config.n_dec_layers)
            .map(|i| self.memory(enc, i))
            .collect::<Result<_, _>>()?;
        self.decoder_over_memories(tgt_in, &memories, &enc.src_pad)
    }

    /// Teacher-forced cross-entropy loss over one batch.
    pub fn training_loss(&mut self, batch: &ParallelBatch) -> Result<TensorId, ModelError> {
        let enc = self.encoder_forward(&batch.src)?;
        let logits = self.decoder_forward(&batch.tgt_in, &enc)?;
        Ok(self
            .graph
            .cross_entropy(logits, &batch.tgt_out.ids, self.config.pad_id)?)
    }
}

/// Sinusoidal position table tiled over the batch: `[batch, t, d]`.
fn position_encoding<S: Scalar>(batch: usize, t: usize, d: usize) -> Tensor<S> {
    let mut row_block = vec![S::ZERO; t * d];
    for pos in 0..t {
        let mut i = 0;
        while i < d {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            row_block[pos * d + i] = S::from_f64(angle.sin());
            if i + 1 < d {
                row_block[pos * d + i + 1] = S::from_f64(angle.cos());
            }
            i += 2;
        }
    }
    let mut data = Vec::with_capacity(batch * t * d);
    for _ in 0..batch {
        data.extend_from_slice(&row_block);
    }
    Tensor::new(vec![batch, t, d], data).expect("generated data length matches shape")
}
