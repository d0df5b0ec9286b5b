//! Named parameter storage and initialization.
//!
//! Parameters live in a sorted map so iteration, optimization and
//! checkpointing all see the same deterministic order. Names follow a fixed
//! dotted scheme, e.g. `enc.l0.sa.wq`, `dec.l2.ca.wo`, `bridge.l1.w`.

use std::collections::BTreeMap;

use crate::bridge::{init_random_xavier, BridgeWeights};
use crate::tensor::{Scalar, Tensor};

use super::{ModelConfig, ModelError};

/// How non-bridge ("body") weight matrices are initialized in retrain mode.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BodyInit {
    /// Seeded Xavier-uniform matrices, zero biases, unit gains.
    Xavier,
    /// Every weight matrix entry exactly 1 (mean 1, variance 0) — the
    /// degenerate constant scheme; biases zero, gains one.
    Ones,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Kind {
    /// Weight matrix: follows the body init scheme.
    Matrix,
    /// Additive bias: zeros.
    Bias,
    /// Layer-norm gain: ones.
    Gain,
}

/// Every expected parameter for a config, in registration order, with shape
/// and initialization kind. The bridge matrices appear only when enabled.
fn expected_params(config: &ModelConfig) -> Vec<(String, Vec<usize>, Kind)> {
    let d = config.d_model;
    let ff = config.d_ff;
    let v = config.vocab_size;
    let mut out: Vec<(String, Vec<usize>, Kind)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: Kind| out.push((name, shape, kind));

    push("emb.tok".into(), vec![v, d], Kind::Matrix);
    for i in 0..config.n_enc_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("enc.l{i}.sa.{w}"), vec![d, d], Kind::Matrix);
        }
        push(format!("enc.l{i}.ln1.g"), vec![d], Kind::Gain);
        push(format!("enc.l{i}.ln1.b"), vec![d], Kind::Bias);
        push(format!("enc.l{i}.ff.w1"), vec![d, ff], Kind::Matrix);
        push(format!("enc.l{i}.ff.b1"), vec![ff], Kind::Bias);
        push(format!("enc.l{i}.ff.w2"), vec![ff, d], Kind::Matrix);
        push(format!("enc.l{i}.ff.b2"), vec![d], Kind::Bias);
        push(format!("enc.l{i}.ln2.g"), vec![d], Kind::Gain);
        push(format!("enc.l{i}.ln2.b"), vec![d], Kind::Bias);
    }
    for i in 0..config.n_dec_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("dec.l{i}.sa.{w}"), vec![d, d], Kind::Matrix);
        }
        push(format!("dec.l{i}.ln1.g"), vec![d], Kind::Gain);
        push(format!("dec.l{i}.ln1.b"), vec![d], Kind::Bias);
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("dec.l{i}.ca.{w}"), vec![d, d], Kind::Matrix);
        }
        push(format!("dec.l{i}.ln2.g"), vec![d], Kind::Gain);
        push(format!("dec.l{i}.ln2.b"), vec![d], Kind::Bias);
        push(format!("dec.l{i}.ff.w1"), vec![d, ff], Kind::Matrix);
        push(format!("dec.l{i}.ff.b1"), vec![ff], Kind::Bias);
        push(format!("dec.l{i}.ff.w2"), vec![ff, d], Kind::Matrix);
        push(format!("dec.l{i}.ff.b2"), vec![d], Kind::Bias);
        push(format!("dec.l{i}.ln3.g"), vec![d], Kind::Gain);
        push(format!("dec.l{i}.ln3.b"), vec![d], Kind::Bias);
    }
    if config.bridge_enabled {
        for i in 0..config.n_dec_layers {
            push(
                format!("bridge.l{i}.w"),
                vec![config.n_enc_layers * d, d],
                Kind::Matrix,
            );
        }
    }
    push("out.w".into(), vec![d, v], Kind::Matrix);
    push("out.b".into(), vec![v], Kind::Bias);
    out
}

pub fn bridge_param_name(layer: usize) -> String {
    format!("bridge.l{layer}.w")
}

/// Named tensors backing a model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    /// Fresh body parameters for a config (bridge matrices excluded — attach
    /// them explicitly so every experiment states its bridge init). Matrix
    /// seeds are derived from `seed` by position so the draw is reproducible.
    pub fn init(config: &ModelConfig, seed: u64, body: BodyInit) -> Self {
        let mut map = BTreeMap::new();
        for (pos, (name, shape, kind)) in expected_params(config).into_iter().enumerate() {
            if name.starts_with("bridge.") {
                continue;
            }
            let value = match kind {
                Kind::Matrix => match body {
                    BodyInit::Xavier => {
                        init_random_xavier(shape, seed.wrapping_add(pos as u64))
                    }
                    BodyInit::Ones => Tensor::filled(shape, S::ONE),
                },
                Kind::Bias => Tensor::zeros(shape),
                Kind::Gain => Tensor::filled(shape, S::ONE),
            };
            map.insert(name, value);
        }
        Self { map }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn param_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<T>()))
                .collect(),
        }
    }

    /// Install bridge matrices under their `bridge.l{i}.w` names.
    pub fn attach_bridge(&mut self, bridge: &BridgeWeights<S>) {
        for (i, m) in bridge.per_decoder_layer.iter().enumerate() {
            self.map.insert(bridge_param_name(i), m.clone());
        }
    }

    pub fn remove_bridge(&mut self, config: &ModelConfig) {
        for i in 0..config.n_dec_layers {
            self.map.remove(&bridge_param_name(i));
        }
    }

    /// Collect the bridge matrices back out (for analysis/heatmaps).
    pub fn extract_bridge(&self, config: &ModelConfig) -> Result<BridgeWeights<S>, ModelError> {
        if !config.bridge_enabled {
            return Err(ModelError::BridgeDisabled);
        }
        let mut per_decoder_layer = Vec::with_capacity(config.n_dec_layers);
        for i in 0..config.n_dec_layers {
            let name = bridge_param_name(i);
            let t = self
                .map
                .get(&name)
                .ok_or_else(|| ModelError::MissingParam { name: name.clone() })?;
            per_decoder_layer.push(t.clone());
        }
        Ok(BridgeWeights {
            l_enc: config.n_enc_layers,
            d_model: config.d_model,
            per_decoder_layer,
        })
    }

    /// Check the store holds exactly the parameters the config expects, with
    /// the right shapes.
    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        config.validate()?;
        let expected = expected_params(config);
        for (name, shape, _) in &expected {
            match self.map.get(name) {
                None => {
                    return Err(ModelError::MissingParam { name: name.clone() });
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::ParamShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        actual: t.shape().to_vec(),
                    });
                }
                Some(_) => {}
            }
        }
        if self.map.len() != expected.len() {
            let known: std::collections::BTreeSet<&String> =
                expected.iter().map(|(n, _, _)| n).collect();
            let extra = self
                .map
                .keys()
                .find(|k| !known.contains(k))
                .expect("length mismatch implies an extra key");
            return Err(ModelError::UnexpectedParam {
                name: extra.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{init_original_connection, InitScheme};

    #[test]
    fn init_is_deterministic_and_validates() {
        let config = ModelConfig::desk(60);
        let a = ParamStore::<f32>::init(&config, 42, BodyInit::Xavier);
        let b = ParamStore::<f32>::init(&config, 42, BodyInit::Xavier);
        let c = ParamStore::<f32>::init(&config, 43, BodyInit::Xavier);
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate(&config).unwrap();
    }

    #[test]
    fn ones_body_sets_matrices_to_one_and_biases_to_zero() {
        let config = ModelConfig::desk(60);
        let s = ParamStore::<f32>::init(&config, 1, BodyInit::Ones);
        assert!(s.get("enc.l0.sa.wq").unwrap().data().iter().all(|v| *v == 1.0));
        assert!(s.get("enc.l0.ff.b1").unwrap().data().iter().all(|v| *v == 0.0));
        assert!(s.get("dec.l3.ln3.g").unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn bridge_attachment_adds_exactly_l_dec_matrices() {
        let mut config = ModelConfig::desk(60);
        let mut store = ParamStore::<f32>::init(&config, 7, BodyInit::Xavier);
        let before = store.param_count();
        config.bridge_enabled = true;
        store.attach_bridge(&BridgeWeights::from_scheme(
            InitScheme::OriginalConnection,
            config.n_enc_layers,
            config.n_dec_layers,
            config.d_model,
            0,
        ));
        store.validate(&config).unwrap();
        let added = store.param_count() - before;
        // exactly L_dec * L_enc * d_model^2 scalars, not a bias more
        assert_eq!(added, 4 * 4 * 64 * 64);
    }

    #[test]
    fn extract_bridge_round_trips() {
        let mut config = ModelConfig::desk(60);
        config.bridge_enabled = true;
        let mut store = ParamStore::<f32>::init(&config, 7, BodyInit::Xavier);
        let bridge = init_original_connection::<f32>(4, 4, 64);
        store.attach_bridge(&bridge);
        assert_eq!(store.extract_bridge(&config).unwrap(), bridge);
    }

    #[test]
    fn validate_names_missing_and_misshapen_params() {
        let config = ModelConfig::desk(60);
        let mut store = ParamStore::<f32>::init(&config, 7, BodyInit::Xavier);
        store.map.remove("out.b");
        match store.validate(&config) {
            Err(ModelError::MissingParam { name }) => assert_eq!(name, "out.b"),
            other => panic!("unexpected {other:?}"),
        }
        let mut store = ParamStore::<f32>::init(&config, 7, BodyInit::Xavier);
        store.insert("out.b", Tensor::zeros(vec![3]));
        match store.validate(&config) {
            Err(ModelError::ParamShape { name, .. }) => assert_eq!(name, "out.b"),
            other => panic!("unexpected {other:?}"),
        }
        let mut store = ParamStore::<f32>::init(&config, 7, BodyInit::Xavier);
        store.insert("mystery", Tensor::zeros(vec![1]));
        assert!(matches!(
            store.validate(&config),
            Err(ModelError::UnexpectedParam { .. })
        ));
    }

    #[test]
    fn full_scale_constructs_six_bridge_matrices_of_3072_by_512() {
        let mut config = ModelConfig::full_scale(1000);
        config.bridge_enabled = true;
        let mut store = ParamStore::<f32>::init(&config, 0, BodyInit::Xavier);
        store.attach_bridge(&BridgeWeights::from_scheme(
            InitScheme::OriginalConnection,
            6,
            6,
            512,
            0,
        ));
        store.validate(&config).unwrap();
        let bridge = store.extract_bridge(&config).unwrap();
        assert_eq!(bridge.per_decoder_layer.len(), 6);
        for m in &bridge.per_decoder_layer {
            assert_eq!(m.shape(), &[3072, 512]);
        }
    }
}
