//! Bridge weights and their initialization schemes.
//!
//! The bridge is one bias-free matrix per decoder layer, shaped
//! `(L_enc * d_model) x d_model`. Multiplying the concatenation of all
//! encoder-layer hidden states at one source position by such a matrix yields
//! the cross-attention memory vector the decoder layer sees at that position.
//! Row block `j` (rows `j*d_model .. (j+1)*d_model`) therefore corresponds to
//! encoder layer `j`, with layer 0 the lowest; that ordering is fixed here and
//! relied on by the analysis module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// How bridge (or, in retrain mode, body) weights are initialized.
///
/// * `OriginalConnection` — identity block at the last encoder layer, zeros
///   elsewhere: every decoder layer sees exactly the last encoder layer, which
///   reproduces the stock architecture at init.
/// * `Gca` — decoder layer `i` gets the identity block at encoder layer
///   `L_enc-1-i` (clamped at 0 when the stacks have different depths), routing
///   later decoder layers to earlier encoder layers.
/// * `ConstantOne` — every entry exactly 1 (mean 1, variance 0).
/// * `RandomXavier` — seeded uniform Xavier/Glorot sample.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    OriginalConnection,
    Gca,
    ConstantOne,
    RandomXavier,
}

impl InitScheme {
    /// Name used by the `--bridge-init` CLI flag.
    pub fn flag_name(self) -> &'static str {
        match self {
            InitScheme::OriginalConnection => "original",
            InitScheme::Gca => "gca",
            InitScheme::ConstantOne => "ones",
            InitScheme::RandomXavier => "xavier",
        }
    }

    pub fn from_flag(s: &str) -> Option<Self> {
        match s {
            "original" => Some(InitScheme::OriginalConnection),
            "gca" => Some(InitScheme::Gca),
            "ones" => Some(InitScheme::ConstantOne),
            "xavier" => Some(InitScheme::RandomXavier),
            _ => None,
        }
    }
}

/// One bias-free `(l_enc * d_model) x d_model` matrix per decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeWeights<S: Scalar> {
    pub l_enc: usize,
    pub d_model: usize,
    pub per_decoder_layer: Vec<Tensor<S>>,
}

impl<S: Scalar> BridgeWeights<S> {
    pub fn l_dec(&self) -> usize {
        self.per_decoder_layer.len()
    }

    /// Total scalar count; there are no bias terms anywhere in the bridge.
    pub fn param_count(&self) -> usize {
        self.per_decoder_layer.iter().map(Tensor::numel).sum()
    }

    pub fn from_scheme(
        scheme: InitScheme,
        l_enc: usize,
        l_dec: usize,
        d_model: usize,
        seed: u64,
    ) -> Self {
        match scheme {
            InitScheme::OriginalConnection => init_original_connection(l_enc, l_dec, d_model),
            InitScheme::Gca => init_gca(l_enc, l_dec, d_model),
            InitScheme::ConstantOne => Self {
                l_enc,
                d_model,
                per_decoder_layer: (0..l_dec)
                    .map(|_| init_constant_one(vec![l_enc * d_model, d_model]))
                    .collect(),
            },
            InitScheme::RandomXavier => Self {
                l_enc,
                d_model,
                // each layer gets its own derived seed so the matrices differ
                per_decoder_layer: (0..l_dec)
                    .map(|i| {
                        init_random_xavier(
                            vec![l_enc * d_model, d_model],
                            seed.wrapping_add(i as u64),
                        )
                    })
                    .collect(),
            },
        }
    }
}

/// Zero matrix with the `d_model x d_model` identity occupying the row block
/// of encoder layer `block`.
fn identity_block_matrix<S: Scalar>(l_enc: usize, d_model: usize, block: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(vec![l_enc * d_model, d_model]);
    let data = t.data_mut();
    for j in 0..d_model {
        data[(block * d_model + j) * d_model + j] = S::ONE;
    }
    t
}

/// Every decoder layer receives exactly the last encoder layer's states.
pub fn init_original_connection<S: Scalar>(
    l_enc: usize,
    l_dec: usize,
    d_model: usize,
) -> BridgeWeights<S> {
    assert!(l_enc > 0 && l_dec > 0 && d_model > 0, "dimensions must be positive");
    BridgeWeights {
        l_enc,
        d_model,
        per_decoder_layer: (0..l_dec)
            .map(|_| identity_block_matrix(l_enc, d_model, l_enc - 1))
            .collect(),
    }
}

/// Decoder layer `i` receives encoder layer `max(0, l_enc-1-i)`'s states.
pub fn init_gca<S: Scalar>(l_enc: usize, l_dec: usize, d_model: usize) -> BridgeWeights<S> {
    assert!(l_enc > 0 && l_dec > 0 && d_model > 0, "dimensions must be positive");
    BridgeWeights {
        l_enc,
        d_model,
        per_decoder_layer: (0..l_dec)
            .map(|i| identity_block_matrix(l_enc, d_model, l_enc.saturating_sub(1 + i)))
            .collect(),
    }
}

/// All entries exactly one.
pub fn init_constant_one<S: Scalar>(shape: Vec<usize>) -> Tensor<S> {
    Tensor::filled(shape, S::ONE)
}

/// Seeded uniform sample in `±sqrt(6 / (fan_in + fan_out))`, with `fan_in` the
/// product of all leading dims and `fan_out` the last dim.
pub fn init_random_xavier<S: Scalar>(shape: Vec<usize>, seed: u64) -> Tensor<S> {
    let fan_out = shape.last().copied().unwrap_or(1).max(1);
    let fan_in: usize = shape[..shape.len().saturating_sub(1)]
        .iter()
        .product::<usize>()
        .max(1);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("generated data length matches shape")
}

/// Xavier bound for a given shape (exposed for tests and diagnostics).
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let fan_out = shape.last().copied().unwrap_or(1).max(1);
    let fan_in: usize = shape[..shape.len().saturating_sub(1)]
        .iter()
        .product::<usize>()
        .max(1);
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn original_connection_full_scale_shape_and_identity_block() {
        let b: BridgeWeights<f32> = init_original_connection(6, 6, 512);
        assert_eq!(b.per_decoder_layer.len(), 6);
        for m in &b.per_decoder_layer {
            assert_eq!(m.shape(), &[3072, 512]);
        }
        let m = &b.per_decoder_layer[0];
        // identity block lives in the last 512-row slice
        assert_eq!(m.at2(5 * 512, 0), 1.0);
        assert_eq!(m.at2(5 * 512 + 511, 511), 1.0);
        assert_eq!(m.at2(5 * 512 + 1, 0), 0.0);
        assert_eq!(m.at2(0, 0), 0.0);
    }

    #[test]
    fn original_connection_single_layer_is_identity() {
        let b: BridgeWeights<f64> = init_original_connection(1, 2, 5);
        for m in &b.per_decoder_layer {
            assert_eq!(m.shape(), &[5, 5]);
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(m.at2(i, j), if i == j { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn original_connection_column_sums_are_one() {
        let b: BridgeWeights<f64> = init_original_connection(4, 3, 16);
        for m in &b.per_decoder_layer {
            for col in 0..16 {
                let sum: f64 = (0..4 * 16).map(|row| m.at2(row, col)).sum();
                assert_eq!(sum, 1.0);
            }
        }
    }

    #[test]
    fn gca_block_indices_follow_reversed_pattern() {
        let b: BridgeWeights<f64> = init_gca(6, 6, 8);
        let expect_blocks = [5usize, 4, 3, 2, 1, 0];
        for (i, m) in b.per_decoder_layer.iter().enumerate() {
            for block in 0..6 {
                let is_identity = (0..8).all(|j| m.at2(block * 8 + j, j) == 1.0);
                let all_zero = (0..8).all(|r| (0..8).all(|c| m.at2(block * 8 + r, c) == 0.0));
                if block == expect_blocks[i] {
                    assert!(is_identity, "decoder layer {i} missing block {block}");
                } else {
                    assert!(all_zero, "decoder layer {i} has spurious weight in block {block}");
                }
            }
        }
    }

    #[test]
    fn gca_matrices_have_exactly_d_model_ones() {
        let b: BridgeWeights<f64> = init_gca(6, 6, 8);
        for m in &b.per_decoder_layer {
            let ones = m.data().iter().filter(|v| **v == 1.0).count();
            let zeros = m.data().iter().filter(|v| **v == 0.0).count();
            assert_eq!(ones, 8);
            assert_eq!(zeros, m.numel() - 8);
        }
    }

    #[test]
    fn gca_single_decoder_layer_equals_original_connection() {
        let gca: BridgeWeights<f64> = init_gca(4, 1, 8);
        let orig: BridgeWeights<f64> = init_original_connection(4, 1, 8);
        assert_eq!(gca, orig);
    }

    #[test]
    fn gca_first_decoder_layer_always_matches_original_connection() {
        for (l_enc, l_dec) in [(1, 1), (2, 5), (6, 6), (4, 2), (3, 7)] {
            let gca: BridgeWeights<f64> = init_gca(l_enc, l_dec, 4);
            let orig: BridgeWeights<f64> = init_original_connection(l_enc, l_dec, 4);
            assert_eq!(gca.per_decoder_layer[0], orig.per_decoder_layer[0]);
        }
    }

    #[test]
    fn gca_clamps_when_decoder_is_deeper() {
        let b: BridgeWeights<f64> = init_gca(2, 4, 4);
        // expected block per decoder layer: [1, 0, 0, 0]
        for (i, want_block) in [1usize, 0, 0, 0].iter().enumerate() {
            let m = &b.per_decoder_layer[i];
            assert_eq!(m.at2(want_block * 4, 0), 1.0, "layer {i}");
        }
    }

    #[test]
    fn identity_schemes_have_one_hot_columns() {
        for b in [
            init_original_connection::<f64>(4, 4, 8),
            init_gca::<f64>(4, 4, 8),
        ] {
            for m in &b.per_decoder_layer {
                assert!(m.data().iter().all(|v| *v == 0.0 || *v == 1.0));
                for col in 0..8 {
                    let ones = (0..4 * 8).filter(|row| m.at2(*row, col) == 1.0).count();
                    assert_eq!(ones, 1, "column {col} must select exactly one source");
                }
            }
        }
    }

    #[test]
    fn constant_one_is_all_ones() {
        let t: Tensor<f64> = init_constant_one(vec![2, 2]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0, 1.0]);
        let mean: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let var: f64 = t
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / t.numel() as f64;
        assert_eq!(mean, 1.0);
        assert_eq!(var, 0.0);
    }

    #[test]
    fn constant_one_allocates_full_scale() {
        let t: Tensor<f32> = init_constant_one(vec![3072, 512]);
        assert_eq!(t.numel(), 3072 * 512);
    }

    #[test]
    fn xavier_is_reproducible_per_seed() {
        let a: Tensor<f32> = init_random_xavier(vec![16, 8], 99);
        let b: Tensor<f32> = init_random_xavier(vec![16, 8], 99);
        let c: Tensor<f32> = init_random_xavier(vec![16, 8], 100);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn xavier_respects_bound() {
        let shape = vec![24, 8];
        let bound = xavier_bound(&shape);
        let t: Tensor<f64> = init_random_xavier(shape, 7);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn xavier_full_scale_mean_is_near_zero() {
        let shape = vec![3072, 512];
        let bound = xavier_bound(&shape);
        let t: Tensor<f32> = init_random_xavier(shape, 42);
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|v| *v as f64).sum::<f64>() / n;
        // uniform(-b, b): var = b^2/3, so the mean estimator has sigma = b/sqrt(3n)
        let sigma_mean = bound / (3.0 * n).sqrt();
        assert!(
            mean.abs() <= 3.0 * sigma_mean,
            "mean {mean} outside 3 sigma ({sigma_mean})"
        );
    }

    #[test]
    fn scheme_flags_round_trip() {
        for scheme in [
            InitScheme::OriginalConnection,
            InitScheme::Gca,
            InitScheme::ConstantOne,
            InitScheme::RandomXavier,
        ] {
            assert_eq!(InitScheme::from_flag(scheme.flag_name()), Some(scheme));
        }
        assert_eq!(InitScheme::from_flag("nope"), None);
    }

    #[test]
    fn from_scheme_layer_count_and_bias_free_size() {
        let b: BridgeWeights<f32> =
            BridgeWeights::from_scheme(InitScheme::RandomXavier, 4, 4, 64, 1);
        assert_eq!(b.l_dec(), 4);
        // exactly L_dec * L_enc * d_model^2 scalars and nothing else
        assert_eq!(b.param_count(), 4 * 4 * 64 * 64);
        // xavier layers must differ from each other
        assert_ne!(
            b.per_decoder_layer[0].data(),
            b.per_decoder_layer[1].data()
        );
    }
}
