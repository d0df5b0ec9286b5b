//! Evaluation metrics: corpus BLEU and token-weighted evaluate loss.

use std::collections::HashMap;
use std::hash::Hash;

use crate::data::{ParallelBatch, Vocab};
use crate::model::{greedy_decode, ModelConfig, ModelError, ModelRun, ParamStore, Trainability};
use crate::tensor::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("hypothesis/reference count mismatch: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Corpus-level BLEU with per-order precision detail.
///
/// `bleu` is a percentage in `[0, 100]` and always equals
/// `brevity_penalty * geometric_mean(precisions) * 100` (zero when any
/// precision is zero — strict BLEU, no smoothing).
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
    /// Clipped n-gram matches per order (1-based order = index + 1).
    pub matched: Vec<u64>,
    /// Candidate n-gram counts per order.
    pub total: Vec<u64>,
}

impl BleuReport {
    pub fn csv_header(order: usize) -> String {
        let mut cols = vec!["bleu".to_string()];
        cols.extend((1..=order).map(|n| format!("p{n}")));
        cols.push("bp".to_string());
        cols.join(",")
    }

    /// Row matching [`BleuReport::csv_header`]: `bleu,p1..pN,bp`.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![format!("{}", self.bleu)];
        cols.extend(self.precisions.iter().map(|p| format!("{p}")));
        cols.push(format!("{}", self.brevity_penalty));
        cols.join(",")
    }
}

/// Standard corpus BLEU-4: clipped n-gram matches aggregated over the whole
/// corpus, brevity penalty `exp(1 - ref_len/hyp_len)` when the hypothesis side
/// is shorter.
pub fn corpus_bleu<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
) -> Result<BleuReport, EvalError> {
    corpus_bleu_order(hypotheses, references, 4)
}

/// [`corpus_bleu`] with a configurable maximum n-gram order.
pub fn corpus_bleu_order<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    order: usize,
) -> Result<BleuReport, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() || order == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matched = vec![0u64; order];
    let mut total = vec![0u64; order];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=order {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            let m: u64 = hyp_counts
                .iter()
                .map(|(gram, count)| (*count).min(ref_counts.get(gram).copied().unwrap_or(0)))
                .sum();
            matched[n - 1] += m;
            total[n - 1] += hyp.len().saturating_sub(n - 1) as u64;
        }
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(m, t)| if *t == 0 { 0.0 } else { *m as f64 / *t as f64 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|p| *p == 0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        let log_mean =
            precisions.iter().map(|p| p.ln()).sum::<f64>() / order as f64;
        brevity_penalty * log_mean.exp() * 100.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
        matched,
        total,
    })
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Token-weighted mean cross-entropy over all non-pad target tokens in
/// `batches`. Computed in 64-bit so the result is invariant (to ~1e-12) under
/// re-partitioning of the same data. No gradients are recorded.
pub fn evaluate_loss<S: Scalar>(
    config: &ModelConfig,
    store: &ParamStore<S>,
    batches: &[ParallelBatch],
) -> Result<f64, EvalError> {
    if batches.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let store64 = store.cast::<f64>();
    let mut weighted = 0.0f64;
    let mut tokens = 0u64;
    for batch in batches {
        let count = batch.target_token_count() as u64;
        if count == 0 {
            continue;
        }
        let mut run = ModelRun::<f64>::new(config, &store64, Trainability::Frozen)?;
        let loss = run.training_loss(batch)?;
        weighted += run.graph.data(loss)[0] * count as f64;
        tokens += count;
    }
    if tokens == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(weighted / tokens as f64)
}

/// Greedy-decode every source sentence and score against the references.
/// Decoding is capped at the longest reference length plus a small margin.
pub fn evaluate_bleu<S: Scalar>(
    config: &ModelConfig,
    store: &ParamStore<S>,
    vocab: &Vocab,
    pairs: &[(String, String)],
) -> Result<BleuReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let references: Vec<Vec<u32>> = pairs.iter().map(|(_, t)| vocab.encode(t)).collect();
    let max_len = references
        .iter()
        .map(Vec::len)
        .max()
        .unwrap_or(0)
        .saturating_add(5)
        .min(config.max_seq_len.saturating_sub(1));
    let mut hypotheses = Vec::with_capacity(pairs.len());
    for (src, _) in pairs {
        hypotheses.push(greedy_decode(config, store, &vocab.encode(src), max_len)?);
    }
    corpus_bleu(&hypotheses, &references)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, make_eval_batches, Task};
    use crate::model::BodyInit;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ---- independent BLEU oracle (written before the implementation) -----
    //
    // Counts n-grams by linear scan over every position instead of hash maps,
    // and walks orders/pairs in a different loop structure on purpose.

    fn oracle_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>], order: usize) -> (Vec<u64>, Vec<u64>, f64) {
        let mut matched = vec![0u64; order];
        let mut total = vec![0u64; order];
        for n in 1..=order {
            for (h, r) in hyps.iter().zip(refs) {
                if h.len() < n {
                    continue;
                }
                // distinct n-grams of the hypothesis, found by scanning
                let mut seen: Vec<&[u32]> = Vec::new();
                for i in 0..=h.len() - n {
                    let g = &h[i..i + n];
                    if seen.contains(&g) {
                        continue;
                    }
                    seen.push(g);
                    let in_hyp = (0..=h.len() - n).filter(|j| &h[*j..*j + n] == g).count();
                    let in_ref = if r.len() < n {
                        0
                    } else {
                        (0..=r.len() - n).filter(|j| &r[*j..*j + n] == g).count()
                    };
                    matched[n - 1] += in_hyp.min(in_ref) as u64;
                }
                total[n - 1] += (h.len() - n + 1) as u64;
            }
        }
        let hyp_len: u64 = hyps.iter().map(|h| h.len() as u64).sum();
        let ref_len: u64 = refs.iter().map(|r| r.len() as u64).sum();
        let bp = if hyp_len == 0 {
            0.0
        } else if hyp_len >= ref_len {
            1.0
        } else {
            (1.0 - ref_len as f64 / hyp_len as f64).exp()
        };
        let mut geo = 1.0f64;
        let mut any_zero = false;
        for n in 0..order {
            if matched[n] == 0 || total[n] == 0 {
                any_zero = true;
            } else {
                geo *= matched[n] as f64 / total[n] as f64;
            }
        }
        let bleu = if any_zero || bp == 0.0 {
            0.0
        } else {
            bp * geo.powf(1.0 / order as f64) * 100.0
        };
        (matched, total, bleu)
    }

    #[test]
    fn perfect_match_scores_100() {
        let sents: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4, 5], vec![9, 8, 7, 6]];
        let r = corpus_bleu(&sents, &sents).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
        assert!(r.precisions.iter().all(|p| *p == 1.0));
    }

    #[test]
    fn disjoint_tokens_score_0() {
        let hyps = vec![vec![1u32, 2, 3, 4]];
        let refs = vec![vec![10u32, 11, 12, 13]];
        let r = corpus_bleu(&hyps, &refs).unwrap();
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn two_sentence_case_matches_oracle_exactly() {
        let hyps = vec![vec![1u32, 2, 3, 4, 2, 3], vec![5u32, 6, 7]];
        let refs = vec![vec![1u32, 2, 3, 2, 3, 9], vec![5u32, 7, 6, 8]];
        let (matched, total, bleu) = oracle_bleu(&hyps, &refs, 4);
        let r = corpus_bleu(&hyps, &refs).unwrap();
        assert_eq!(r.matched, matched);
        assert_eq!(r.total, total);
        assert!((r.bleu - bleu).abs() < 1e-9, "{} vs {bleu}", r.bleu);
    }

    #[test]
    fn randomized_corpora_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..40 {
            let n = rng.gen_range(1..5);
            let mut hyps = Vec::new();
            let mut refs = Vec::new();
            for _ in 0..n {
                let hl = rng.gen_range(0..9);
                let rl = rng.gen_range(1..9);
                hyps.push((0..hl).map(|_| rng.gen_range(0..6u32)).collect::<Vec<_>>());
                refs.push((0..rl).map(|_| rng.gen_range(0..6u32)).collect::<Vec<_>>());
            }
            let (matched, total, bleu) = oracle_bleu(&hyps, &refs, 4);
            let r = corpus_bleu(&hyps, &refs).unwrap();
            assert_eq!(r.matched, matched, "case {case}");
            assert_eq!(r.total, total, "case {case}");
            assert!((r.bleu - bleu).abs() < 1e-9, "case {case}");
        }
    }

    #[test]
    fn clipping_caps_repeated_ngrams() {
        // classic clipping case: hypothesis repeats one token
        let hyps = vec![vec![7u32; 6]];
        let refs = vec![vec![7u32, 7, 1, 2, 3, 4]];
        let r = corpus_bleu(&hyps, &refs).unwrap();
        // unigram matches clipped at the reference count of 2
        assert_eq!(r.matched[0], 2);
        assert_eq!(r.total[0], 6);
    }

    #[test]
    fn bleu_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hyps: Vec<Vec<u32>> = (0..6)
            .map(|_| (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..5)).collect())
            .collect();
        let refs: Vec<Vec<u32>> = (0..6)
            .map(|_| (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..5)).collect())
            .collect();
        let base = corpus_bleu(&hyps, &refs).unwrap();
        let perm = [3usize, 1, 5, 0, 2, 4];
        let hyps_p: Vec<Vec<u32>> = perm.iter().map(|i| hyps[*i].clone()).collect();
        let refs_p: Vec<Vec<u32>> = perm.iter().map(|i| refs[*i].clone()).collect();
        let permuted = corpus_bleu(&hyps_p, &refs_p).unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn adding_a_perfect_pair_never_decreases_bleu() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..25 {
            let n = rng.gen_range(1..5);
            let mut hyps: Vec<Vec<u32>> = (0..n)
                .map(|_| (0..rng.gen_range(4..9)).map(|_| rng.gen_range(0..5)).collect())
                .collect();
            let mut refs: Vec<Vec<u32>> = (0..n)
                .map(|_| (0..rng.gen_range(4..9)).map(|_| rng.gen_range(0..5)).collect())
                .collect();
            let before = corpus_bleu(&hyps, &refs).unwrap().bleu;
            let perfect: Vec<u32> = (0..6).map(|_| rng.gen_range(0..5)).collect();
            hyps.push(perfect.clone());
            refs.push(perfect);
            let after = corpus_bleu(&hyps, &refs).unwrap().bleu;
            assert!(after >= before - 1e-12, "{after} < {before}");
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            corpus_bleu::<u32>(&[], &[]),
            Err(EvalError::EmptyCorpus)
        ));
        assert!(matches!(
            corpus_bleu(&[vec![1u32]], &[]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn report_invariant_bleu_equals_bp_times_geomean() {
        let hyps = vec![vec![1u32, 2, 3, 4, 5], vec![1u32, 2, 9, 4, 5, 6]];
        let refs = vec![vec![1u32, 2, 3, 4, 5, 6], vec![1u32, 2, 3, 4, 5, 6]];
        let r = corpus_bleu(&hyps, &refs).unwrap();
        if r.precisions.iter().all(|p| *p > 0.0) {
            let geo = (r.precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp();
            assert!((r.bleu - r.brevity_penalty * geo * 100.0).abs() < 1e-9);
        }
        assert!((0.0..=100.0).contains(&r.bleu));
    }

    #[test]
    fn csv_row_layout() {
        let hyps = vec![vec![1u32, 2, 3, 4]];
        let r = corpus_bleu(&hyps, &hyps).unwrap();
        assert_eq!(BleuReport::csv_header(4), "bleu,p1,p2,p3,p4,bp");
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), 6);
        assert_eq!(row.split(',').next().unwrap(), "100");
    }

    // ---- evaluate_loss ---------------------------------------------------

    fn zeroed_output_model() -> (ModelConfig, ParamStore<f32>, Vec<(String, String)>) {
        let pairs = gen_synthetic(Task::Subst, 12, 3, 2..=5);
        let vocab = crate::data::Vocab::from_corpus(&pairs);
        let config = ModelConfig::desk(vocab.size());
        let mut store = ParamStore::<f32>::init(&config, 1, BodyInit::Xavier);
        // zero the output head: logits become uniform regardless of input
        store.insert("out.w", Tensor::zeros(vec![64, config.vocab_size]));
        store.insert("out.b", Tensor::zeros(vec![config.vocab_size]));
        (config, store, pairs)
    }

    #[test]
    fn uniform_logits_evaluate_to_ln_vocab() {
        let (config, store, pairs) = zeroed_output_model();
        let vocab = crate::data::Vocab::from_corpus(&pairs);
        let batches = make_eval_batches(&pairs, &vocab, 4);
        let loss = evaluate_loss(&config, &store, &batches).unwrap();
        assert!((loss - (config.vocab_size as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn single_batch_reduces_to_cross_entropy() {
        let pairs = gen_synthetic(Task::Copy, 6, 5, 2..=4);
        let vocab = crate::data::Vocab::from_corpus(&pairs);
        let config = ModelConfig::desk(vocab.size());
        let store = ParamStore::<f32>::init(&config, 2, BodyInit::Xavier);
        let batches = make_eval_batches(&pairs, &vocab, 6);
        assert_eq!(batches.len(), 1);
        let via_eval = evaluate_loss(&config, &store, &batches).unwrap();
        let store64 = store.cast::<f64>();
        let mut run = ModelRun::<f64>::new(&config, &store64, Trainability::Frozen).unwrap();
        let loss = run.training_loss(&batches[0]).unwrap();
        assert!((via_eval - run.graph.data(loss)[0]).abs() < 1e-12);
    }

    #[test]
    fn evaluate_loss_is_invariant_under_repartitioning() {
        let pairs = gen_synthetic(Task::Subst, 21, 7, 2..=6);
        let vocab = crate::data::Vocab::from_corpus(&pairs);
        let config = ModelConfig::desk(vocab.size());
        let store = ParamStore::<f32>::init(&config, 3, BodyInit::Xavier);
        let a = evaluate_loss(&config, &store, &make_eval_batches(&pairs, &vocab, 4)).unwrap();
        let b = evaluate_loss(&config, &store, &make_eval_batches(&pairs, &vocab, 7)).unwrap();
        let c = evaluate_loss(&config, &store, &make_eval_batches(&pairs, &vocab, 21)).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        assert!((a - c).abs() < 1e-6, "{a} vs {c}");
    }

    #[test]
    fn untrained_bleu_is_near_zero_and_loss_near_ln_vocab() {
        let pairs = gen_synthetic(Task::Subst, 10, 11, 3..=6);
        let vocab = crate::data::Vocab::from_corpus(&pairs);
        let config = ModelConfig::desk(vocab.size());
        let store = ParamStore::<f32>::init(&config, 4, BodyInit::Xavier);
        let bleu = evaluate_bleu(&config, &store, &vocab, &pairs).unwrap();
        assert!(bleu.bleu < 5.0, "untrained model scored {}", bleu.bleu);
        let loss =
            evaluate_loss(&config, &store, &make_eval_batches(&pairs, &vocab, 5)).unwrap();
        let ln_v = (config.vocab_size as f64).ln();
        assert!((loss - ln_v).abs() < 1.5, "loss {loss} far from ln V {ln_v}");
    }
}
