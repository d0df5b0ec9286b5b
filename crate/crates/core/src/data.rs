//! Vocabulary, synthetic parallel tasks, TSV ingestion and batching.
//!
//! Tokenization is plain whitespace splitting over a corpus-built vocabulary;
//! ids 0..3 are reserved for pad/bos/eos/unk and stay stable across save and
//! load.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED_TOKENS: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Substitution-task bijection seed. Deliberately a fixed constant, not the
/// run seed: train and eval sets generated with different seeds must share the
/// same token mapping or the task itself would change between them.
const SUBST_MAPPING_SEED: u64 = 0x5eed_ba5e;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected 2 tab-separated columns, found {columns}")]
    MalformedLine { line: usize, columns: usize },
    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Token-to-id bijection over non-reserved tokens, with fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from a parallel corpus: every distinct whitespace token from both
    /// sides, sorted, so ids are independent of corpus order.
    pub fn from_corpus(pairs: &[(String, String)]) -> Self {
        let mut tokens: Vec<String> = pairs
            .iter()
            .flat_map(|(s, t)| s.split_whitespace().chain(t.split_whitespace()))
            .map(str::to_string)
            .collect();
        tokens.sort();
        tokens.dedup();
        Self::from_tokens(tokens).expect("sorted+deduped tokens cannot collide")
    }

    /// Rebuild from an explicit non-reserved token list (checkpoint/file
    /// load). Token order defines ids: `tokens[i]` gets id `RESERVED + i`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index
                .insert(tok.clone(), (RESERVED_TOKENS + i) as u32)
                .is_some()
            {
                return Err(DataError::DuplicateToken(tok.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Rebuild the lookup index after deserialization (serde skips it).
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (RESERVED_TOKENS + i) as u32))
            .collect();
    }

    /// Total id space including the four reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED_TOKENS
    }

    pub fn non_reserved_tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        match id {
            PAD_ID => PAD_TOKEN,
            BOS_ID => BOS_TOKEN,
            EOS_ID => EOS_TOKEN,
            UNK_ID => UNK_TOKEN,
            _ => self
                .tokens
                .get(id as usize - RESERVED_TOKENS)
                .map(String::as_str)
                .unwrap_or(UNK_TOKEN),
        }
    }

    /// Whitespace-tokenize and map to ids (unknowns become `UNK_ID`).
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Join tokens back into a space-separated string, skipping pad/bos/eos.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD_ID || id == BOS_ID || id == EOS_ID {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            let _ = write!(out, "{}", self.token(id));
        }
        out
    }

    /// One non-reserved token per line; line number = id - RESERVED_TOKENS.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut body = String::new();
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let body = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tokens(body.lines().map(str::to_string).collect())
    }
}

/// Synthetic parallel task family.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Copy,
    Reverse,
    Subst,
}

impl Task {
    pub fn flag_name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Subst => "subst",
        }
    }

    pub fn from_flag(s: &str) -> Option<Self> {
        match s {
            "copy" => Some(Task::Copy),
            "reverse" => Some(Task::Reverse),
            "subst" => Some(Task::Subst),
            _ => None,
        }
    }
}

fn source_alphabet() -> Vec<String> {
    (b'a'..=b'z').map(|c| (c as char).to_string()).collect()
}

fn target_alphabet() -> Vec<String> {
    (b'A'..=b'Z').map(|c| (c as char).to_string()).collect()
}

/// The substitution task's fixed source-to-target bijection.
pub fn subst_mapping() -> HashMap<String, String> {
    let src = source_alphabet();
    let mut tgt = target_alphabet();
    let mut rng = ChaCha8Rng::seed_from_u64(SUBST_MAPPING_SEED);
    tgt.shuffle(&mut rng);
    src.into_iter().zip(tgt).collect()
}

/// Generate `n_pairs` (src, tgt) sentence pairs for a task. Pure function of
/// its arguments: the same `(task, n_pairs, seed, len_range)` always yields
/// the same pairs.
pub fn gen_synthetic(
    task: Task,
    n_pairs: usize,
    seed: u64,
    len_range: RangeInclusive<usize>,
) -> Vec<(String, String)> {
    let alphabet = source_alphabet();
    let mapping = subst_mapping();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|_| {
            let len = rng.gen_range(len_range.clone());
            let src_tokens: Vec<&String> = (0..len)
                .map(|_| &alphabet[rng.gen_range(0..alphabet.len())])
                .collect();
            let src = src_tokens
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            let tgt = match task {
                Task::Copy => src.clone(),
                Task::Reverse => src_tokens
                    .iter()
                    .rev()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
                Task::Subst => src_tokens
                    .iter()
                    .map(|s| mapping[s.as_str()].as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            };
            (src, tgt)
        })
        .collect()
}

/// Load a two-column, tab-separated, UTF-8 parallel corpus. Blank lines are
/// skipped; any other line must have exactly two columns.
pub fn load_tsv(path: &Path) -> Result<Vec<(String, String)>, DataError> {
    let body = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut pairs = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(DataError::MalformedLine {
                line: i + 1,
                columns: cols.len(),
            });
        }
        pairs.push((cols[0].to_string(), cols[1].to_string()));
    }
    Ok(pairs)
}

/// Row-major id matrix, the raw input form for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, ids: Vec<u32>) -> Self {
        assert_eq!(rows * cols, ids.len());
        Self { rows, cols, ids }
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }
}

/// One training batch: source ids plus teacher-forcing target views.
/// `tgt_in` is the bos-prefixed decoder input; `tgt_out` is the eos-suffixed
/// prediction target, shifted one step left of `tgt_in`. Padding only at row
/// tails.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelBatch {
    pub src: TokenMatrix,
    pub tgt_in: TokenMatrix,
    pub tgt_out: TokenMatrix,
}

impl ParallelBatch {
    /// Count of non-pad prediction targets (the cross-entropy denominator).
    pub fn target_token_count(&self) -> usize {
        self.tgt_out.ids.iter().filter(|id| **id != PAD_ID).count()
    }
}

/// Encode one (src, tgt) pair without padding.
fn encode_pair(vocab: &Vocab, pair: &(String, String)) -> (Vec<u32>, Vec<u32>) {
    (vocab.encode(&pair.0), vocab.encode(&pair.1))
}

/// Build a batch from already-encoded rows, padding each matrix to its own
/// maximum length.
fn pack_batch(encoded: &[(Vec<u32>, Vec<u32>)]) -> ParallelBatch {
    let rows = encoded.len();
    let src_len = encoded.iter().map(|(s, _)| s.len()).max().unwrap_or(0).max(1);
    // +1 for bos (input view) / eos (output view)
    let tgt_len = encoded.iter().map(|(_, t)| t.len()).max().unwrap_or(0) + 1;
    let mut src = vec![PAD_ID; rows * src_len];
    let mut tgt_in = vec![PAD_ID; rows * tgt_len];
    let mut tgt_out = vec![PAD_ID; rows * tgt_len];
    for (r, (s, t)) in encoded.iter().enumerate() {
        src[r * src_len..r * src_len + s.len()].copy_from_slice(s);
        tgt_in[r * tgt_len] = BOS_ID;
        tgt_in[r * tgt_len + 1..r * tgt_len + 1 + t.len()].copy_from_slice(t);
        tgt_out[r * tgt_len..r * tgt_len + t.len()].copy_from_slice(t);
        tgt_out[r * tgt_len + t.len()] = EOS_ID;
    }
    ParallelBatch {
        src: TokenMatrix::new(rows, src_len, src),
        tgt_in: TokenMatrix::new(rows, tgt_len, tgt_in),
        tgt_out: TokenMatrix::new(rows, tgt_len, tgt_out),
    }
}

/// Shuffle the corpus with the seed, then cut into batches of `batch_size`
/// (last batch may be smaller). Each batch is padded to its own max lengths.
pub fn make_batches(
    pairs: &[(String, String)],
    vocab: &Vocab,
    batch_size: usize,
    seed: u64,
) -> Vec<ParallelBatch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let encoded: Vec<(Vec<u32>, Vec<u32>)> = chunk
                .iter()
                .map(|&i| encode_pair(vocab, &pairs[i]))
                .collect();
            pack_batch(&encoded)
        })
        .collect()
}

/// Batches in corpus order, no shuffling — for evaluation.
pub fn make_eval_batches(
    pairs: &[(String, String)],
    vocab: &Vocab,
    batch_size: usize,
) -> Vec<ParallelBatch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    pairs
        .chunks(batch_size)
        .map(|chunk| {
            let encoded: Vec<(Vec<u32>, Vec<u32>)> =
                chunk.iter().map(|p| encode_pair(vocab, p)).collect();
            pack_batch(&encoded)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_task_duplicates_source() {
        let pairs = gen_synthetic(Task::Copy, 5, 1, 3..=3);
        for (s, t) in &pairs {
            assert_eq!(s, t);
            assert_eq!(s.split_whitespace().count(), 3);
        }
    }

    #[test]
    fn reverse_task_reverses_tokens() {
        let pairs = gen_synthetic(Task::Reverse, 5, 2, 2..=4);
        for (s, t) in &pairs {
            let mut rev: Vec<&str> = s.split_whitespace().collect();
            rev.reverse();
            assert_eq!(t, &rev.join(" "));
        }
    }

    #[test]
    fn subst_task_applies_stored_bijection() {
        let mapping = subst_mapping();
        let pairs = gen_synthetic(Task::Subst, 10, 3, 1..=6);
        for (s, t) in &pairs {
            let want: Vec<&str> = s
                .split_whitespace()
                .map(|tok| mapping[tok].as_str())
                .collect();
            assert_eq!(t, &want.join(" "));
        }
    }

    #[test]
    fn subst_mapping_is_a_bijection_onto_disjoint_alphabet() {
        let mapping = subst_mapping();
        assert_eq!(mapping.len(), 26);
        let mut targets: Vec<&String> = mapping.values().collect();
        targets.sort();
        targets.dedup();
        assert_eq!(targets.len(), 26, "mapping must be injective");
        for (src, tgt) in &mapping {
            assert!(src.chars().all(|c| c.is_ascii_lowercase()));
            assert!(tgt.chars().all(|c| c.is_ascii_uppercase()));
        }
    }

    #[test]
    fn subst_mapping_is_independent_of_run_seed() {
        // different generation seeds, same translation of the same token
        let a = gen_synthetic(Task::Subst, 50, 7, 1..=1);
        let b = gen_synthetic(Task::Subst, 50, 1234, 1..=1);
        let mut seen = HashMap::new();
        for (s, t) in a.iter().chain(b.iter()) {
            if let Some(prev) = seen.insert(s.clone(), t.clone()) {
                assert_eq!(&prev, t, "token {s} translated inconsistently");
            }
        }
    }

    #[test]
    fn generation_is_pure_in_its_arguments() {
        let a = gen_synthetic(Task::Subst, 20, 9, 2..=5);
        let b = gen_synthetic(Task::Subst, 20, 9, 2..=5);
        let c = gen_synthetic(Task::Subst, 20, 10, 2..=5);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn vocab_round_trips_whitespace_normalized_text() {
        let pairs = vec![("the cat sat".to_string(), "le chat".to_string())];
        let v = Vocab::from_corpus(&pairs);
        for s in ["the cat sat", "le chat", "chat cat the"] {
            assert_eq!(v.decode(&v.encode(s)), s);
        }
    }

    #[test]
    fn vocab_maps_unknown_tokens_to_unk() {
        let v = Vocab::from_corpus(&[("a b".to_string(), "c".to_string())]);
        assert_eq!(v.encode("a z c"), vec![v.id("a"), UNK_ID, v.id("c")]);
        assert_eq!(v.decode(&[UNK_ID]), UNK_TOKEN);
    }

    #[test]
    fn vocab_ids_are_sorted_and_stable() {
        let v = Vocab::from_corpus(&[("b a".to_string(), "c a".to_string())]);
        assert_eq!(v.size(), 3 + RESERVED_TOKENS);
        assert_eq!(v.id("a"), RESERVED_TOKENS as u32);
        assert_eq!(v.id("b"), RESERVED_TOKENS as u32 + 1);
        assert_eq!(v.id("c"), RESERVED_TOKENS as u32 + 2);
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::from_corpus(&[("x y z".to_string(), "p q".to_string())]);
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(loaded.id("q"), v.id("q"));
    }

    #[test]
    fn vocab_rejects_duplicates() {
        let err = Vocab::from_tokens(vec!["a".into(), "a".into()]).unwrap_err();
        assert!(matches!(err, DataError::DuplicateToken(t) if t == "a"));
    }

    #[test]
    fn tsv_single_pair() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        std::fs::write(&path, "hallo\thello\n").unwrap();
        assert_eq!(
            load_tsv(&path).unwrap(),
            vec![("hallo".to_string(), "hello".to_string())]
        );
    }

    #[test]
    fn tsv_empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        std::fs::write(&path, "").unwrap();
        assert!(load_tsv(&path).unwrap().is_empty());
    }

    #[test]
    fn tsv_blank_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        std::fs::write(&path, "a\tb\n\n\nc\td\n").unwrap();
        assert_eq!(load_tsv(&path).unwrap().len(), 2);
    }

    #[test]
    fn tsv_malformed_line_error_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "a\tb\nx\ty\tz\n").unwrap();
        let err = load_tsv(&path).unwrap_err();
        match err {
            DataError::MalformedLine { line, columns } => {
                assert_eq!(line, 2);
                assert_eq!(columns, 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn underfull_corpus_gives_single_batch() {
        let pairs = gen_synthetic(Task::Copy, 10, 1, 2..=4);
        let vocab = Vocab::from_corpus(&pairs);
        let batches = make_batches(&pairs, &vocab, 16, 0);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].src.rows, 10);
    }

    #[test]
    fn exact_split_gives_two_batches() {
        let pairs = gen_synthetic(Task::Copy, 32, 1, 2..=4);
        let vocab = Vocab::from_corpus(&pairs);
        let batches = make_batches(&pairs, &vocab, 16, 0);
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.src.rows == 16));
    }

    #[test]
    fn batching_is_deterministic_per_seed() {
        let pairs = gen_synthetic(Task::Subst, 40, 5, 2..=6);
        let vocab = Vocab::from_corpus(&pairs);
        let a = make_batches(&pairs, &vocab, 8, 11);
        let b = make_batches(&pairs, &vocab, 8, 11);
        let c = make_batches(&pairs, &vocab, 8, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn batches_satisfy_the_shift_invariant() {
        let pairs = gen_synthetic(Task::Reverse, 25, 3, 1..=7);
        let vocab = Vocab::from_corpus(&pairs);
        for batch in make_batches(&pairs, &vocab, 8, 2) {
            let cols = batch.tgt_in.cols;
            assert_eq!(cols, batch.tgt_out.cols);
            for r in 0..batch.tgt_in.rows {
                let tin = batch.tgt_in.row(r);
                let tout = batch.tgt_out.row(r);
                assert_eq!(tin[0], BOS_ID);
                for t in 0..cols - 1 {
                    if tin[t + 1] != PAD_ID {
                        assert_eq!(tin[t + 1], tout[t]);
                    }
                }
                // pad only at tails
                let mut seen_pad = false;
                for &id in tin {
                    if id == PAD_ID {
                        seen_pad = true;
                    } else {
                        assert!(!seen_pad, "pad in the middle of a row");
                    }
                }
            }
        }
    }

    #[test]
    fn eval_batches_preserve_corpus_order() {
        let pairs = gen_synthetic(Task::Copy, 5, 4, 2..=2);
        let vocab = Vocab::from_corpus(&pairs);
        let batches = make_eval_batches(&pairs, &vocab, 2);
        assert_eq!(batches.len(), 3);
        let first_src = vocab.encode(&pairs[0].0);
        assert_eq!(&batches[0].src.row(0)[..first_src.len()], &first_src[..]);
    }

    #[test]
    fn task_flags_round_trip() {
        for task in [Task::Copy, Task::Reverse, Task::Subst] {
            assert_eq!(Task::from_flag(task.flag_name()), Some(task));
        }
        assert_eq!(Task::from_flag("x"), None);
    }
}
