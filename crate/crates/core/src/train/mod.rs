//! Training: Adam optimizer, the training loop, checkpointing, and the
//! numbered fine-tune/retrain experiment workflows.
//!
//! Experiment ids:
//! - 0 — retrain the stock model (no bridge); produces the toy baseline the
//!   fine-tune experiments build on
//! - 1 — fine-tune the baseline with an identity-initialized
//!   (original-connection) bridge
//! - 2 — direct fine-tune of the baseline, no bridge
//! - 3 — fine-tune the baseline with a GCA-initialized bridge
//! - 4 — retrain from scratch with a bridge attached

mod adam;
mod checkpoint;

pub use adam::{adam_step, clip_gradients, global_grad_norm, AdamHyper, AdamState};
pub use checkpoint::Checkpoint;

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{block_norms, weight_drift, AnalysisError, BlockNormMatrix};
use crate::bridge::{BridgeWeights, InitScheme};
use crate::data::{gen_synthetic, make_batches, make_eval_batches, DataError, Task, Vocab};
use crate::eval::{corpus_bleu, evaluate_loss, BleuReport, EvalError};
use crate::model::{
    greedy_decode, BodyInit, ModelConfig, ModelError, ModelRun, ParamStore, Trainability,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {detail}")]
    InvalidConfig { detail: String },
    #[error("training data is empty")]
    EmptyData,
    #[error("non-finite gradient in parameter `{param}` at step {step}; training halted")]
    NonFiniteGrad { param: String, step: u64 },
    #[error("training loss {value} is not finite at step {step}; training halted (diagnostic checkpoint attached)")]
    NonFiniteLoss {
        step: u64,
        value: f64,
        diagnostic: Box<Checkpoint>,
    },
    #[error("gradient for unknown parameter `{param}`")]
    UnknownParam { param: String },
    #[error("gradient for `{param}` has {actual} values but the parameter has {expected}")]
    GradShape {
        param: String,
        expected: usize,
        actual: usize,
    },
    #[error("experiment {experiment} requires a base checkpoint (train one with experiment 0 first)")]
    MissingBase { experiment: u8 },
    #[error("checkpoint {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint metadata: {0}")]
    Meta(#[source] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Finetune,
    Retrain,
}

/// Run length: an explicit step count, or whole epochs (one epoch is
/// `ceil(n_pairs / batch_size)` steps). Exactly one applies by construction.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainLength {
    Steps(u64),
    Epochs(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub length: TrainLength,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global-norm gradient clip applied before Adam; `None` disables it.
    pub clip_norm: Option<f32>,
    /// Linear learning-rate warmup over this many steps; 0 keeps lr constant.
    pub warmup_steps: u64,
    pub seed: u64,
    pub bridge_init: InitScheme,
    /// Train only `bridge.*` parameters, leaving the body frozen.
    pub freeze_base: bool,
    /// Progress lines to stderr every this many steps; 0 silences them.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Retrain,
            length: TrainLength::Epochs(1),
            batch_size: 16,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
            warmup_steps: 0,
            seed: 0,
            bridge_init: InitScheme::OriginalConnection,
            freeze_base: false,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::InvalidConfig {
                detail: format!("lr must be > 0, got {}", self.lr),
            });
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig {
                detail: "batch_size must be at least 1".into(),
            });
        }
        Ok(())
    }

    fn hyper(&self, step: u64) -> AdamHyper {
        let lr = if self.warmup_steps > 0 && step < self.warmup_steps {
            self.lr * (step + 1) as f32 / self.warmup_steps as f32
        } else {
            self.lr
        };
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Steps in one epoch over `n_pairs` examples: `ceil(n / batch_size)`.
    pub fn steps_per_epoch(&self, n_pairs: usize) -> u64 {
        (n_pairs as u64).div_ceil(self.batch_size as u64)
    }

    /// Total steps this config runs over `n_pairs` examples.
    pub fn total_steps(&self, n_pairs: usize) -> u64 {
        match self.length {
            TrainLength::Steps(s) => s,
            TrainLength::Epochs(e) => e * self.steps_per_epoch(n_pairs),
        }
    }
}

/// The training loop: fresh forward/backward graph per step, global-norm
/// gradient clipping, Adam update. Data is reshuffled each epoch from the
/// run seed. Returns the final checkpoint; its `loss_history` holds the
/// per-step training loss series (step numbers are 0-based, losses measured
/// before each update).
pub fn train_loop(
    config: &ModelConfig,
    mut store: ParamStore<f32>,
    vocab: &Vocab,
    pairs: &[(String, String)],
    tc: &TrainConfig,
) -> Result<Checkpoint, TrainError> {
    tc.validate()?;
    config.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let per_epoch = tc.steps_per_epoch(pairs.len());
    let total = tc.total_steps(pairs.len());
    let trainability = if tc.freeze_base {
        Trainability::BridgeOnly
    } else {
        Trainability::All
    };
    let mut state = AdamState::new();
    let mut losses: Vec<(u64, f32)> = Vec::with_capacity(total as usize);
    let mut batches = Vec::new();
    for step in 0..total {
        if step % per_epoch == 0 {
            let epoch = step / per_epoch;
            batches = make_batches(pairs, vocab, tc.batch_size, tc.seed.wrapping_add(epoch));
        }
        let batch = &batches[(step % per_epoch) as usize];
        let mut run = ModelRun::new(config, &store, trainability)?;
        let loss_id = run.training_loss(batch)?;
        let loss = run.graph.data(loss_id)[0];
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                value: loss as f64,
                diagnostic: Box::new(snapshot(config, vocab, step, &losses, &store, &state)),
            });
        }
        losses.push((step, loss));
        if tc.log_every > 0 && (step % tc.log_every == 0 || step + 1 == total) {
            eprintln!("step {step}/{total} loss {loss:.6}");
        }
        run.graph.backward(loss_id).map_err(ModelError::from)?;
        let mut grads = run.graph.param_grads();
        if let Some(max_norm) = tc.clip_norm {
            clip_gradients(&mut grads, max_norm);
        }
        adam_step(&mut store, &grads, &mut state, &tc.hyper(step), step)?;
    }
    Ok(snapshot(config, vocab, total, &losses, &store, &state))
}

fn snapshot(
    config: &ModelConfig,
    vocab: &Vocab,
    step: u64,
    losses: &[(u64, f32)],
    store: &ParamStore<f32>,
    state: &AdamState,
) -> Checkpoint {
    Checkpoint {
        config: config.clone(),
        vocab: vocab.clone(),
        step,
        loss_history: losses.to_vec(),
        params: store.clone(),
        adam: Some(state.clone()),
    }
}

/// Initialize a full model from scratch and train it. `config.bridge_enabled`
/// decides whether a bridge (initialized per `tc.bridge_init`) is attached.
pub fn retrain(
    config: &ModelConfig,
    vocab: &Vocab,
    pairs: &[(String, String)],
    tc: &TrainConfig,
    body: BodyInit,
) -> Result<Checkpoint, TrainError> {
    let store = init_store(config, tc, body);
    train_loop(config, store, vocab, pairs, tc)
}

fn init_store(config: &ModelConfig, tc: &TrainConfig, body: BodyInit) -> ParamStore<f32> {
    let mut body_config = config.clone();
    body_config.bridge_enabled = false;
    let mut store = ParamStore::<f32>::init(&body_config, tc.seed, body);
    if config.bridge_enabled {
        store.attach_bridge(&BridgeWeights::from_scheme(
            tc.bridge_init,
            config.n_enc_layers,
            config.n_dec_layers,
            config.d_model,
            tc.seed,
        ));
    }
    store
}

/// Continue training from a base checkpoint. `bridge: Some(scheme)` attaches
/// a freshly initialized bridge first (experiments 1 and 3); `None` trains
/// the base model as-is (experiment 2).
pub fn finetune(
    base: &Checkpoint,
    pairs: &[(String, String)],
    tc: &TrainConfig,
    bridge: Option<InitScheme>,
) -> Result<Checkpoint, TrainError> {
    let mut config = base.config.clone();
    let mut store = base.params.clone();
    if let Some(scheme) = bridge {
        config.bridge_enabled = true;
        store.attach_bridge(&BridgeWeights::from_scheme(
            scheme,
            config.n_enc_layers,
            config.n_dec_layers,
            config.d_model,
            tc.seed,
        ));
    }
    train_loop(&config, store, &base.vocab, pairs, tc)
}

/// One row of the experiment report (`experiment,evaluate_loss,bleu`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: u8,
    pub evaluate_loss: f64,
    pub bleu: f64,
}

impl ExperimentReport {
    pub fn csv_header() -> &'static str {
        "experiment,evaluate_loss,bleu"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.experiment, self.evaluate_loss, self.bleu)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOptions {
    /// 0..=4, see the module docs for the mapping.
    pub id: u8,
    /// Body architecture; `vocab_size` and `bridge_enabled` are overridden
    /// per experiment. Ignored for 1..=3, which reuse the base config.
    pub model: ModelConfig,
    pub task: Task,
    pub n_train_pairs: usize,
    pub n_eval_pairs: usize,
    pub len_range: RangeInclusive<usize>,
    /// Seed for synthetic data; evaluation data uses `data_seed + 1`.
    pub data_seed: u64,
    pub train: TrainConfig,
    /// Body initialization for the retrain experiments (0 and 4).
    pub body_init: BodyInit,
    /// Base checkpoint, required for experiments 1..=3.
    pub base: Option<Checkpoint>,
}

impl ExperimentOptions {
    /// Desk-scale defaults on the substitution task; callers override fields
    /// as needed and must supply `base` for experiments 1..=3.
    pub fn desk(id: u8) -> Self {
        Self {
            id,
            model: ModelConfig::desk(0),
            task: Task::Subst,
            n_train_pairs: 5000,
            n_eval_pairs: 500,
            len_range: 3..=12,
            data_seed: 42,
            train: TrainConfig {
                length: TrainLength::Steps(2000),
                ..TrainConfig::default()
            },
            body_init: BodyInit::Xavier,
            base: None,
        }
    }
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub checkpoint: Checkpoint,
    pub bleu: BleuReport,
    /// Block-norm grid of the trained bridge (bridged experiments only).
    pub block_norms: Option<BlockNormMatrix>,
    /// Per-block drift between the initial and trained bridge.
    pub drift: Option<BlockNormMatrix>,
}

/// Run one numbered experiment end to end: train the configured variant,
/// evaluate loss + BLEU on held-out data, and analyze the bridge when one is
/// present.
pub fn workflow_experiment(opts: &ExperimentOptions) -> Result<ExperimentOutcome, TrainError> {
    if opts.id > 4 {
        return Err(TrainError::InvalidConfig {
            detail: format!("experiment id {} out of range 0..=4", opts.id),
        });
    }
    let train_pairs = gen_synthetic(
        opts.task,
        opts.n_train_pairs,
        opts.data_seed,
        opts.len_range.clone(),
    );
    let eval_pairs = gen_synthetic(
        opts.task,
        opts.n_eval_pairs,
        opts.data_seed.wrapping_add(1),
        opts.len_range.clone(),
    );
    let mut tc = opts.train.clone();

    let (config, vocab, store, scheme) = match opts.id {
        0 | 4 => {
            tc.mode = TrainMode::Retrain;
            let mut corpus = train_pairs.clone();
            corpus.extend_from_slice(&eval_pairs);
            let vocab = Vocab::from_corpus(&corpus);
            let mut config = opts.model.clone();
            config.vocab_size = vocab.size();
            config.bridge_enabled = opts.id == 4;
            let store = init_store(&config, &tc, opts.body_init);
            let scheme = (opts.id == 4).then_some(tc.bridge_init);
            (config, vocab, store, scheme)
        }
        _ => {
            tc.mode = TrainMode::Finetune;
            let base = opts.base.as_ref().ok_or(TrainError::MissingBase {
                experiment: opts.id,
            })?;
            let scheme = match opts.id {
                1 => Some(InitScheme::OriginalConnection),
                3 => Some(InitScheme::Gca),
                _ => None,
            };
            let mut config = base.config.clone();
            let mut store = base.params.clone();
            if let Some(scheme) = scheme {
                tc.bridge_init = scheme;
                config.bridge_enabled = true;
                store.attach_bridge(&BridgeWeights::from_scheme(
                    scheme,
                    config.n_enc_layers,
                    config.n_dec_layers,
                    config.d_model,
                    tc.seed,
                ));
            }
            (config, base.vocab.clone(), store, scheme)
        }
    };

    let bridge_before = config
        .bridge_enabled
        .then(|| store.extract_bridge(&config))
        .transpose()?;

    let checkpoint = train_loop(&config, store, &vocab, &train_pairs, &tc)?;

    let eval_batches = make_eval_batches(&eval_pairs, &vocab, 16);
    let loss = evaluate_loss(&config, &checkpoint.params, &eval_batches)?;
    let bleu = crate::eval::evaluate_bleu(&config, &checkpoint.params, &vocab, &eval_pairs)?;

    let (block, drift) = match bridge_before {
        Some(before) => {
            let after = checkpoint.params.extract_bridge(&config)?;
            let mut grid = block_norms(&after, &config)?;
            grid.step = checkpoint.step;
            grid.scheme = scheme;
            let mut moved = weight_drift(&before, &after)?;
            moved.step = checkpoint.step;
            moved.scheme = scheme;
            (Some(grid), Some(moved))
        }
        None => (None, None),
    };

    Ok(ExperimentOutcome {
        report: ExperimentReport {
            experiment: opts.id,
            evaluate_loss: loss,
            bleu: bleu.bleu,
        },
        checkpoint,
        bleu,
        block_norms: block,
        drift,
    })
}

/// Write a loss series as CSV with header `step,loss`.
pub fn write_loss_csv(losses: &[(u64, f32)], path: &Path) -> Result<(), TrainError> {
    let mut out = String::from("step,loss\n");
    for (step, loss) in losses {
        out.push_str(&format!("{step},{loss}\n"));
    }
    std::fs::write(path, out).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write experiment report rows as CSV with header `experiment,evaluate_loss,bleu`.
pub fn write_report_csv(reports: &[ExperimentReport], path: &Path) -> Result<(), TrainError> {
    let mut out = String::from(ExperimentReport::csv_header());
    out.push('\n');
    for report in reports {
        out.push_str(&report.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Greedy-decode a whole corpus and BLEU-score it (helper shared by the CLI
/// eval command and the workflows).
pub fn decode_corpus_bleu(
    config: &ModelConfig,
    store: &ParamStore<f32>,
    vocab: &Vocab,
    pairs: &[(String, String)],
    max_len: usize,
) -> Result<(Vec<String>, BleuReport), TrainError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus.into());
    }
    let mut hyps_text = Vec::with_capacity(pairs.len());
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        let ids = greedy_decode(config, store, &vocab.encode(src), max_len)?;
        hyps_text.push(vocab.decode(&ids));
        hyps.push(ids);
        refs.push(vocab.encode(tgt));
    }
    let report = corpus_bleu(&hyps, &refs)?;
    Ok((hyps_text, report))
}
