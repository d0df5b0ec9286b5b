//! `encbridge` — train, fine-tune, evaluate and analyze the bridged
//! encoder-decoder model from the command line.
//!
//! Every command resolves its options (config file first, flags win), writes
//! a `manifest` into `ROOT/<name>/` before computing anything, then produces
//! its outputs next to it:
//!
//! ```text
//! ROOT/<name>/
//!   manifest        resolved options (TOML); `rerun` re-executes from it
//!   vocab.txt       one non-reserved token per line
//!   loss.csv        per-step training loss (`step,loss`)
//!   report.csv      experiment metrics (`experiment,evaluate_loss,bleu`)
//!   ckpt/           binary checkpoints
//!   heatmaps/       bridge analysis (CSV + PGM + minmax sidecars)
//! ```
//!
//! `ROOT` is `--out-root`, else `$ENCBRIDGE_RUN_ROOT`, else `./run`.
//! Exit codes: 0 success, 1 runtime/numeric failure, 2 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use encbridge::analysis::{export_csv, export_pgm, export_raw_matrix_pgm, BlockNormMatrix};
use encbridge::analysis::{block_norms, weight_drift};
use encbridge::bridge::InitScheme;
use encbridge::data::{gen_synthetic, load_tsv, make_eval_batches, Task, Vocab};
use encbridge::eval::{evaluate_loss, BleuReport};
use encbridge::gradcheck::gradcheck;
use encbridge::manifest::RunManifest;
use encbridge::model::{BodyInit, ModelConfig};
use encbridge::train::{
    decode_corpus_bleu, finetune, retrain, workflow_experiment, Checkpoint, ExperimentOptions,
    ExperimentReport, TrainConfig, TrainError, TrainLength, TrainMode, write_loss_csv,
    write_report_csv,
};

#[derive(Parser)]
#[command(
    name = "encbridge",
    about = "Desk-scale encoder-decoder transformer with a trainable encoder-to-decoder bridge",
    version
)]
struct Cli {
    /// Output root directory (overrides $ENCBRIDGE_RUN_ROOT; default "run").
    #[arg(long, global = true)]
    out_root: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from scratch (optionally with a bridge attached).
    Train(TrainArgs),
    /// Continue training from a base checkpoint, optionally attaching a bridge.
    Finetune(FinetuneArgs),
    /// Run one numbered experiment (0..=4) end to end.
    Experiment(ExperimentArgs),
    /// Evaluate a checkpoint: evaluate loss + corpus BLEU.
    Eval(EvalArgs),
    /// Export bridge block-norm heatmaps (and drift against a baseline).
    Analyze(AnalyzeArgs),
    /// Verify autograd against finite differences on a tiny bridged model.
    Gradcheck(GradcheckArgs),
    /// Re-execute a run from its manifest.
    Rerun(RerunArgs),
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        let mut msg = e.to_string();
        let mut source = e.source();
        while let Some(s) = source {
            msg.push_str(&format!(": {s}"));
            source = s.source();
        }
        CliError::Runtime(msg)
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let root = out_root(&cli.out_root);
    let argv: Vec<String> = std::env::args().collect();
    match cli.cmd {
        Cmd::Train(args) => cmd_train(&root, argv, args.resolve()?),
        Cmd::Finetune(args) => cmd_finetune(&root, argv, args.resolve()?),
        Cmd::Experiment(args) => cmd_experiment(&root, argv, args.resolve()?),
        Cmd::Eval(args) => cmd_eval(&root, argv, args.resolve()?),
        Cmd::Analyze(args) => cmd_analyze(&root, argv, args.resolve()?),
        Cmd::Gradcheck(args) => cmd_gradcheck(&root, argv, args.resolve()?),
        Cmd::Rerun(args) => cmd_rerun(&root, argv, args),
    }
}

fn out_root(flag: &Option<String>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var("ENCBRIDGE_RUN_ROOT").ok())
        .unwrap_or_else(|| "run".to_string())
        .into()
}

// ---- shared flag groups --------------------------------------------------

/// Model architecture flags (desk-scale defaults).
#[derive(Args, Clone, Debug)]
struct ModelFlags {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct ModelDims {
    d_model: usize,
    heads: usize,
    d_ff: usize,
    enc_layers: usize,
    dec_layers: usize,
    max_seq: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let desk = ModelConfig::desk(0);
        Self {
            d_model: desk.d_model,
            heads: desk.n_heads,
            d_ff: desk.d_ff,
            enc_layers: desk.n_enc_layers,
            dec_layers: desk.n_dec_layers,
            max_seq: desk.max_seq_len,
        }
    }
}

impl ModelDims {
    fn overlay(&mut self, flags: &ModelFlags) {
        if let Some(v) = flags.d_model {
            self.d_model = v;
        }
        if let Some(v) = flags.heads {
            self.heads = v;
        }
        if let Some(v) = flags.d_ff {
            self.d_ff = v;
        }
        if let Some(v) = flags.enc_layers {
            self.enc_layers = v;
        }
        if let Some(v) = flags.dec_layers {
            self.dec_layers = v;
        }
        if let Some(v) = flags.max_seq {
            self.max_seq = v;
        }
    }

    fn to_config(&self) -> ModelConfig {
        let mut c = ModelConfig::desk(0);
        c.d_model = self.d_model;
        c.n_heads = self.heads;
        c.d_ff = self.d_ff;
        c.n_enc_layers = self.enc_layers;
        c.n_dec_layers = self.dec_layers;
        c.max_seq_len = self.max_seq;
        c
    }
}

/// Optimization flags shared by the training commands.
#[derive(Args, Clone, Debug)]
struct OptimFlags {
    /// Fixed number of optimizer steps (conflicts with --epochs).
    #[arg(long, conflicts_with = "epochs")]
    steps: Option<u64>,
    /// Whole passes over the data, ceil(n/batch) steps each.
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Global-norm gradient clip; 0 disables clipping.
    #[arg(long)]
    clip: Option<f64>,
    /// Linear learning-rate warmup steps (0 = constant lr).
    #[arg(long)]
    warmup: Option<u64>,
    /// Training seed (shuffling + parameter init).
    #[arg(long)]
    seed: Option<u64>,
    /// Train only bridge parameters, freezing the body.
    #[arg(long)]
    freeze_base: bool,
    /// Stderr progress frequency in steps (0 = silent).
    #[arg(long)]
    log_every: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct OptimParams {
    /// Run length, e.g. `length = { Steps = 2000 }` or `{ Epochs = 1 }`.
    length: TrainLength,
    batch_size: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    warmup: u64,
    seed: u64,
    freeze_base: bool,
    log_every: u64,
}

impl Default for OptimParams {
    fn default() -> Self {
        let tc = TrainConfig::default();
        Self {
            length: TrainLength::Epochs(1),
            batch_size: tc.batch_size,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip: tc.clip_norm.unwrap_or(0.0) as f64,
            warmup: tc.warmup_steps,
            seed: tc.seed,
            freeze_base: false,
            log_every: 50,
        }
    }
}

impl OptimParams {
    fn overlay(&mut self, flags: &OptimFlags) {
        if let Some(v) = flags.steps {
            self.length = TrainLength::Steps(v);
        }
        if let Some(v) = flags.epochs {
            self.length = TrainLength::Epochs(v);
        }
        if let Some(v) = flags.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = flags.lr {
            self.lr = v;
        }
        if let Some(v) = flags.beta1 {
            self.beta1 = v;
        }
        if let Some(v) = flags.beta2 {
            self.beta2 = v;
        }
        if let Some(v) = flags.eps {
            self.eps = v;
        }
        if let Some(v) = flags.clip {
            self.clip = v;
        }
        if let Some(v) = flags.warmup {
            self.warmup = v;
        }
        if let Some(v) = flags.seed {
            self.seed = v;
        }
        if flags.freeze_base {
            self.freeze_base = true;
        }
        if let Some(v) = flags.log_every {
            self.log_every = v;
        }
    }

    fn to_train_config(&self, mode: TrainMode, bridge_init: InitScheme) -> TrainConfig {
        TrainConfig {
            mode,
            length: self.length,
            batch_size: self.batch_size,
            lr: self.lr as f32,
            beta1: self.beta1 as f32,
            beta2: self.beta2 as f32,
            eps: self.eps as f32,
            clip_norm: (self.clip > 0.0).then_some(self.clip as f32),
            warmup_steps: self.warmup,
            seed: self.seed,
            bridge_init,
            freeze_base: self.freeze_base,
            log_every: self.log_every,
        }
    }
}

/// Synthetic-data flags shared by commands that generate their corpus.
#[derive(Args, Clone, Debug)]
struct DataFlags {
    /// Synthetic task: copy | reverse | subst.
    #[arg(long, visible_alias = "data")]
    task: Option<String>,
    /// Tab-separated source/target file; overrides synthetic generation.
    #[arg(long)]
    tsv: Option<String>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
    /// Seed for synthetic data generation (independent of --seed).
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct DataParams {
    task: String,
    tsv: Option<String>,
    n_pairs: usize,
    len_min: usize,
    len_max: usize,
    data_seed: u64,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            task: "subst".into(),
            tsv: None,
            n_pairs: 5000,
            len_min: 3,
            len_max: 12,
            data_seed: 42,
        }
    }
}

impl DataParams {
    fn overlay(&mut self, flags: &DataFlags) {
        if let Some(v) = &flags.task {
            self.task = v.clone();
        }
        if let Some(v) = &flags.tsv {
            self.tsv = Some(v.clone());
        }
        if let Some(v) = flags.n_pairs {
            self.n_pairs = v;
        }
        if let Some(v) = flags.len_min {
            self.len_min = v;
        }
        if let Some(v) = flags.len_max {
            self.len_max = v;
        }
        if let Some(v) = flags.data_seed {
            self.data_seed = v;
        }
    }

    fn parse_task(&self) -> Result<Task, CliError> {
        Task::from_flag(&self.task)
            .ok_or_else(|| CliError::usage(format!("unknown task `{}` (copy|reverse|subst)", self.task)))
    }

    /// Training pairs: the TSV file when given, synthetic otherwise.
    fn pairs(&self) -> Result<Vec<(String, String)>, CliError> {
        match &self.tsv {
            Some(path) => load_tsv(Path::new(path)).map_err(|e| CliError::usage(e.to_string())),
            None => Ok(gen_synthetic(
                self.parse_task()?,
                self.n_pairs,
                self.data_seed,
                self.len_min..=self.len_max,
            )),
        }
    }
}

fn parse_bridge(name: &str) -> Result<Option<InitScheme>, CliError> {
    if name == "none" {
        return Ok(None);
    }
    InitScheme::from_flag(name).map(Some).ok_or_else(|| {
        CliError::usage(format!(
            "unknown bridge init `{name}` (none|original|gca|ones|xavier)"
        ))
    })
}

fn parse_body(name: &str) -> Result<BodyInit, CliError> {
    match name {
        "xavier" => Ok(BodyInit::Xavier),
        "ones" => Ok(BodyInit::Ones),
        other => Err(CliError::usage(format!(
            "unknown body init `{other}` (xavier|ones)"
        ))),
    }
}

fn load_params_file<T: serde::de::DeserializeOwned + Default>(
    path: &Option<String>,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config file {p}: {e}")))?;
            toml::from_str(&text).map_err(|e| CliError::usage(format!("config file {p}: {e}")))
        }
    }
}

fn load_checkpoint(path: &str) -> Result<Checkpoint, CliError> {
    Checkpoint::load(Path::new(path)).map_err(|e| match e {
        TrainError::Io { .. } => CliError::usage(e.to_string()),
        other => other.into(),
    })
}

/// Create the run directory tree and write the manifest before any compute.
fn start_run<P: Serialize>(
    root: &Path,
    name: &str,
    command: &str,
    argv: Vec<String>,
    seed: u64,
    outputs: &[&str],
    params: &P,
) -> Result<PathBuf, CliError> {
    let dir = root.join(name);
    std::fs::create_dir_all(dir.join("ckpt"))
        .and_then(|_| std::fs::create_dir_all(dir.join("heatmaps")))
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let manifest = RunManifest::new(
        command,
        argv,
        seed,
        &dir,
        outputs.iter().map(|s| s.to_string()).collect(),
        params,
    )?;
    manifest.save(&dir.join("manifest"))?;
    Ok(dir)
}

// ---- train ---------------------------------------------------------------

#[derive(Args, Clone, Debug)]
struct TrainArgs {
    /// Run name: outputs go to ROOT/<name>/.
    #[arg(long)]
    name: String,
    /// TOML config file; explicit flags override its values.
    #[arg(long)]
    config: Option<String>,
    /// Bridge init: none | original | gca | ones | xavier.
    #[arg(long)]
    bridge: Option<String>,
    /// Body init for from-scratch weights: xavier | ones.
    #[arg(long)]
    body: Option<String>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    optim: OptimFlags,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct TrainParams {
    name: String,
    bridge: String,
    body: String,
    data: DataParams,
    optim: OptimParams,
    model: ModelDims,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            name: String::new(),
            bridge: "none".into(),
            body: "xavier".into(),
            data: DataParams::default(),
            optim: OptimParams::default(),
            model: ModelDims::default(),
        }
    }
}

impl TrainArgs {
    fn resolve(self) -> Result<TrainParams, CliError> {
        let mut p: TrainParams = load_params_file(&self.config)?;
        p.name = self.name;
        if let Some(v) = self.bridge {
            p.bridge = v;
        }
        if let Some(v) = self.body {
            p.body = v;
        }
        p.data.overlay(&self.data);
        p.optim.overlay(&self.optim);
        p.model.overlay(&self.model);
        Ok(p)
    }
}

fn cmd_train(root: &Path, argv: Vec<String>, p: TrainParams) -> Result<(), CliError> {
    let bridge = parse_bridge(&p.bridge)?;
    let body = parse_body(&p.body)?;
    let tc = p
        .optim
        .to_train_config(TrainMode::Retrain, bridge.unwrap_or(InitScheme::OriginalConnection));
    let dir = start_run(
        root,
        &p.name,
        "train",
        argv,
        tc.seed,
        &["vocab.txt", "loss.csv", "ckpt/model.ckpt"],
        &p,
    )?;
    let pairs = p.data.pairs()?;
    let vocab = Vocab::from_corpus(&pairs);
    let mut config = p.model.to_config();
    config.vocab_size = vocab.size();
    config.bridge_enabled = bridge.is_some();
    let ckpt = retrain(&config, &vocab, &pairs, &tc, body)?;
    vocab.save(&dir.join("vocab.txt"))?;
    write_loss_csv(&ckpt.loss_history, &dir.join("loss.csv"))?;
    ckpt.save(&dir.join("ckpt/model.ckpt"))?;
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        ckpt.step,
        ckpt.loss_history.last().map(|(_, l)| *l).unwrap_or(f32::NAN),
        dir.join("ckpt/model.ckpt").display()
    );
    Ok(())
}

// ---- finetune ------------------------------------------------------------

#[derive(Args, Clone, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    name: String,
    #[arg(long)]
    config: Option<String>,
    /// Base checkpoint to continue from.
    #[arg(long)]
    base: Option<String>,
    /// Bridge to attach before training: none | original | gca | ones | xavier.
    #[arg(long)]
    bridge: Option<String>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    optim: OptimFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct FinetuneParams {
    name: String,
    base: String,
    bridge: String,
    data: DataParams,
    optim: OptimParams,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        Self {
            name: String::new(),
            base: String::new(),
            bridge: "none".into(),
            data: DataParams::default(),
            optim: OptimParams::default(),
        }
    }
}

impl FinetuneArgs {
    fn resolve(self) -> Result<FinetuneParams, CliError> {
        let mut p: FinetuneParams = load_params_file(&self.config)?;
        p.name = self.name;
        if let Some(v) = self.base {
            p.base = v;
        }
        if let Some(v) = self.bridge {
            p.bridge = v;
        }
        p.data.overlay(&self.data);
        p.optim.overlay(&self.optim);
        Ok(p)
    }
}

fn cmd_finetune(root: &Path, argv: Vec<String>, p: FinetuneParams) -> Result<(), CliError> {
    if p.base.is_empty() {
        return Err(CliError::usage("finetune requires --base <checkpoint>"));
    }
    let bridge = parse_bridge(&p.bridge)?;
    let tc = p
        .optim
        .to_train_config(TrainMode::Finetune, bridge.unwrap_or(InitScheme::OriginalConnection));
    let dir = start_run(
        root,
        &p.name,
        "finetune",
        argv,
        tc.seed,
        &["vocab.txt", "loss.csv", "ckpt/model.ckpt"],
        &p,
    )?;
    let base = load_checkpoint(&p.base)?;
    let pairs = p.data.pairs()?;
    let ckpt = finetune(&base, &pairs, &tc, bridge)?;
    ckpt.vocab.save(&dir.join("vocab.txt"))?;
    write_loss_csv(&ckpt.loss_history, &dir.join("loss.csv"))?;
    ckpt.save(&dir.join("ckpt/model.ckpt"))?;
    println!(
        "fine-tuned {} steps, final loss {:.6}, checkpoint {}",
        ckpt.step,
        ckpt.loss_history.last().map(|(_, l)| *l).unwrap_or(f32::NAN),
        dir.join("ckpt/model.ckpt").display()
    );
    Ok(())
}

// ---- experiment ----------------------------------------------------------

#[derive(Args, Clone, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    name: String,
    #[arg(long)]
    config: Option<String>,
    /// Experiment id: 0 stock retrain (toy base), 1 identity-bridge finetune,
    /// 2 direct finetune, 3 GCA finetune, 4 bridged retrain.
    #[arg(long)]
    id: u8,
    /// Base checkpoint (required for ids 1..=3).
    #[arg(long)]
    base: Option<String>,
    /// Bridge init for id 4: original | gca | ones | xavier.
    #[arg(long)]
    bridge: Option<String>,
    /// Body init for ids 0 and 4: xavier | ones.
    #[arg(long)]
    body: Option<String>,
    /// Held-out evaluation pairs (synthetic, data_seed + 1).
    #[arg(long)]
    eval_pairs: Option<usize>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    optim: OptimFlags,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct ExperimentParams {
    name: String,
    id: u8,
    base: Option<String>,
    bridge: String,
    body: String,
    eval_pairs: usize,
    data: DataParams,
    optim: OptimParams,
    model: ModelDims,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            name: String::new(),
            id: 0,
            base: None,
            bridge: "original".into(),
            body: "xavier".into(),
            eval_pairs: 500,
            data: DataParams::default(),
            optim: OptimParams {
                length: TrainLength::Steps(2000),
                ..OptimParams::default()
            },
            model: ModelDims::default(),
        }
    }
}

impl ExperimentArgs {
    fn resolve(self) -> Result<ExperimentParams, CliError> {
        let mut p: ExperimentParams = load_params_file(&self.config)?;
        p.name = self.name;
        p.id = self.id;
        if let Some(v) = self.base {
            p.base = Some(v);
        }
        if let Some(v) = self.bridge {
            p.bridge = v;
        }
        if let Some(v) = self.body {
            p.body = v;
        }
        if let Some(v) = self.eval_pairs {
            p.eval_pairs = v;
        }
        p.data.overlay(&self.data);
        p.optim.overlay(&self.optim);
        p.model.overlay(&self.model);
        Ok(p)
    }
}

fn cmd_experiment(root: &Path, argv: Vec<String>, p: ExperimentParams) -> Result<(), CliError> {
    if p.id > 4 {
        return Err(CliError::usage(format!(
            "experiment id {} out of range 0..=4",
            p.id
        )));
    }
    if (1..=3).contains(&p.id) && p.base.is_none() {
        return Err(CliError::usage(format!(
            "experiment {} requires --base <checkpoint> (train one with experiment 0 first)",
            p.id
        )));
    }
    let bridge = parse_bridge(&p.bridge)?
        .ok_or_else(|| CliError::usage("experiment bridge init cannot be `none`"))?;
    let body = parse_body(&p.body)?;
    let tc = p.optim.to_train_config(
        if (1..=3).contains(&p.id) {
            TrainMode::Finetune
        } else {
            TrainMode::Retrain
        },
        bridge,
    );
    let dir = start_run(
        root,
        &p.name,
        "experiment",
        argv,
        tc.seed,
        &[
            "vocab.txt",
            "loss.csv",
            "report.csv",
            "ckpt/model.ckpt",
            "heatmaps/block_norms.csv",
        ],
        &p,
    )?;
    let base = p.base.as_deref().map(load_checkpoint).transpose()?;
    let opts = ExperimentOptions {
        id: p.id,
        model: p.model.to_config(),
        task: p.data.parse_task()?,
        n_train_pairs: p.data.n_pairs,
        n_eval_pairs: p.eval_pairs,
        len_range: p.data.len_min..=p.data.len_max,
        data_seed: p.data.data_seed,
        train: tc,
        body_init: body,
        base,
    };
    let outcome = workflow_experiment(&opts)?;
    outcome.checkpoint.vocab.save(&dir.join("vocab.txt"))?;
    write_loss_csv(&outcome.checkpoint.loss_history, &dir.join("loss.csv"))?;
    write_report_csv(std::slice::from_ref(&outcome.report), &dir.join("report.csv"))?;
    outcome.checkpoint.save(&dir.join("ckpt/model.ckpt"))?;
    if let Some(grid) = &outcome.block_norms {
        save_heatmap(grid, &dir.join("heatmaps"), "block_norms")?;
    }
    if let Some(grid) = &outcome.drift {
        save_heatmap(grid, &dir.join("heatmaps"), "drift")?;
    }
    println!("{}", ExperimentReport::csv_header());
    println!("{}", outcome.report.csv_row());
    Ok(())
}

fn save_heatmap(grid: &BlockNormMatrix, dir: &Path, stem: &str) -> Result<(), CliError> {
    export_csv(grid, &dir.join(format!("{stem}.csv")))?;
    export_pgm(grid, &dir.join(format!("{stem}.pgm")), 16)?;
    Ok(())
}

// ---- eval ----------------------------------------------------------------

#[derive(Args, Clone, Debug)]
struct EvalArgs {
    /// Run name for the manifest (outputs are stdout-only).
    #[arg(long, default_value = "eval")]
    name: String,
    #[arg(long)]
    config: Option<String>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Also print the full BLEU precision breakdown.
    #[arg(long)]
    detail: bool,
    #[command(flatten)]
    data: DataFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct EvalParams {
    name: String,
    ckpt: String,
    batch_size: usize,
    detail: bool,
    data: DataParams,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            name: "eval".into(),
            ckpt: String::new(),
            batch_size: 16,
            detail: false,
            data: DataParams {
                n_pairs: 500,
                data_seed: 43,
                ..DataParams::default()
            },
        }
    }
}

impl EvalArgs {
    fn resolve(self) -> Result<EvalParams, CliError> {
        let mut p: EvalParams = load_params_file(&self.config)?;
        p.name = self.name;
        if let Some(v) = self.ckpt {
            p.ckpt = v;
        }
        if let Some(v) = self.batch_size {
            p.batch_size = v;
        }
        if self.detail {
            p.detail = true;
        }
        p.data.overlay(&self.data);
        Ok(p)
    }
}

fn cmd_eval(root: &Path, argv: Vec<String>, p: EvalParams) -> Result<(), CliError> {
    if p.ckpt.is_empty() {
        return Err(CliError::usage("eval requires --ckpt <checkpoint>"));
    }
    start_run(root, &p.name, "eval", argv, p.data.data_seed, &[], &p)?;
    let ckpt = load_checkpoint(&p.ckpt)?;
    let pairs = p.data.pairs()?;
    let batches = make_eval_batches(&pairs, &ckpt.vocab, p.batch_size);
    let loss = evaluate_loss(&ckpt.config, &ckpt.params, &batches)?;
    let max_ref = pairs
        .iter()
        .map(|(_, t)| ckpt.vocab.encode(t).len())
        .max()
        .unwrap_or(0);
    let (_, bleu) = decode_corpus_bleu(
        &ckpt.config,
        &ckpt.params,
        &ckpt.vocab,
        &pairs,
        (max_ref + 5).min(ckpt.config.max_seq_len.saturating_sub(1)),
    )?;
    println!("evaluate_loss,bleu");
    println!("{loss},{}", bleu.bleu);
    if p.detail {
        println!("{}", BleuReport::csv_header(4));
        println!("{}", bleu.csv_row());
    }
    Ok(())
}

// ---- analyze -------------------------------------------------------------

#[derive(Args, Clone, Debug)]
struct AnalyzeArgs {
    #[arg(long, default_value = "analyze")]
    name: String,
    /// Checkpoint whose bridge to analyze.
    #[arg(long)]
    ckpt: String,
    /// Earlier checkpoint to diff against (drift grid).
    #[arg(long)]
    baseline: Option<String>,
    /// Integer PGM upscaling factor.
    #[arg(long, default_value_t = 16)]
    scale: usize,
    /// Also export each decoder layer's raw bridge matrix as PGM.
    #[arg(long)]
    raw: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct AnalyzeParams {
    name: String,
    ckpt: String,
    baseline: Option<String>,
    scale: usize,
    raw: bool,
}

impl Default for AnalyzeParams {
    fn default() -> Self {
        Self {
            name: "analyze".into(),
            ckpt: String::new(),
            baseline: None,
            scale: 16,
            raw: false,
        }
    }
}

impl AnalyzeArgs {
    fn resolve(self) -> Result<AnalyzeParams, CliError> {
        Ok(AnalyzeParams {
            name: self.name,
            ckpt: self.ckpt,
            baseline: self.baseline,
            scale: self.scale,
            raw: self.raw,
        })
    }
}

fn cmd_analyze(root: &Path, argv: Vec<String>, p: AnalyzeParams) -> Result<(), CliError> {
    let dir = start_run(
        root,
        &p.name,
        "analyze",
        argv,
        0,
        &["heatmaps/block_norms.csv", "heatmaps/block_norms.pgm"],
        &p,
    )?;
    let ckpt = load_checkpoint(&p.ckpt)?;
    let bridge = ckpt.params.extract_bridge(&ckpt.config)?;
    let heatmaps = dir.join("heatmaps");
    let mut grid = block_norms(&bridge, &ckpt.config)?;
    grid.step = ckpt.step;
    export_csv(&grid, &heatmaps.join("block_norms.csv"))?;
    export_pgm(&grid, &heatmaps.join("block_norms.pgm"), p.scale)?;
    if let Some(baseline_path) = &p.baseline {
        let baseline = load_checkpoint(baseline_path)?;
        let before = baseline.params.extract_bridge(&baseline.config)?;
        let mut drift = weight_drift(&before, &bridge)?;
        drift.step = ckpt.step;
        export_csv(&drift, &heatmaps.join("drift.csv"))?;
        export_pgm(&drift, &heatmaps.join("drift.pgm"), p.scale)?;
    }
    if p.raw {
        for layer in 0..bridge.l_dec() {
            export_raw_matrix_pgm(&bridge, layer, &heatmaps.join(format!("raw_l{layer}.pgm")), 1)?;
        }
    }
    println!("wrote heatmaps to {}", heatmaps.display());
    Ok(())
}

// ---- gradcheck -----------------------------------------------------------

#[derive(Args, Clone, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "gradcheck")]
    name: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Max relative error allowed; the check passes strictly below it.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Check a bridge-free model instead.
    #[arg(long)]
    no_bridge: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct GradcheckParams {
    name: String,
    seed: u64,
    threshold: f64,
    no_bridge: bool,
    model: ModelDims,
}

impl Default for GradcheckParams {
    fn default() -> Self {
        let tiny = encbridge::gradcheck::tiny_config();
        Self {
            name: "gradcheck".into(),
            seed: 0,
            threshold: 1e-4,
            no_bridge: false,
            model: ModelDims {
                d_model: tiny.d_model,
                heads: tiny.n_heads,
                d_ff: tiny.d_ff,
                enc_layers: tiny.n_enc_layers,
                dec_layers: tiny.n_dec_layers,
                max_seq: tiny.max_seq_len,
            },
        }
    }
}

impl GradcheckArgs {
    fn resolve(self) -> Result<GradcheckParams, CliError> {
        let mut p = GradcheckParams {
            name: self.name,
            seed: self.seed,
            threshold: self.threshold,
            no_bridge: self.no_bridge,
            ..GradcheckParams::default()
        };
        p.model.overlay(&self.model);
        Ok(p)
    }
}

fn cmd_gradcheck(root: &Path, argv: Vec<String>, p: GradcheckParams) -> Result<(), CliError> {
    start_run(root, &p.name, "gradcheck", argv, p.seed, &[], &p)?;
    let mut config = p.model.to_config();
    config.bridge_enabled = !p.no_bridge;
    let report = gradcheck(&config, p.seed, p.threshold)?;
    println!(
        "gradcheck: checked {} elements, max rel err {:e} at {}[{}], threshold {:e} -> {}",
        report.checked,
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        report.threshold,
        if report.pass { "PASS" } else { "FAIL" }
    );
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max rel err {:e} >= threshold {:e}",
            report.max_rel_err, report.threshold
        )))
    }
}

// ---- rerun ---------------------------------------------------------------

#[derive(Args, Clone, Debug)]
struct RerunArgs {
    /// Manifest of the run to reproduce.
    #[arg(long)]
    manifest: String,
    /// Name for the reproduced run (default: `<original>-rerun`).
    #[arg(long)]
    name: Option<String>,
}

fn cmd_rerun(root: &Path, argv: Vec<String>, args: RerunArgs) -> Result<(), CliError> {
    let manifest = RunManifest::load(Path::new(&args.manifest)).map_err(|e| match e {
        encbridge::manifest::ManifestError::Io { .. } => CliError::usage(e.to_string()),
        other => other.into(),
    })?;
    match manifest.command.as_str() {
        "train" => {
            let mut p: TrainParams = manifest.params_as()?;
            p.name = args.name.unwrap_or(format!("{}-rerun", p.name));
            cmd_train(root, argv, p)
        }
        "finetune" => {
            let mut p: FinetuneParams = manifest.params_as()?;
            p.name = args.name.unwrap_or(format!("{}-rerun", p.name));
            cmd_finetune(root, argv, p)
        }
        "experiment" => {
            let mut p: ExperimentParams = manifest.params_as()?;
            p.name = args.name.unwrap_or(format!("{}-rerun", p.name));
            cmd_experiment(root, argv, p)
        }
        "eval" => {
            let mut p: EvalParams = manifest.params_as()?;
            p.name = args.name.unwrap_or(format!("{}-rerun", p.name));
            cmd_eval(root, argv, p)
        }
        "analyze" => {
            let mut p: AnalyzeParams = manifest.params_as()?;
            p.name = args.name.unwrap_or(format!("{}-rerun", p.name));
            cmd_analyze(root, argv, p)
        }
        "gradcheck" => {
            let mut p: GradcheckParams = manifest.params_as()?;
            p.name = args.name.unwrap_or(format!("{}-rerun", p.name));
            cmd_gradcheck(root, argv, p)
        }
        other => Err(CliError::usage(format!(
            "manifest has unknown command `{other}`"
        ))),
    }
}
