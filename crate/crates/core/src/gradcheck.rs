//! Full-model gradient checking: autograd vs central finite differences over
//! every parameter element of a tiny bridged model, in 64-bit.

use crate::bridge::{BridgeWeights, InitScheme};
use crate::data::{gen_synthetic, make_eval_batches, ParallelBatch, Task, Vocab};
use crate::model::{BodyInit, ModelConfig, ModelError, ModelRun, ParamStore, Trainability};

/// Central-difference step. With 64-bit scalars this balances truncation
/// against roundoff at roughly 1e-10 absolute error.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over all parameter elements, where the error for
    /// one element is `|autograd - fd| / max(|autograd|, |fd|, 1)`.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Total parameter elements compared.
    pub checked: usize,
    pub threshold: f64,
    pub pass: bool,
}

/// The default gradient-check architecture: d_model 8, two heads, two layers
/// per stack, bridge enabled. Small enough that exhaustive finite differences
/// over every parameter finish in seconds.
pub fn tiny_config() -> ModelConfig {
    let mut config = ModelConfig::desk(0);
    config.d_model = 8;
    config.n_heads = 2;
    config.d_ff = 16;
    config.n_enc_layers = 2;
    config.n_dec_layers = 2;
    config.max_seq_len = 16;
    config.bridge_enabled = true;
    config
}

/// Compare autograd against exhaustive central finite differences for every
/// parameter of a bridged model built from `config` (its `vocab_size` is
/// replaced to match the generated probe batch). `pass` is strict:
/// `max_rel_err < threshold`, so a zero threshold always fails.
pub fn gradcheck(
    config: &ModelConfig,
    seed: u64,
    threshold: f64,
) -> Result<GradCheckReport, ModelError> {
    let pairs = gen_synthetic(Task::Copy, 4, seed, 2..=3);
    let vocab = Vocab::from_corpus(&pairs);
    let mut config = config.clone();
    config.vocab_size = vocab.size();
    let batch = make_eval_batches(&pairs, &vocab, 4).remove(0);

    let mut body_config = config.clone();
    body_config.bridge_enabled = false;
    let mut store = ParamStore::<f32>::init(&body_config, seed, BodyInit::Xavier);
    if config.bridge_enabled {
        store.attach_bridge(&BridgeWeights::from_scheme(
            InitScheme::RandomXavier,
            config.n_enc_layers,
            config.n_dec_layers,
            config.d_model,
            seed.wrapping_add(1),
        ));
    }
    let mut store = store.cast::<f64>();

    // analytic gradients
    let mut run = ModelRun::<f64>::new(&config, &store, Trainability::All)?;
    let loss = run.training_loss(&batch)?;
    run.graph.backward(loss)?;
    let grads = run.graph.param_grads();

    let names: Vec<String> = store.names().cloned().collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        threshold,
        pass: false,
    };
    for name in &names {
        let numel = store.get(name).expect("listed name exists").numel();
        let grad = &grads[name];
        for i in 0..numel {
            let original = store.get(name).unwrap().data()[i];
            store.get_mut(name).unwrap().data_mut()[i] = original + FD_STEP;
            let plus = loss_of(&config, &store, &batch)?;
            store.get_mut(name).unwrap().data_mut()[i] = original - FD_STEP;
            let minus = loss_of(&config, &store, &batch)?;
            store.get_mut(name).unwrap().data_mut()[i] = original;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    report.pass = report.max_rel_err < threshold;
    Ok(report)
}

fn loss_of(
    config: &ModelConfig,
    store: &ParamStore<f64>,
    batch: &ParallelBatch,
) -> Result<f64, ModelError> {
    let mut run = ModelRun::<f64>::new(config, store, Trainability::Frozen)?;
    let loss = run.training_loss(batch)?;
    Ok(run.graph.data(loss)[0])
}
