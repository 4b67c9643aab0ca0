//! Softmax pretraining of the backbone, then end-to-end multi-task training
//! with SGD, momentum, weight decay and the inverse learning-rate policy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::data::{augment_once, build_minibatch, label_shuffled_order, Dataset};
use crate::error::{Error, Result};
use crate::eval::evaluate_split;
use crate::exec::Execution;
use crate::image::ImageSample;
use crate::losses::{mine_triplets, LossReport};
use crate::model::{classifier_batch_gradient, CanModel, ModelConfig};
use crate::param::Parameters;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub eta0: f64,
    pub gamma: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl OptimConfig {
    pub fn pretrain() -> Self {
        OptimConfig {
            eta0: 0.01,
            gamma: 1e-4,
            power: 0.75,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_iters: 2000,
            seed: 0,
        }
    }

    pub fn end_to_end() -> Self {
        OptimConfig {
            eta0: 0.001,
            max_iters: 5000,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0) {
            return Err(Error::Config(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.gamma >= 0.0 && self.power >= 0.0) {
            return Err(Error::Config("gamma and power must be >= 0".into()));
        }
        Ok(())
    }
}

/// Inverse policy `eta0 * (1 + gamma k)^-p`.
pub fn lr_at(k: usize, config: &OptimConfig) -> f64 {
    config.eta0 * (1.0 + config.gamma * k as f64).powf(-config.power)
}

/// Iteration counter and per-parameter momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub iteration: usize,
    pub velocity: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &impl Parameters) -> Self {
        OptimState {
            iteration: 0,
            velocity: params.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect(),
        }
    }
}

/// One update at the current iteration's learning rate:
/// `v <- mu v - eta (g + lambda theta)`, `theta <- theta + v`, with the decay
/// term only on weights. Entries whose `trainable` flag is false are left
/// untouched, momentum included.
pub fn sgd_step(
    params: &mut impl Parameters,
    state: &mut OptimState,
    grads: &[Tensor],
    trainable: &[bool],
    config: &OptimConfig,
) -> Result<()> {
    let meta: Vec<(String, bool, Vec<usize>)> = params
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.decay, p.tensor.shape().to_vec()))
        .collect();
    if grads.len() != meta.len() || trainable.len() != meta.len() || state.velocity.len() != meta.len() {
        return Err(Error::Dimension(format!(
            "{} gradients / {} flags / {} buffers for {} parameters",
            grads.len(),
            trainable.len(),
            state.velocity.len(),
            meta.len()
        )));
    }
    for ((name, _, shape), g) in meta.iter().zip(grads) {
        if g.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!("gradient for {name} has the wrong shape")));
        }
        if !g.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient in {name}")));
        }
    }
    let lr = lr_at(state.iteration, config);
    let (mu, lambda) = (config.momentum, config.weight_decay);
    for (i, theta) in params.params_mut().into_iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        let decay = meta[i].1;
        let v = state.velocity[i].data_mut();
        for ((t, vi), &g) in theta.data_mut().iter_mut().zip(v).zip(grads[i].data()) {
            let g = if decay { g + lambda * *t } else { g };
            *vi = mu * *vi - lr * g;
            *t += *vi;
        }
    }
    state.iteration += 1;
    Ok(())
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Streams of the run seed used for each random consumer.
pub mod streams {
    pub const BACKBONE_INIT: u64 = 0;
    pub const HEAD_INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const END_TO_END: u64 = 3;
    pub const CLASSIFIER_INIT: u64 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            optim: OptimConfig::pretrain(),
            batch_size: 16,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    /// Backbone with the classification head removed.
    pub backbone: BackboneParams,
    pub log: Vec<PretrainRow>,
}

/// Trains backbone + classification head with cross-entropy on the train
/// split and returns the backbone alone.
pub fn pretrain_backbone(
    dataset: &Dataset,
    backbone_config: &BackboneConfig,
    config: &PretrainConfig,
    exec: Execution,
) -> Result<PretrainOutcome> {
    config.optim.validate()?;
    let train = &dataset.train;
    if train.is_empty() {
        return Err(Error::Usage("pretraining needs a non-empty train split".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let seed = config.optim.seed;
    let mut params = BackboneParams::new(backbone_config, &mut derived_rng(seed, streams::BACKBONE_INIT))?;
    params.attach_classifier(
        backbone_config,
        dataset.train_identity_count(),
        &mut derived_rng(seed, streams::CLASSIFIER_INIT),
    );
    let mut state = OptimState::new(&params);
    let trainable = vec![true; params.params().len()];
    let mut rng = derived_rng(seed, streams::PRETRAIN);
    let mut log = Vec::with_capacity(config.optim.max_iters);
    let n = config.batch_size.min(train.len());
    for _ in 0..config.optim.max_iters {
        let picks: Vec<&ImageSample> = train.choose_multiple(&mut rng, n).collect();
        let batch = picks
            .into_iter()
            .map(|s| if config.augment { augment_once(s, &mut rng) } else { Ok(s.clone()) })
            .collect::<Result<Vec<_>>>()?;
        let g = classifier_batch_gradient(backbone_config, &params, &batch, exec)?;
        if !g.loss.is_finite() {
            return Err(Error::Numerical(format!(
                "pretraining loss diverged at iteration {}",
                state.iteration
            )));
        }
        let lr = lr_at(state.iteration, &config.optim);
        log.push(PretrainRow {
            iter: state.iteration,
            lr,
            loss: g.loss,
            accuracy: g.correct as f64 / batch.len() as f64,
        });
        sgd_step(&mut params, &mut state, &g.grads, &trainable, &config.optim)?;
    }
    params.detach_classifier();
    Ok(PretrainOutcome { backbone: params, log })
}

/// Batch composition strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampler {
    /// `identities_per_batch` identities times `batch_size / identities_per_batch` samples.
    Balanced { identities_per_batch: usize },
    /// Consecutive chunks of a label-grouped order rebuilt every `rounds` passes.
    LabelShuffle { rounds: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub sampler: Sampler,
    /// Triplet margin.
    pub alpha: f64,
    /// Validation interval `E` in iterations.
    pub eval_every: usize,
    pub freeze_backbone: bool,
    pub augment: bool,
    /// Batches rebuilt after a mining failure before giving up.
    pub mining_retries: usize,
    /// Stops (checkpointing) once this many iterations are done.
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: OptimConfig::end_to_end(),
            batch_size: 16,
            sampler: Sampler::Balanced {
                identities_per_batch: 4,
            },
            alpha: 0.3,
            eval_every: 100,
            freeze_backbone: false,
            augment: true,
            mining_retries: 20,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    pub fn regime(&self) -> &'static str {
        if self.freeze_backbone {
            "non-end-to-end"
        } else {
            "end-to-end"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub trip: f64,
    pub iden: f64,
    pub multi: f64,
    pub active_triplets: usize,
    pub val_rank1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn named_arrays(params: &impl Parameters) -> Vec<NamedArray> {
    params
        .params()
        .into_iter()
        .map(|p| NamedArray {
            name: p.name,
            shape: p.tensor.shape().to_vec(),
            data: p.tensor.data().to_vec(),
        })
        .collect()
}

/// Copies arrays into `params`, matching by position and checking name and shape.
pub fn load_named_arrays(params: &mut impl Parameters, arrays: &[NamedArray]) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = params
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
        .collect();
    if names.len() != arrays.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} arrays, model expects {}",
            arrays.len(),
            names.len()
        )));
    }
    for ((name, shape), a) in names.iter().zip(arrays) {
        if &a.name != name || &a.shape != shape || a.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Config(format!(
                "checkpoint array {} {:?} does not match model array {name} {:?}",
                a.name, a.shape, shape
            )));
        }
    }
    for (t, a) in params.params_mut().into_iter().zip(arrays) {
        t.data_mut().copy_from_slice(&a.data);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad rng word position '{}'", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub iteration: usize,
    pub val_rank1: f64,
    pub multi: f64,
    pub params: Vec<NamedArray>,
}

/// Label-shuffle position carried across checkpoints.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ShuffleCursor {
    pub order: Vec<usize>,
    pub next: usize,
}

pub const CHECKPOINT_FORMAT: &str = "can-reid-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Resolved configuration text of the run.
    pub config_echo: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub identities: usize,
    pub regime: String,
    pub iteration: usize,
    pub params: Vec<NamedArray>,
    pub velocity: Vec<NamedArray>,
    pub rng: RngState,
    pub shuffle: ShuffleCursor,
    pub best: Option<BestSnapshot>,
    pub history: Vec<LogRow>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Model holding the checkpoint's current parameters.
    pub fn model(&self) -> Result<CanModel> {
        self.model_from(&self.params)
    }

    /// Model holding the best-validation parameters, or the current ones
    /// when no validation ran.
    pub fn best_model(&self) -> Result<CanModel> {
        match &self.best {
            Some(b) => self.model_from(&b.params),
            None => self.model(),
        }
    }

    fn model_from(&self, arrays: &[NamedArray]) -> Result<CanModel> {
        let mut model = CanModel::new(self.model_config.clone(), self.identities, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_named_arrays(&mut model, arrays)?;
        Ok(model)
    }
}

/// Result of an end-to-end run (or of its first `stop_after` iterations).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation model; the final model when validation never ran.
    pub best: CanModel,
    pub checkpoint: Checkpoint,
    pub finished: bool,
}

struct Batcher<'a> {
    samples: &'a [ImageSample],
    config: TrainConfig,
    cursor: ShuffleCursor,
}

impl Batcher<'_> {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<ImageSample>> {
        match self.config.sampler {
            Sampler::Balanced { identities_per_batch } => build_minibatch(
                self.samples,
                self.config.batch_size,
                identities_per_batch,
                self.config.augment,
                rng,
            ),
            Sampler::LabelShuffle { rounds } => {
                if self.cursor.next + self.config.batch_size > self.cursor.order.len() {
                    self.cursor.order = label_shuffled_order(self.samples, rounds.max(1), rng);
                    self.cursor.next = 0;
                    if self.config.batch_size > self.cursor.order.len() {
                        return Err(Error::Usage("batch larger than the shuffled dataset".into()));
                    }
                }
                let idx = &self.cursor.order[self.cursor.next..self.cursor.next + self.config.batch_size];
                self.cursor.next += self.config.batch_size;
                idx.iter()
                    .map(|&i| {
                        let s = &self.samples[i];
                        if self.config.augment { augment_once(s, rng) } else { Ok(s.clone()) }
                    })
                    .collect()
            }
        }
    }
}

/// Validation seed; fixed so every evaluation point sees the same gallery draws.
const VAL_SEED: u64 = 0x5eed;

/// Multi-task training of the full model. Starts from `model` or resumes
/// from `resume`; writes `checkpoint_path` when stopping or finishing.
pub fn train_end_to_end(
    model: CanModel,
    dataset: &Dataset,
    config: &TrainConfig,
    config_echo: &str,
    resume: Option<Checkpoint>,
    checkpoint_path: Option<&Path>,
    exec: Execution,
) -> Result<TrainOutcome> {
    config.optim.validate()?;
    if !(config.alpha > 0.0) {
        return Err(Error::Config(format!("margin must be positive, got {}", config.alpha)));
    }
    if config.eval_every == 0 {
        return Err(Error::Config("evaluation interval must be positive".into()));
    }
    let identities = model.identity.identities();
    let mut model = model;
    let mut state = OptimState::new(&model);
    let mut rng = derived_rng(config.optim.seed, streams::END_TO_END);
    let mut history = Vec::new();
    let mut best: Option<BestSnapshot> = None;
    let mut cursor = ShuffleCursor::default();
    if let Some(ckpt) = resume {
        load_named_arrays(&mut model, &ckpt.params)?;
        state.iteration = ckpt.iteration;
        for (v, a) in state.velocity.iter_mut().zip(&ckpt.velocity) {
            if v.len() != a.data.len() {
                return Err(Error::Config(format!("momentum buffer {} does not match", a.name)));
            }
            v.data_mut().copy_from_slice(&a.data);
        }
        rng = ckpt.rng.restore()?;
        history = ckpt.history;
        best = ckpt.best;
        cursor = ckpt.shuffle;
    }
    let nb = model.backbone_param_count();
    let trainable: Vec<bool> = (0..model.params().len())
        .map(|i| !(config.freeze_backbone && i < nb))
        .collect();
    let mut batcher = Batcher {
        samples: &dataset.train,
        config: *config,
        cursor,
    };

    let make_checkpoint = |model: &CanModel, state: &OptimState, rng: &ChaCha8Rng, cursor: &ShuffleCursor, best: &Option<BestSnapshot>, history: &Vec<LogRow>| Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config_echo: config_echo.into(),
        model_config: model.config.clone(),
        train_config: *config,
        identities,
        regime: config.regime().into(),
        iteration: state.iteration,
        params: named_arrays(model),
        velocity: model
            .params()
            .iter()
            .zip(&state.velocity)
            .map(|(p, v)| NamedArray {
                name: p.name.clone(),
                shape: v.shape().to_vec(),
                data: v.data().to_vec(),
            })
            .collect(),
        rng: RngState::capture(rng),
        shuffle: cursor.clone(),
        best: best.clone(),
        history: history.clone(),
    };
    let save = |ckpt: &Checkpoint| -> Result<()> {
        match checkpoint_path {
            Some(p) => ckpt.save(p),
            None => Ok(()),
        }
    };

    while state.iteration < config.optim.max_iters {
        if config.stop_after.is_some_and(|s| state.iteration >= s) {
            let ckpt = make_checkpoint(&model, &state, &rng, &batcher.cursor, &best, &history);
            save(&ckpt)?;
            let best_model = ckpt.best_model()?;
            return Ok(TrainOutcome {
                best: best_model,
                checkpoint: ckpt,
                finished: false,
            });
        }
        let mut attempt = 0;
        let (batch, triples) = loop {
            let batch = batcher.next(&mut rng)?;
            let labels: Vec<usize> = batch.iter().map(|s| s.identity).collect();
            match mine_triplets(&labels, &mut rng) {
                Ok(t) => break (batch, t),
                Err(Error::Mining(_)) if attempt < config.mining_retries => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        let g = model.batch_gradient(&batch, &triples, config.alpha, config.freeze_backbone, exec)?;
        if !g.report.multi.is_finite() {
            save(&make_checkpoint(&model, &state, &rng, &batcher.cursor, &best, &history))?;
            return Err(Error::Numerical(format!(
                "multi-task loss diverged at iteration {}",
                state.iteration
            )));
        }
        let lr = lr_at(state.iteration, &config.optim);
        sgd_step(&mut model, &mut state, &g.grads, &trainable, &config.optim)?;
        let k = state.iteration;
        let val_rank1 = if k % config.eval_every == 0 || k == config.optim.max_iters {
            let r = validation_rank1(&model, dataset, exec)?;
            consider_best(&mut best, &model, k, r, g.report);
            Some(r)
        } else {
            None
        };
        history.push(LogRow {
            iter: k,
            lr,
            trip: g.report.trip,
            iden: g.report.iden,
            multi: g.report.multi,
            active_triplets: g.report.active_triplets,
            val_rank1,
        });
    }
    let ckpt = make_checkpoint(&model, &state, &rng, &batcher.cursor, &best, &history);
    save(&ckpt)?;
    let best_model = ckpt.best_model()?;
    Ok(TrainOutcome {
        best: best_model,
        checkpoint: ckpt,
        finished: true,
    })
}

fn validation_rank1(model: &CanModel, dataset: &Dataset, exec: Execution) -> Result<f64> {
    if dataset.val.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate_split(model, &dataset.val, VAL_SEED, exec)?.rank1)
}

/// Higher rank-1 wins; ties go to the lower multi-task loss.
fn consider_best(best: &mut Option<BestSnapshot>, model: &CanModel, k: usize, rank1: f64, report: LossReport) {
    let better = match best {
        None => true,
        Some(b) => rank1 > b.val_rank1 || (rank1 == b.val_rank1 && report.multi < b.multi),
    };
    if better {
        *best = Some(BestSnapshot {
            iteration: k,
            val_rank1: rank1,
            multi: report.multi,
            params: named_arrays(model),
        });
    }
}

/// Fresh model over a pretrained backbone, with head init drawn from the run seed.
pub fn assemble_model(
    config: ModelConfig,
    backbone: BackboneParams,
    identities: usize,
    seed: u64,
) -> Result<CanModel> {
    CanModel::with_backbone(config, backbone, identities, &mut derived_rng(seed, streams::HEAD_INIT))
}

/// Fresh model with a random backbone (cold start).
pub fn cold_model(config: ModelConfig, identities: usize, seed: u64) -> Result<CanModel> {
    let backbone = BackboneParams::new(&config.backbone, &mut derived_rng(seed, streams::BACKBONE_INIT))?;
    assemble_model(config, backbone, identities, seed)
}

pub fn write_train_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn write_pretrain_log(path: &Path, rows: &[PretrainRow]) -> Result<()> {
    write_csv(path, rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}
