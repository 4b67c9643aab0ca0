//! Run configuration: `key = value` text, environment overrides and flags,
//! resolved into typed configs and echoed verbatim into each run directory.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::{BackboneConfig, ConvStage, PoolSpec, TapLayer};
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::trainer::{PretrainConfig, Sampler, TrainConfig};

/// Prefix of environment overrides: `train.eta0` is read from `CANREID_TRAIN_ETA0`.
pub const ENV_PREFIX: &str = "CANREID_";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub channels: Vec<usize>,
    pub tap: TapLayer,
    pub head_hidden: usize,
    pub q: usize,
    pub glimpses: usize,
    pub steps: Vec<usize>,
    pub ablation: Ablation,
    pub fc_hidden: usize,
    pub pretrain: PretrainConfig,
    pub skip_pretrain: bool,
    pub train: TrainConfig,
    pub eval_repeats: usize,
}

/// Reference optimiser settings with an iteration budget sized for one CPU core.
fn desk_pretrain() -> PretrainConfig {
    let mut p = PretrainConfig::default();
    p.optim.max_iters = 600;
    p
}

/// Reference settings except a 10x larger initial rate, a shorter budget and
/// eight identities per batch.
fn desk_train() -> TrainConfig {
    let mut t = TrainConfig::default();
    t.optim.eta0 = 0.01;
    t.optim.max_iters = 1500;
    t.sampler = Sampler::Balanced { identities_per_batch: 8 };
    t
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            channels: model.backbone.stages.iter().map(|s| s.out_channels).collect(),
            tap: model.backbone.tap,
            head_hidden: model.backbone.head_hidden,
            q: model.q,
            glimpses: model.glimpses,
            steps: model.steps,
            ablation: model.ablation,
            fc_hidden: model.fc_hidden,
            pretrain: desk_pretrain(),
            skip_pretrain: false,
            train: desk_train(),
            eval_repeats: 10,
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "dataset.num_identities",
    "dataset.val_identities",
    "dataset.test_identities",
    "dataset.images_per_identity_per_camera",
    "dataset.image_height",
    "dataset.image_width",
    "dataset.seed",
    "dataset.color_shift",
    "dataset.illumination_gain",
    "dataset.occlusion_prob",
    "dataset.pose_offset",
    "dataset.noise",
    "dataset.clutter",
    "backbone.channels",
    "backbone.tap",
    "backbone.head_hidden",
    "model.q",
    "model.glimpses",
    "model.steps",
    "model.ablation",
    "model.fc_hidden",
    "pretrain.skip",
    "pretrain.iters",
    "pretrain.batch_size",
    "pretrain.augment",
    "pretrain.eta0",
    "pretrain.gamma",
    "pretrain.power",
    "pretrain.momentum",
    "pretrain.weight_decay",
    "train.iters",
    "train.batch_size",
    "train.identities_per_batch",
    "train.sampler",
    "train.shuffle_rounds",
    "train.margin",
    "train.eval_every",
    "train.freeze_backbone",
    "train.augment",
    "train.mining_retries",
    "train.stop_after",
    "train.eta0",
    "train.gamma",
    "train.power",
    "train.momentum",
    "train.weight_decay",
    "eval.repeats",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{value}' for {key}"))),
    }
}

pub fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

impl RunConfig {
    /// Desk configuration with the heavier distortion preset.
    pub fn hardened() -> Self {
        RunConfig {
            dataset: DatasetConfig::hardened(),
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.dataset;
        let p = &mut self.pretrain;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dataset.num_identities" => d.num_identities = parse(key, v)?,
            "dataset.val_identities" => d.val_identities = parse(key, v)?,
            "dataset.test_identities" => d.test_identities = parse(key, v)?,
            "dataset.images_per_identity_per_camera" => d.images_per_identity_per_camera = parse(key, v)?,
            "dataset.image_height" => d.image_height = parse(key, v)?,
            "dataset.image_width" => d.image_width = parse(key, v)?,
            "dataset.seed" => d.seed = parse(key, v)?,
            "dataset.color_shift" => d.distortion.color_shift = parse(key, v)?,
            "dataset.illumination_gain" => d.distortion.illumination_gain = parse(key, v)?,
            "dataset.occlusion_prob" => d.distortion.occlusion_prob = parse(key, v)?,
            "dataset.pose_offset" => d.distortion.pose_offset = parse(key, v)?,
            "dataset.noise" => d.distortion.noise = parse(key, v)?,
            "dataset.clutter" => d.distortion.clutter = parse(key, v)?,
            "backbone.channels" => self.channels = parse_list(key, v)?,
            "backbone.tap" => {
                self.tap = match v {
                    "post_conv" => TapLayer::PostConv,
                    "post_pool" => TapLayer::PostPool,
                    _ => return Err(Error::Config(format!("bad tap '{v}' (post_conv or post_pool)"))),
                }
            }
            "backbone.head_hidden" => self.head_hidden = parse(key, v)?,
            "model.q" => self.q = parse(key, v)?,
            "model.glimpses" => self.glimpses = parse(key, v)?,
            "model.steps" => self.steps = parse_list(key, v)?,
            "model.ablation" => self.ablation = v.parse()?,
            "model.fc_hidden" => self.fc_hidden = parse(key, v)?,
            "pretrain.skip" => self.skip_pretrain = parse_bool(key, v)?,
            "pretrain.iters" => p.optim.max_iters = parse(key, v)?,
            "pretrain.batch_size" => p.batch_size = parse(key, v)?,
            "pretrain.augment" => p.augment = parse_bool(key, v)?,
            "pretrain.eta0" => p.optim.eta0 = parse(key, v)?,
            "pretrain.gamma" => p.optim.gamma = parse(key, v)?,
            "pretrain.power" => p.optim.power = parse(key, v)?,
            "pretrain.momentum" => p.optim.momentum = parse(key, v)?,
            "pretrain.weight_decay" => p.optim.weight_decay = parse(key, v)?,
            "train.iters" => t.optim.max_iters = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            // "none" is what the echo writes for the inactive sampler
            "train.identities_per_batch" | "train.shuffle_rounds" if v == "none" => {}
            "train.identities_per_batch" => {
                let n = parse(key, v)?;
                if let Sampler::Balanced { identities_per_batch } = &mut t.sampler {
                    *identities_per_batch = n;
                } else {
                    return Err(Error::Config(
                        "train.identities_per_batch needs train.sampler = balanced".into(),
                    ));
                }
            }
            "train.sampler" => {
                t.sampler = match (v, t.sampler) {
                    ("balanced", Sampler::Balanced { .. }) => t.sampler,
                    ("balanced", _) => Sampler::Balanced { identities_per_batch: 4 },
                    ("label_shuffle", Sampler::LabelShuffle { .. }) => t.sampler,
                    ("label_shuffle", _) => Sampler::LabelShuffle { rounds: 10 },
                    _ => return Err(Error::Config(format!("bad sampler '{v}' (balanced or label_shuffle)"))),
                }
            }
            "train.shuffle_rounds" => {
                let rounds = parse(key, v)?;
                if let Sampler::LabelShuffle { rounds: r } = &mut t.sampler {
                    *r = rounds;
                } else {
                    return Err(Error::Config("train.shuffle_rounds needs train.sampler = label_shuffle first".into()));
                }
            }
            "train.margin" => t.alpha = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.freeze_backbone" => t.freeze_backbone = parse_bool(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            "train.mining_retries" => t.mining_retries = parse(key, v)?,
            "train.stop_after" => {
                t.stop_after = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "train.eta0" => t.optim.eta0 = parse(key, v)?,
            "train.gamma" => t.optim.gamma = parse(key, v)?,
            "train.power" => t.optim.power = parse(key, v)?,
            "train.momentum" => t.optim.momentum = parse(key, v)?,
            "train.weight_decay" => t.optim.weight_decay = parse(key, v)?,
            "eval.repeats" => self.eval_repeats = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.dataset;
        let p = &self.pretrain;
        let t = &self.train;
        Some(match key {
            "seed" => self.seed.to_string(),
            "dataset.num_identities" => d.num_identities.to_string(),
            "dataset.val_identities" => d.val_identities.to_string(),
            "dataset.test_identities" => d.test_identities.to_string(),
            "dataset.images_per_identity_per_camera" => d.images_per_identity_per_camera.to_string(),
            "dataset.image_height" => d.image_height.to_string(),
            "dataset.image_width" => d.image_width.to_string(),
            "dataset.seed" => d.seed.to_string(),
            "dataset.color_shift" => d.distortion.color_shift.to_string(),
            "dataset.illumination_gain" => d.distortion.illumination_gain.to_string(),
            "dataset.occlusion_prob" => d.distortion.occlusion_prob.to_string(),
            "dataset.pose_offset" => d.distortion.pose_offset.to_string(),
            "dataset.noise" => d.distortion.noise.to_string(),
            "dataset.clutter" => d.distortion.clutter.to_string(),
            "backbone.channels" => join(&self.channels),
            "backbone.tap" => match self.tap {
                TapLayer::PostConv => "post_conv".into(),
                TapLayer::PostPool => "post_pool".into(),
            },
            "backbone.head_hidden" => self.head_hidden.to_string(),
            "model.q" => self.q.to_string(),
            "model.glimpses" => self.glimpses.to_string(),
            "model.steps" => join(&self.steps),
            "model.ablation" => self.ablation.to_string(),
            "model.fc_hidden" => self.fc_hidden.to_string(),
            "pretrain.skip" => self.skip_pretrain.to_string(),
            "pretrain.iters" => p.optim.max_iters.to_string(),
            "pretrain.batch_size" => p.batch_size.to_string(),
            "pretrain.augment" => p.augment.to_string(),
            "pretrain.eta0" => p.optim.eta0.to_string(),
            "pretrain.gamma" => p.optim.gamma.to_string(),
            "pretrain.power" => p.optim.power.to_string(),
            "pretrain.momentum" => p.optim.momentum.to_string(),
            "pretrain.weight_decay" => p.optim.weight_decay.to_string(),
            "train.iters" => t.optim.max_iters.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.identities_per_batch" => match t.sampler {
                Sampler::Balanced { identities_per_batch } => identities_per_batch.to_string(),
                Sampler::LabelShuffle { .. } => "none".into(),
            },
            "train.sampler" => match t.sampler {
                Sampler::Balanced { .. } => "balanced".into(),
                Sampler::LabelShuffle { .. } => "label_shuffle".into(),
            },
            "train.shuffle_rounds" => match t.sampler {
                Sampler::LabelShuffle { rounds } => rounds.to_string(),
                Sampler::Balanced { .. } => "none".into(),
            },
            "train.margin" => t.alpha.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.freeze_backbone" => t.freeze_backbone.to_string(),
            "train.augment" => t.augment.to_string(),
            "train.mining_retries" => t.mining_retries.to_string(),
            "train.stop_after" => t.stop_after.map_or("none".into(), |s| s.to_string()),
            "train.eta0" => t.optim.eta0.to_string(),
            "train.gamma" => t.optim.gamma.to_string(),
            "train.power" => t.optim.power.to_string(),
            "train.momentum" => t.optim.momentum.to_string(),
            "train.weight_decay" => t.optim.weight_decay.to_string(),
            "eval.repeats" => self.eval_repeats.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.apply_text(&text)
    }

    /// Applies every `CANREID_*` variable that names a known key, through `lookup`.
    pub fn apply_env_with(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for key in KEYS {
            if let Some(v) = lookup(&env_name(key)) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_env_with(|name| std::env::var(name).ok())
    }

    /// Canonical `key = value` text listing every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut backbone = BackboneConfig {
            input_height: self.dataset.image_height,
            input_width: self.dataset.image_width,
            input_channels: 3,
            stages: self
                .channels
                .iter()
                .map(|&c| ConvStage {
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    pool: Some(PoolSpec { window: 2, stride: 2 }),
                })
                .collect(),
            tap: self.tap,
            k: 0,
            d: 0,
            head_hidden: self.head_hidden,
        };
        let (h, w, d) = backbone.tap_shape()?;
        if h != w {
            return Err(Error::Config(format!("feature cube must be square, got {h}x{w}")));
        }
        backbone.k = h;
        backbone.d = d;
        let config = ModelConfig {
            backbone,
            q: self.q,
            glimpses: self.glimpses,
            steps: self.steps.clone(),
            ablation: self.ablation,
            fc_hidden: self.fc_hidden,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let mut p = self.pretrain;
        p.optim.seed = self.seed;
        p
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train;
        t.optim.seed = self.seed;
        t
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model_config()?;
        self.pretrain.optim.validate()?;
        self.train.optim.validate()?;
        if self.eval_repeats == 0 {
            return Err(Error::Config("eval.repeats must be positive".into()));
        }
        Ok(())
    }
}
