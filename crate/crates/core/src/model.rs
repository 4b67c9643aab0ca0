//! The full network: backbone, recurrent attention head (or an ablation
//! head), and the softmax identity head used by the identification loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    check_steps, cube_matrix, embed_on, run_glimpses_on, trace_values, AttentionConfig, AttentionParams,
    AttentionVars, Embedding, GlimpseTrace, Pooling, TraceVars,
};
use crate::autograd::{Tape, Var};
use crate::backbone::{forward_cube, forward_logits, BackboneConfig, BackboneParams, BackboneVars};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::image::ImageSample;
use crate::losses::{batch_objective_on, LossReport, SoftmaxHead, TripletBatch};
use crate::param::{bias, glorot_uniform, weight, ParamRef, Parameters};
use crate::tensor::Tensor;

/// Which head sits on top of the feature cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Ablation {
    /// Recurrent comparative attention.
    #[default]
    None,
    /// LSTM fed the uniform average of the cube at every step.
    AvgPool,
    /// LSTM fed the channelwise max of the cube at every step.
    MaxPool,
    /// Two fully-connected layers on the flattened cube.
    FcHead,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::AvgPool => "avg_pool",
            Ablation::MaxPool => "max_pool",
            Ablation::FcHead => "fc_head",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "avg_pool" => Ok(Ablation::AvgPool),
            "max_pool" => Ok(Ablation::MaxPool),
            "fc_head" => Ok(Ablation::FcHead),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}' (expected none, avg_pool, max_pool or fc_head)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// LSTM state width.
    pub q: usize,
    /// Number of glimpses `T`.
    pub glimpses: usize,
    /// 1-based glimpse indices whose hidden states form the embedding.
    pub steps: Vec<usize>,
    pub ablation: Ablation,
    /// Hidden width of the fully-connected ablation head.
    pub fc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            q: 64,
            glimpses: 8,
            steps: vec![2, 4, 8],
            ablation: Ablation::None,
            fc_hidden: 128,
        }
    }
}

impl ModelConfig {
    /// Micro backbone with `q = 3`, three glimpses and steps `{2, 3}`.
    pub fn micro() -> Self {
        ModelConfig {
            backbone: BackboneConfig::micro(),
            q: 3,
            glimpses: 3,
            steps: vec![2, 3],
            ablation: Ablation::None,
            fc_hidden: 5,
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            q: self.q,
            k: self.backbone.k,
            d: self.backbone.d,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.q * self.steps.len()
    }

    pub fn pooling(&self) -> Pooling {
        match self.ablation {
            Ablation::AvgPool => Pooling::Average,
            Ablation::MaxPool => Pooling::Max,
            Ablation::None | Ablation::FcHead => Pooling::Attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.q == 0 || self.fc_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        check_steps(&self.steps, self.glimpses).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `flatten(X) -> relu(W1 x + b1) -> W2 y + b2`, normalised like the recurrent embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FcHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FcHead {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        FcHead {
            w1: glorot_uniform(&[hidden, input], input, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: glorot_uniform(&[output, hidden], hidden, output, rng),
            b2: Tensor::zeros(&[output]),
        }
    }
}

impl Parameters for FcHead {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            weight("fc_head.fc0.weight".into(), &self.w1),
            bias("fc_head.fc0.bias".into(), &self.b1),
            weight("fc_head.fc1.weight".into(), &self.w2),
            bias("fc_head.fc1.bias".into(), &self.b2),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    /// Attention, or an LSTM over average / max pooled input.
    Recurrent(AttentionParams),
    Fc(FcHead),
}

impl Head {
    fn params(&self) -> Vec<ParamRef<'_>> {
        match self {
            Head::Recurrent(p) => p.params(),
            Head::Fc(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::Recurrent(p) => p.params_mut(),
            Head::Fc(p) => p.params_mut(),
        }
    }
}

enum HeadVars {
    Recurrent(AttentionVars),
    Fc([Var; 4]),
}

struct ModelVars {
    backbone: BackboneVars,
    head: HeadVars,
}

impl ModelVars {
    fn all(&self) -> Vec<Var> {
        let mut out = self.backbone.all();
        match &self.head {
            HeadVars::Recurrent(a) => out.extend(a.all()),
            HeadVars::Fc(v) => out.extend(v),
        }
        out
    }
}

/// Per-sample graph kept alive between the forward and backward sweeps.
struct SampleGraph {
    tape: Tape,
    vars: Vec<Var>,
    embedding: Var,
}

/// Loss report plus gradients in [`Parameters::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub report: LossReport,
    pub grads: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanModel {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub head: Head,
    pub identity: SoftmaxHead,
}

impl CanModel {
    /// Fresh model with a randomly initialised backbone.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, identities: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneParams::new(&config.backbone, rng)?;
        Self::with_backbone(config, backbone, identities, rng)
    }

    /// Model over an existing (e.g. pretrained) backbone. Any classification
    /// head still attached to it is discarded.
    pub fn with_backbone<R: Rng + ?Sized>(
        config: ModelConfig,
        mut backbone: BackboneParams,
        identities: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if identities == 0 {
            return Err(Error::Config("the identity head needs at least one identity".into()));
        }
        backbone.detach_classifier();
        let head = match config.ablation {
            Ablation::FcHead => {
                let b = &config.backbone;
                Head::Fc(FcHead::new(b.k * b.k * b.d, config.fc_hidden, config.embedding_dim(), rng))
            }
            _ => Head::Recurrent(AttentionParams::new(config.attention_config(), rng)),
        };
        let identity = SoftmaxHead::new(config.embedding_dim(), identities, rng);
        Ok(CanModel {
            config,
            backbone,
            head,
            identity,
        })
    }

    /// Number of leading entries of [`Parameters::params`] owned by the backbone.
    pub fn backbone_param_count(&self) -> usize {
        self.backbone.params().len()
    }

    fn bind(&self, tape: &mut Tape, train_backbone: bool) -> ModelVars {
        let backbone = BackboneVars::bind(&self.backbone, tape, train_backbone);
        let head = match &self.head {
            Head::Recurrent(p) => HeadVars::Recurrent(AttentionVars::bind(p, tape, true)),
            Head::Fc(p) => {
                let v = p.bind(tape, true);
                HeadVars::Fc([v[0], v[1], v[2], v[3]])
            }
        };
        ModelVars { backbone, head }
    }

    fn forward_on(&self, tape: &mut Tape, vars: &ModelVars, image: Var) -> Result<(Var, Option<TraceVars>)> {
        let cube = forward_cube(tape, &self.config.backbone, &vars.backbone, image)?;
        match &vars.head {
            HeadVars::Recurrent(av) => {
                let x = cube_matrix(tape, &av.config, cube)?;
                let trace = run_glimpses_on(tape, av, x, self.config.glimpses, self.config.pooling())?;
                let h = embed_on(tape, &trace.hidden, &self.config.steps)?;
                Ok((h, Some(trace)))
            }
            HeadVars::Fc([w1, b1, w2, b2]) => {
                let n = tape.value(cube).len();
                let flat = tape.reshape(cube, &[n])?;
                let y = tape.matmul(*w1, flat)?;
                let y = tape.add(y, *b1)?;
                let y = tape.relu(y);
                let z = tape.matmul(*w2, y)?;
                let z = tape.add(z, *b2)?;
                let h = tape.l2_normalize(z).map_err(|e| match e {
                    Error::Degenerate(msg) => Error::Degenerate(format!("dead embedding: {msg}")),
                    other => other,
                })?;
                Ok((h, None))
            }
        }
    }

    fn check_image(&self, image: &ImageSample) -> Result<()> {
        let b = &self.config.backbone;
        let expect = [b.input_height, b.input_width, b.input_channels];
        if image.pixels.shape() != expect {
            return Err(Error::Config(format!(
                "image shape {:?} does not match model input {:?}",
                image.pixels.shape(),
                expect
            )));
        }
        Ok(())
    }

    /// Inference-only descriptor of one image.
    pub fn embed(&self, image: &ImageSample) -> Result<Embedding> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let x = tape.constant(image.pixels.clone());
        let (h, _) = self.forward_on(&mut tape, &vars, x)?;
        Ok(Embedding {
            values: tape.value(h).clone(),
            source: format!("id{}_cam{}", image.identity, image.camera),
        })
    }

    pub fn embed_all(&self, images: &[ImageSample], exec: Execution) -> Result<Vec<Embedding>> {
        exec.map_ref(images, |img| self.embed(img)).into_iter().collect()
    }

    /// Hidden states and attention maps of one image. Maps are empty under
    /// the pooling ablations.
    pub fn glimpse_trace(&self, image: &ImageSample) -> Result<GlimpseTrace> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let HeadVars::Recurrent(av) = &vars.head else {
            return Err(Error::Usage("the fully-connected head has no glimpses".into()));
        };
        let x = tape.constant(image.pixels.clone());
        let cube = forward_cube(&mut tape, &self.config.backbone, &vars.backbone, x)?;
        let x = cube_matrix(&mut tape, &av.config, cube)?;
        let trace = run_glimpses_on(&mut tape, av, x, self.config.glimpses, self.config.pooling())?;
        Ok(trace_values(&tape, &trace))
    }

    fn bind_constants(&self, tape: &mut Tape) -> ModelVars {
        let vars = self.params().into_iter().map(|p| tape.constant(p.tensor.clone())).collect::<Vec<_>>();
        self.vars_from(&vars)
    }

    fn vars_from(&self, v: &[Var]) -> ModelVars {
        let nb = self.backbone_param_count();
        let backbone = BackboneVars {
            convs: (0..nb / 2).map(|i| (v[2 * i], v[2 * i + 1])).collect(),
            classifier: None,
        };
        let rest = &v[nb..];
        let head = match &self.head {
            Head::Recurrent(p) => HeadVars::Recurrent(AttentionVars::from_vars(p.config, rest)),
            Head::Fc(_) => HeadVars::Fc([rest[0], rest[1], rest[2], rest[3]]),
        };
        ModelVars { backbone, head }
    }

    fn sample_graph(&self, image: &ImageSample, train_backbone: bool) -> Result<SampleGraph> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, train_backbone);
        let x = tape.constant(image.pixels.clone());
        let (embedding, _) = self.forward_on(&mut tape, &vars, x)?;
        Ok(SampleGraph {
            tape,
            vars: vars.all(),
            embedding,
        })
    }

    /// Multi-task loss of a batch and its gradient with respect to every
    /// parameter. Each sample runs forward on its own tape; the loss is
    /// differentiated with respect to the embeddings, and each sample tape
    /// is then swept backward from `<H, dL/dH>`. Per-sample gradients are
    /// summed in batch order. Backbone gradients are zero when frozen.
    pub fn batch_gradient(
        &self,
        batch: &[ImageSample],
        triples: &TripletBatch,
        alpha: f64,
        freeze_backbone: bool,
        exec: Execution,
    ) -> Result<BatchGradient> {
        let labels: Vec<usize> = batch.iter().map(|s| s.identity).collect();
        triples.validate(&labels)?;
        let graphs: Vec<SampleGraph> = exec
            .map_ref(batch, |s| self.sample_graph(s, !freeze_backbone))
            .into_iter()
            .collect::<Result<_>>()?;

        let mut loss_tape = Tape::new();
        let hs: Vec<Var> = graphs
            .iter()
            .map(|g| loss_tape.leaf(g.tape.value(g.embedding).clone()))
            .collect();
        let s = loss_tape.leaf(self.identity.weights.clone());
        let (root, report) = batch_objective_on(&mut loss_tape, &hs, &labels, triples, s, alpha)?;
        let lg = loss_tape.backward(root)?;
        let dh: Vec<Tensor> = hs.iter().map(|&h| lg.wrt(&loss_tape, h)).collect();

        let per_sample: Vec<Vec<Tensor>> = exec
            .map(graphs.into_iter().zip(dh).collect(), |(mut g, d)| -> Result<Vec<Tensor>> {
                let dv = g.tape.constant(d);
                let root = g.tape.dot(g.embedding, dv)?;
                let grads = g.tape.backward(root)?;
                Ok(g.vars.iter().map(|&v| grads.wrt(&g.tape, v)).collect())
            })
            .into_iter()
            .collect::<Result<_>>()?;

        let mut grads = sum_in_order(per_sample);
        grads.push(lg.wrt(&loss_tape, s));
        Ok(BatchGradient { report, grads })
    }

    /// Forward-only value of the batch objective.
    pub fn batch_loss(&self, batch: &[ImageSample], triples: &TripletBatch, alpha: f64) -> Result<LossReport> {
        let labels: Vec<usize> = batch.iter().map(|s| s.identity).collect();
        let embs = batch.iter().map(|s| self.embed(s)).collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let hs: Vec<Var> = embs.into_iter().map(|e| tape.constant(e.values)).collect();
        let s = tape.constant(self.identity.weights.clone());
        let (_, report) = batch_objective_on(&mut tape, &hs, &labels, triples, s, alpha)?;
        Ok(report)
    }
}

impl Parameters for CanModel {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = self.backbone.params();
        out.extend(self.head.params());
        out.extend(self.identity.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut();
        out.extend(self.head.params_mut());
        out.extend(self.identity.params_mut());
        out
    }
}

fn sum_in_order(per_sample: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let mut it = per_sample.into_iter();
    let mut total = it.next().unwrap_or_default();
    for grads in it {
        for (acc, g) in total.iter_mut().zip(grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    total
}

/// Mean cross-entropy, correct-prediction count and mean gradient of the
/// backbone + classification head over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGradient {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Tensor>,
}

pub fn classifier_batch_gradient(
    config: &BackboneConfig,
    params: &BackboneParams,
    batch: &[ImageSample],
    exec: Execution,
) -> Result<ClassifierGradient> {
    if batch.is_empty() {
        return Err(Error::Usage("empty pretraining batch".into()));
    }
    let per_sample: Vec<(f64, bool, Vec<Tensor>)> = exec
        .map_ref(batch, |s| -> Result<_> {
            let mut tape = Tape::new();
            let vars = BackboneVars::bind(params, &mut tape, true);
            let x = tape.constant(s.pixels.clone());
            let cube = forward_cube(&mut tape, config, &vars, x)?;
            let logits = forward_logits(&mut tape, &vars, cube)?;
            let loss = tape.cross_entropy(logits, s.identity)?;
            let predicted = argmax(tape.value(logits).data());
            let grads = tape.backward(loss)?;
            let g = vars.all().iter().map(|&v| grads.wrt(&tape, v)).collect();
            Ok((tape.value(loss).data()[0], predicted == s.identity, g))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let loss = per_sample.iter().map(|p| p.0).sum::<f64>() / n;
    let correct = per_sample.iter().filter(|p| p.1).count();
    let mut grads = sum_in_order(per_sample.into_iter().map(|p| p.2).collect());
    for g in &mut grads {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    Ok(ClassifierGradient { loss, correct, grads })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
