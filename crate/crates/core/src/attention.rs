//! Recurrent soft attention over a feature cube.
//!
//! The LSTM state is initialised from the spatial mean of the cube. At each
//! glimpse the previous hidden state predicts a softmax map over the `K x K`
//! cells, the cube is pooled under that map, and the pooled vector drives one
//! LSTM step. Selected hidden states are concatenated and L2-normalised into
//! the embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::FeatureCube;
use crate::error::{shape_str, Error, Result};
use crate::param::{bias, glorot_uniform, weight, ParamRef, Parameters};
use crate::tensor::Tensor;

/// How the per-glimpse LSTM input is pooled from the cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Softmax attention predicted from the previous hidden state.
    Attention,
    /// Uniform weights over all cells.
    Average,
    /// Channelwise maximum over cells.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Hidden and cell state width.
    pub q: usize,
    pub k: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Softmax weights over the `K x K` cells, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor,
    pub step_index: usize,
}

impl AttentionMap {
    pub fn uniform(cells: usize, step_index: usize) -> Self {
        AttentionMap {
            weights: Tensor::full(&[cells], 1.0 / cells as f64),
            step_index,
        }
    }

    /// Index of the heaviest cell (first on ties).
    pub fn argmax(&self) -> usize {
        let w = self.weights.data();
        let mut best = 0;
        for (i, &v) in w.iter().enumerate() {
            if v > w[best] {
                best = i;
            }
        }
        best
    }
}

/// Two affine layers `D -> q -> q` with tanh between.
#[derive(Debug, Clone, PartialEq)]
pub struct InitMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    /// `[q, q + D]`, acting on `[h, A]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub config: AttentionConfig,
    /// Input, forget, output and candidate gates, in that order.
    pub gates: [Gate; 4],
    /// `[K^2, q]` location weights shared by every glimpse.
    pub location: Tensor,
    pub init_c: InitMlp,
    pub init_h: InitMlp,
}

const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "candidate"];

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(config: AttentionConfig, rng: &mut R) -> Self {
        let AttentionConfig { q, k, d } = config;
        let gates = std::array::from_fn(|i| Gate {
            weight: glorot_uniform(&[q, q + d], q + d, q, rng),
            bias: Tensor::full(&[q], if i == 1 { 1.0 } else { 0.0 }),
        });
        let location = glorot_uniform(&[k * k, q], q, k * k, rng);
        let mlp = |rng: &mut R| InitMlp {
            w1: glorot_uniform(&[q, d], d, q, rng),
            b1: Tensor::zeros(&[q]),
            w2: glorot_uniform(&[q, q], q, q, rng),
            b2: Tensor::zeros(&[q]),
        };
        let init_c = mlp(rng);
        let init_h = mlp(rng);
        AttentionParams {
            config,
            gates,
            location,
            init_c,
            init_h,
        }
    }

    /// All-zero parameters.
    pub fn zeros(config: AttentionConfig) -> Self {
        let AttentionConfig { q, k, d } = config;
        let mlp = || InitMlp {
            w1: Tensor::zeros(&[q, d]),
            b1: Tensor::zeros(&[q]),
            w2: Tensor::zeros(&[q, q]),
            b2: Tensor::zeros(&[q]),
        };
        AttentionParams {
            config,
            gates: std::array::from_fn(|_| Gate {
                weight: Tensor::zeros(&[q, q + d]),
                bias: Tensor::zeros(&[q]),
            }),
            location: Tensor::zeros(&[k * k, q]),
            init_c: mlp(),
            init_h: mlp(),
        }
    }
}

impl Parameters for AttentionParams {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (g, name) in self.gates.iter().zip(GATE_NAMES) {
            out.push(weight(format!("attention.gate_{name}.weight"), &g.weight));
            out.push(bias(format!("attention.gate_{name}.bias"), &g.bias));
        }
        out.push(weight("attention.location.weight".into(), &self.location));
        for (m, name) in [(&self.init_c, "init_c"), (&self.init_h, "init_h")] {
            out.push(weight(format!("attention.{name}.fc0.weight"), &m.w1));
            out.push(bias(format!("attention.{name}.fc0.bias"), &m.b1));
            out.push(weight(format!("attention.{name}.fc1.weight"), &m.w2));
            out.push(bias(format!("attention.{name}.fc1.bias"), &m.b2));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for g in &mut self.gates {
            out.push(&mut g.weight);
            out.push(&mut g.bias);
        }
        out.push(&mut self.location);
        for m in [&mut self.init_c, &mut self.init_h] {
            out.push(&mut m.w1);
            out.push(&mut m.b1);
            out.push(&mut m.w2);
            out.push(&mut m.b2);
        }
        out
    }
}

/// Attention parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub config: AttentionConfig,
    pub gates: [(Var, Var); 4],
    pub location: Var,
    pub init_c: [Var; 4],
    pub init_h: [Var; 4],
}

impl AttentionVars {
    pub fn bind(params: &AttentionParams, tape: &mut Tape, trainable: bool) -> Self {
        let vars = params.bind(tape, trainable);
        Self::from_vars(params.config, &vars)
    }

    /// Rebuilds the handles from a slice in [`Parameters::params`] order.
    pub fn from_vars(config: AttentionConfig, v: &[Var]) -> Self {
        AttentionVars {
            config,
            gates: std::array::from_fn(|i| (v[2 * i], v[2 * i + 1])),
            location: v[8],
            init_c: [v[9], v[10], v[11], v[12]],
            init_h: [v[13], v[14], v[15], v[16]],
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.gates.iter().flat_map(|(w, b)| [*w, *b]).collect();
        out.push(self.location);
        out.extend(self.init_c);
        out.extend(self.init_h);
        out
    }
}

/// Hidden states and attention maps of one unrolled recurrence, on a tape.
#[derive(Debug, Clone)]
pub struct TraceVars {
    /// `h_1 .. h_T`.
    pub hidden: Vec<Var>,
    /// `l_0 .. l_{T-1}`; empty for non-attention pooling.
    pub maps: Vec<Var>,
}

fn affine(tape: &mut Tape, w: Var, b: Var, x: Var) -> Result<Var> {
    let y = tape.matmul(w, x)?;
    tape.add(y, b)
}

/// Reshapes a `[K, K, D]` cube node into the `[K^2, D]` slice matrix.
pub fn cube_matrix(tape: &mut Tape, config: &AttentionConfig, cube: Var) -> Result<Var> {
    let expect = [config.k, config.k, config.d];
    let shape = tape.shape(cube);
    if shape != expect && shape != [config.k * config.k, config.d] {
        return Err(Error::Dimension(format!(
            "feature cube {} does not match K={} D={}",
            shape_str(shape),
            config.k,
            config.d
        )));
    }
    tape.reshape(cube, &[config.k * config.k, config.d])
}

pub fn init_states_on(tape: &mut Tape, vars: &AttentionVars, x: Var) -> Result<(Var, Var)> {
    let mean = tape.mean_rows(x)?;
    let mlp = |tape: &mut Tape, m: &[Var; 4]| -> Result<Var> {
        let hidden = affine(tape, m[0], m[1], mean)?;
        let hidden = tape.tanh(hidden);
        affine(tape, m[2], m[3], hidden)
    };
    let c0 = mlp(tape, &vars.init_c)?;
    let h0 = mlp(tape, &vars.init_h)?;
    Ok((h0, c0))
}

pub fn predict_attention_on(tape: &mut Tape, vars: &AttentionVars, h: Var) -> Result<Var> {
    let logits = tape.matmul(vars.location, h)?;
    tape.softmax(logits)
}

/// Expectation of the cube slices under the map: `sum_i l_i X_i`.
pub fn apply_attention_on(tape: &mut Tape, x: Var, l: Var) -> Result<Var> {
    tape.matmul(l, x)
}

pub fn lstm_step_on(
    tape: &mut Tape,
    vars: &AttentionVars,
    a: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let z = tape.concat(&[h, a])?;
    let pre: Vec<Var> = vars
        .gates
        .iter()
        .map(|(w, b)| affine(tape, *w, *b, z))
        .collect::<Result<_>>()?;
    let i = tape.sigmoid(pre[0]);
    let f = tape.sigmoid(pre[1]);
    let o = tape.sigmoid(pre[2]);
    let g = tape.tanh(pre[3]);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Unrolls `glimpses` recurrence steps over the same slice matrix `x`.
pub fn run_glimpses_on(
    tape: &mut Tape,
    vars: &AttentionVars,
    x: Var,
    glimpses: usize,
    pooling: Pooling,
) -> Result<TraceVars> {
    if glimpses < 1 {
        return Err(Error::Usage("at least one glimpse is required".into()));
    }
    let (mut h, mut c) = init_states_on(tape, vars, x)?;
    let mut trace = TraceVars {
        hidden: Vec::with_capacity(glimpses),
        maps: Vec::new(),
    };
    // pooled inputs that do not depend on the state are computed once
    let fixed = match pooling {
        Pooling::Attention => None,
        Pooling::Average => Some(tape.mean_rows(x)?),
        Pooling::Max => Some(tape.max_rows(x)?),
    };
    for _ in 0..glimpses {
        let a = match fixed {
            Some(a) => a,
            None => {
                let l = predict_attention_on(tape, vars, h)?;
                trace.maps.push(l);
                apply_attention_on(tape, x, l)?
            }
        };
        (h, c) = lstm_step_on(tape, vars, a, h, c)?;
        trace.hidden.push(h);
    }
    Ok(trace)
}

/// Validates a list of 1-based glimpse indices against `glimpses`.
pub fn check_steps(steps: &[usize], glimpses: usize) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::Usage("at least one concatenation step is required".into()));
    }
    for (j, &s) in steps.iter().enumerate() {
        if s < 1 || s > glimpses {
            return Err(Error::Usage(format!(
                "step {s} is outside 1..={glimpses}"
            )));
        }
        if j > 0 && steps[j - 1] >= s {
            return Err(Error::Usage(format!(
                "steps must be strictly increasing, got {:?}",
                steps
            )));
        }
    }
    Ok(())
}

/// Concatenates the selected hidden states and L2-normalises the result.
pub fn embed_on(tape: &mut Tape, hidden: &[Var], steps: &[usize]) -> Result<Var> {
    check_steps(steps, hidden.len())?;
    let parts: Vec<Var> = steps.iter().map(|&s| hidden[s - 1]).collect();
    let r = tape.concat(&parts)?;
    tape.l2_normalize(r).map_err(|e| match e {
        Error::Degenerate(msg) => Error::Degenerate(format!("dead embedding: {msg}")),
        other => other,
    })
}

// Value-level API. Each call runs on its own tape without gradients.

fn check_cube(x: &FeatureCube, config: &AttentionConfig) -> Result<()> {
    if x.values.shape() != [config.k, config.k, config.d] {
        return Err(Error::Dimension(format!(
            "feature cube {} does not match K={} D={}",
            shape_str(x.values.shape()),
            config.k,
            config.d
        )));
    }
    Ok(())
}

fn check_len(t: &Tensor, n: usize, what: &str) -> Result<()> {
    if t.len() != n {
        return Err(Error::Dimension(format!(
            "{what} has {} entries, expected {n}",
            t.len()
        )));
    }
    Ok(())
}

/// `(h_0, c_0)` from the spatial mean of the cube.
pub fn init_states(x: &FeatureCube, params: &AttentionParams) -> Result<LstmState> {
    check_cube(x, &params.config)?;
    let mut tape = Tape::new();
    let vars = AttentionVars::bind(params, &mut tape, false);
    let xv = tape.constant(x.values.clone());
    let xm = cube_matrix(&mut tape, &params.config, xv)?;
    let (h, c) = init_states_on(&mut tape, &vars, xm)?;
    Ok(LstmState {
        h: tape.value(h).clone(),
        c: tape.value(c).clone(),
    })
}

pub fn predict_attention(h: &Tensor, params: &AttentionParams) -> Result<AttentionMap> {
    check_len(h, params.config.q, "hidden state")?;
    let mut tape = Tape::new();
    let vars = AttentionVars::bind(params, &mut tape, false);
    let hv = tape.constant(h.clone());
    let l = predict_attention_on(&mut tape, &vars, hv)?;
    Ok(AttentionMap {
        weights: tape.value(l).clone(),
        step_index: 0,
    })
}

pub fn apply_attention(x: &FeatureCube, l: &AttentionMap) -> Result<Tensor> {
    let k = x.k();
    check_len(&l.weights, k * k, "attention map")?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.values.clone());
    let xm = tape.reshape(xv, &[k * k, x.d()])?;
    let lv = tape.constant(Tensor::vector(l.weights.data().to_vec()));
    let a = apply_attention_on(&mut tape, xm, lv)?;
    Ok(tape.value(a).clone())
}

pub fn lstm_step(a: &Tensor, state: &LstmState, params: &AttentionParams) -> Result<LstmState> {
    check_len(a, params.config.d, "pooled input")?;
    check_len(&state.h, params.config.q, "hidden state")?;
    check_len(&state.c, params.config.q, "cell state")?;
    let mut tape = Tape::new();
    let vars = AttentionVars::bind(params, &mut tape, false);
    let av = tape.constant(a.clone());
    let hv = tape.constant(state.h.clone());
    let cv = tape.constant(state.c.clone());
    let (h, c) = lstm_step_on(&mut tape, &vars, av, hv, cv)?;
    Ok(LstmState {
        h: tape.value(h).clone(),
        c: tape.value(c).clone(),
    })
}

/// Per-image record of one unrolled recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct GlimpseTrace {
    /// `h_1 .. h_T`.
    pub hidden_states: Vec<Tensor>,
    /// `l_0 .. l_{T-1}`.
    pub attention_maps: Vec<AttentionMap>,
}

pub fn run_glimpses(x: &FeatureCube, glimpses: usize, params: &AttentionParams) -> Result<GlimpseTrace> {
    check_cube(x, &params.config)?;
    let mut tape = Tape::new();
    let vars = AttentionVars::bind(params, &mut tape, false);
    let xv = tape.constant(x.values.clone());
    let xm = cube_matrix(&mut tape, &params.config, xv)?;
    let trace = run_glimpses_on(&mut tape, &vars, xm, glimpses, Pooling::Attention)?;
    Ok(trace_values(&tape, &trace))
}

pub(crate) fn trace_values(tape: &Tape, trace: &TraceVars) -> GlimpseTrace {
    GlimpseTrace {
        hidden_states: trace.hidden.iter().map(|h| tape.value(*h).clone()).collect(),
        attention_maps: trace
            .maps
            .iter()
            .enumerate()
            .map(|(t, l)| AttentionMap {
                weights: tape.value(*l).clone(),
                step_index: t,
            })
            .collect(),
    }
}

/// L2-normalised descriptor of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Tensor,
    pub source: String,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn build_embedding(trace: &GlimpseTrace, steps: &[usize]) -> Result<Embedding> {
    let mut tape = Tape::new();
    let hidden: Vec<Var> = trace
        .hidden_states
        .iter()
        .map(|h| tape.constant(h.clone()))
        .collect();
    let e = embed_on(&mut tape, &hidden, steps)?;
    Ok(Embedding {
        values: tape.value(e).clone(),
        source: String::new(),
    })
}
