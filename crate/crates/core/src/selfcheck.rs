//! Finite-difference audit of every differentiable op and of the full
//! micro-config pipeline (backbone, attention, embedding, multi-task loss).

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    apply_attention_on, embed_on, init_states_on, lstm_step_on, predict_attention_on, AttentionConfig,
    AttentionParams, AttentionVars,
};
use crate::autograd::{gradcheck_compare, GradCheck, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::image::ImageSample;
use crate::losses::{identity_loss_on, mine_triplets, triplet_loss_on};
use crate::model::{Ablation, CanModel, ModelConfig};
use crate::param::Parameters;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
const MAX_OUTPUT: usize = 256;

/// Names of every audited op, in report order.
pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "l2_normalize",
    "concat",
    "reshape",
    "sum",
    "dot",
    "mean_rows",
    "max_rows",
    "conv2d",
    "maxpool2d",
    "cross_entropy",
    "init_states",
    "attention",
    "lstm_step",
    "embedding",
    "triplet_loss",
    "identity_loss",
    "pipeline",
    "pipeline_fc_head",
];

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub non_finite: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.non_finite == 0
    }
}

#[derive(Debug, Clone)]
pub struct SelfCheckReport {
    pub ops: Vec<OpCheck>,
    pub elapsed: Duration,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpCheck::passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.ops.iter().filter(|o| !o.passed()).map(|o| o.name).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.ops {
            out.push_str(&format!(
                "{:<18} max_rel_err {:.3e}  {}\n",
                o.name,
                o.max_rel_error,
                if o.passed() { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "{} ops, {} failing, {:.1}s\n",
            self.ops.len(),
            self.failing().len(),
            self.elapsed.as_secs_f64()
        ));
        out
    }
}

/// A scalar function of several inputs with its analytic gradient.
struct Case {
    inputs: Vec<Tensor>,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn projected(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let n = tape.value(out).len();
    let flat = tape.reshape(out, &[n])?;
    let w = tape.constant(Tensor::vector(weights.data()[..n].to_vec()));
    tape.dot(flat, w)
}

/// Wraps a tensor-valued function into a scalar one by a fixed random
/// weighted sum of its outputs.
fn case(
    inputs: Vec<Tensor>,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let weights = Tensor::uniform(&[MAX_OUTPUT], -1.0, 1.0, rng);
    Case {
        inputs,
        build: Box::new(move |tape, vars| {
            let out = f(tape, vars)?;
            projected(tape, out, &weights)
        }),
    }
}

fn split(flat: &Tensor, like: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut offset = 0;
    like.iter()
        .map(|t| {
            let n = t.len();
            let part = Tensor::new(t.shape().to_vec(), flat.data()[offset..offset + n].to_vec());
            offset += n;
            part
        })
        .collect()
}

fn run_case(c: &Case, fault: bool) -> Result<GradCheck> {
    let mut tape = Tape::unchecked();
    let vars: Vec<Var> = c.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = (c.build)(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let mut analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(&tape, v).into_data()).collect();
    if fault {
        corrupt(&mut analytic);
    }
    let x = Tensor::vector(c.inputs.iter().flat_map(|t| t.data().iter().copied()).collect());
    let eval = |p: &Tensor| -> Result<f64> {
        let parts = split(p, &c.inputs)?;
        let mut tape = Tape::unchecked();
        let vars: Vec<Var> = parts.into_iter().map(|t| tape.leaf(t)).collect();
        let root = (c.build)(&mut tape, &vars)?;
        Ok(tape.value(root).data()[0])
    };
    gradcheck_compare(eval, &x, &Tensor::vector(analytic), STEP)
}

fn corrupt(analytic: &mut [f64]) {
    if let Some(g) = analytic.first_mut() {
        *g = *g * 1.5 + 0.1;
    }
}

fn u(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

/// Random inputs bounded away from the relu kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.05, 2.0, rng);
    let signs = Tensor::uniform(shape, -1.0, 1.0, rng);
    for (v, s) in t.data_mut().iter_mut().zip(signs.data()) {
        if *s < 0.0 {
            *v = -*v;
        }
    }
    t
}

fn attention_fixture(rng: &mut ChaCha8Rng) -> (AttentionConfig, Vec<Tensor>) {
    let config = AttentionConfig { q: 3, k: 2, d: 4 };
    let params = AttentionParams::new(config, rng);
    (config, params.params().iter().map(|p| p.tensor.clone()).collect())
}

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    Ok(match name {
        "matmul" => {
            let inputs = vec![u(&[3, 4], rng), u(&[4, 2], rng), u(&[4], rng)];
            case(inputs, rng, |t, x| {
                let mm = t.matmul(x[0], x[1])?;
                let mm = t.reshape(mm, &[6])?;
                let mv = t.matmul(x[0], x[2])?;
                let vm = t.matmul(x[2], x[1])?;
                t.concat(&[mm, mv, vm])
            })
        }
        "add" | "sub" | "mul" => {
            let op = name.to_string();
            case(vec![u(&[2, 3], rng), u(&[2, 3], rng)], rng, move |t, x| match op.as_str() {
                "add" => t.add(x[0], x[1]),
                "sub" => t.sub(x[0], x[1]),
                _ => t.mul(x[0], x[1]),
            })
        }
        "scale" => case(vec![u(&[5], rng)], rng, |t, x| Ok(t.scale(x[0], -1.7))),
        "add_scalar" => case(vec![u(&[5], rng)], rng, |t, x| Ok(t.add_scalar(x[0], 0.3))),
        "sigmoid" => case(vec![u(&[6], rng)], rng, |t, x| Ok(t.sigmoid(x[0]))),
        "tanh" => case(vec![u(&[6], rng)], rng, |t, x| Ok(t.tanh(x[0]))),
        "relu" => case(vec![off_kink(&[6], rng)], rng, |t, x| Ok(t.relu(x[0]))),
        "softmax" => case(vec![u(&[5], rng)], rng, |t, x| t.softmax(x[0])),
        "l2_normalize" => case(vec![u(&[5], rng)], rng, |t, x| t.l2_normalize(x[0])),
        "concat" => case(vec![u(&[2], rng), u(&[3], rng)], rng, |t, x| t.concat(&[x[0], x[1]])),
        "reshape" => case(vec![u(&[2, 3], rng)], rng, |t, x| t.reshape(x[0], &[3, 2])),
        "sum" => case(vec![u(&[2, 3], rng)], rng, |t, x| Ok(t.sum(x[0]))),
        "dot" => case(vec![u(&[4], rng), u(&[4], rng)], rng, |t, x| t.dot(x[0], x[1])),
        "mean_rows" => case(vec![u(&[4, 3], rng)], rng, |t, x| t.mean_rows(x[0])),
        "max_rows" => case(vec![u(&[4, 3], rng)], rng, |t, x| t.max_rows(x[0])),
        "conv2d" => {
            let inputs = vec![u(&[5, 4, 2], rng), u(&[3, 3, 2, 3], rng), u(&[3], rng)];
            case(inputs, rng, |t, x| t.conv2d(x[0], x[1], x[2], 2, 1))
        }
        "maxpool2d" => case(vec![u(&[4, 4, 2], rng)], rng, |t, x| t.maxpool2d(x[0], 2, 2)),
        "cross_entropy" => case(vec![u(&[4], rng)], rng, |t, x| t.cross_entropy(x[0], 2)),
        "init_states" | "attention" | "lstm_step" => {
            let (config, params) = attention_fixture(rng);
            let n = params.len();
            let op = name.to_string();
            let mut inputs = params;
            inputs.push(u(&[4, 4], rng));
            inputs.push(u(&[3], rng));
            inputs.push(u(&[3], rng));
            case(inputs, rng, move |t, x| {
                let vars = AttentionVars::from_vars(config, &x[..n]);
                let (cube, h, c) = (x[n], x[n + 1], x[n + 2]);
                match op.as_str() {
                    "init_states" => {
                        let (h0, c0) = init_states_on(t, &vars, cube)?;
                        t.concat(&[h0, c0])
                    }
                    "attention" => {
                        let l = predict_attention_on(t, &vars, h)?;
                        let a = apply_attention_on(t, cube, l)?;
                        t.concat(&[l, a])
                    }
                    _ => {
                        let a = t.mean_rows(cube)?;
                        let (h1, c1) = lstm_step_on(t, &vars, a, h, c)?;
                        t.concat(&[h1, c1])
                    }
                }
            })
        }
        "embedding" => case(vec![u(&[3], rng), u(&[3], rng), u(&[3], rng)], rng, |t, x| {
            embed_on(t, x, &[1, 3])
        }),
        "triplet_loss" => {
            let labels = [0, 0, 1, 1];
            let triples = mine_triplets(&labels, rng)?;
            // embeddings spread so no hinge sits within a step of its kink
            let inputs = (0..4).map(|_| off_kink(&[3], rng)).collect();
            case(inputs, rng, move |t, x| Ok(triplet_loss_on(t, x, &triples, 0.3)?.0))
        }
        "identity_loss" => {
            let inputs = vec![u(&[3], rng), u(&[3], rng), u(&[3], rng), u(&[3, 4], rng)];
            case(inputs, rng, |t, x| identity_loss_on(t, &x[..3], &[0, 3, 1], x[3]))
        }
        other => return Err(Error::Usage(format!("no case registered for {other}"))),
    })
}

fn pipeline_check(ablation: Ablation, seed: u64, fault: bool) -> Result<GradCheck> {
    let config = ModelConfig {
        ablation,
        ..ModelConfig::micro()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CanModel::new(config.clone(), 3, &mut rng)?;
    let labels = [0, 0, 1, 1, 2, 2];
    let b = &config.backbone;
    let batch: Vec<ImageSample> = labels
        .iter()
        .enumerate()
        .map(|(i, &identity)| ImageSample {
            pixels: Tensor::uniform(&[b.input_height, b.input_width, b.input_channels], 0.0, 1.0, &mut rng),
            identity,
            camera: i % 2,
        })
        .collect();
    let triples = mine_triplets(&labels, &mut rng)?;
    let g = model.batch_gradient(&batch, &triples, 0.3, false, Execution::Sequential)?;
    let mut analytic: Vec<f64> = g.grads.iter().flat_map(|t| t.data().iter().copied()).collect();
    if fault {
        corrupt(&mut analytic);
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let mut m = model.clone();
        m.set_flat_values(p.data());
        Ok(m.batch_loss(&batch, &triples, 0.3)?.multi)
    };
    gradcheck_compare(eval, &Tensor::vector(model.flat_values()), &Tensor::vector(analytic), STEP)
}

/// Runs every registered check. `fault` corrupts the analytic gradient of
/// the named op, which must then be reported as failing.
pub fn run_selfcheck(fault: Option<&str>, seed: u64) -> Result<SelfCheckReport> {
    if let Some(f) = fault {
        if !OPS.contains(&f) {
            return Err(Error::Usage(format!("cannot inject a fault into unknown op '{f}'")));
        }
    }
    let start = Instant::now();
    let mut ops = Vec::with_capacity(OPS.len());
    for (i, &name) in OPS.iter().enumerate() {
        let inject = fault == Some(name);
        let check = match name {
            "pipeline" => pipeline_check(Ablation::None, seed, inject)?,
            "pipeline_fc_head" => pipeline_check(Ablation::FcHead, seed, inject)?,
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                run_case(&op_case(name, &mut rng)?, inject)?
            }
        };
        ops.push(OpCheck {
            name,
            max_rel_error: check.max_rel_error,
            non_finite: check.non_finite,
        });
    }
    Ok(SelfCheckReport {
        ops,
        elapsed: start.elapsed(),
    })
}
