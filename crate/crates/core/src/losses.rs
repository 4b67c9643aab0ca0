//! Triplet + identification objective and online in-batch triplet mining.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Embedding;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{weight, ParamRef, Parameters};
use crate::tensor::Tensor;

/// `(anchor, positive, negative)` indices into a mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletBatch {
    pub triples: Vec<Triplet>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Checks label consistency of every triple against `labels`.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        for t in &self.triples {
            let n = labels.len();
            if t.anchor >= n || t.positive >= n || t.negative >= n {
                return Err(Error::Usage(format!("triple {t:?} indexes past batch of {n}")));
            }
            if t.anchor == t.positive
                || labels[t.anchor] != labels[t.positive]
                || labels[t.anchor] == labels[t.negative]
            {
                return Err(Error::Usage(format!("triple {t:?} violates its labels")));
            }
        }
        Ok(())
    }
}

/// Identity classifier `S` of shape `[embedding_dim, identities]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    pub weights: Tensor,
}

impl SoftmaxHead {
    pub fn new<R: Rng + ?Sized>(dim: usize, identities: usize, rng: &mut R) -> Self {
        SoftmaxHead {
            weights: crate::param::glorot_uniform(&[dim, identities], dim, identities, rng),
        }
    }

    pub fn identities(&self) -> usize {
        self.weights.shape()[1]
    }
}

impl Parameters for SoftmaxHead {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![weight("identity_head.weight".into(), &self.weights)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weights]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub trip: f64,
    pub iden: f64,
    pub multi: f64,
    /// Triples whose hinge is strictly positive.
    pub active_triplets: usize,
}

fn squared_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    tape.dot(d, d)
}

/// Mean hinge `[|a-p|^2 - |a-n|^2 + alpha]_+` over the triples. Returns the
/// loss node and the number of active triples.
pub fn triplet_loss_on(
    tape: &mut Tape,
    embeddings: &[Var],
    triples: &TripletBatch,
    alpha: f64,
) -> Result<(Var, usize)> {
    if triples.is_empty() {
        return Err(Error::Usage("triplet loss over zero triples is undefined".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Usage(format!("margin must be positive, got {alpha}")));
    }
    let mut hinges = Vec::with_capacity(triples.len());
    let mut active = 0;
    for t in &triples.triples {
        let get = |i: usize| {
            embeddings
                .get(i)
                .copied()
                .ok_or_else(|| Error::Usage(format!("triple index {i} past {} embeddings", embeddings.len())))
        };
        let (a, p, n) = (get(t.anchor)?, get(t.positive)?, get(t.negative)?);
        let dp = squared_distance(tape, a, p)?;
        let dn = squared_distance(tape, a, n)?;
        let diff = tape.sub(dp, dn)?;
        let shifted = tape.add_scalar(diff, alpha);
        let hinge = tape.relu(shifted);
        if tape.value(hinge).data()[0] > 0.0 {
            active += 1;
        }
        hinges.push(hinge);
    }
    let all = tape.concat(&hinges)?;
    let total = tape.sum(all);
    Ok((tape.scale(total, 1.0 / triples.len() as f64), active))
}

/// Mean over samples of `-log softmax(S^T H)[label]`.
pub fn identity_loss_on(tape: &mut Tape, embeddings: &[Var], labels: &[usize], head: Var) -> Result<Var> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::Usage(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let classes = tape.shape(head)[1];
    let mut terms = Vec::with_capacity(labels.len());
    for (&e, &label) in embeddings.iter().zip(labels) {
        if label >= classes {
            return Err(Error::Usage(format!("label {label} out of range for {classes} identities")));
        }
        let logits = tape.matmul(e, head)?;
        terms.push(tape.cross_entropy(logits, label)?);
    }
    let all = tape.concat(&terms)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, 1.0 / labels.len() as f64))
}

/// Equal-weight sum of the two losses.
pub fn multi_task_loss_on(tape: &mut Tape, trip: Var, iden: Var) -> Result<Var> {
    tape.add(trip, iden)
}

/// Full objective over one mini-batch of embedding nodes.
pub fn batch_objective_on(
    tape: &mut Tape,
    embeddings: &[Var],
    labels: &[usize],
    triples: &TripletBatch,
    head: Var,
    alpha: f64,
) -> Result<(Var, LossReport)> {
    let (trip, active) = triplet_loss_on(tape, embeddings, triples, alpha)?;
    let iden = identity_loss_on(tape, embeddings, labels, head)?;
    let multi = multi_task_loss_on(tape, trip, iden)?;
    let report = LossReport {
        trip: tape.value(trip).data()[0],
        iden: tape.value(iden).data()[0],
        multi: tape.value(multi).data()[0],
        active_triplets: active,
    };
    Ok((multi, report))
}

fn embedding_leaves(tape: &mut Tape, embeddings: &[Embedding]) -> Vec<Var> {
    embeddings.iter().map(|e| tape.constant(e.values.clone())).collect()
}

pub fn triplet_loss(embeddings: &[Embedding], triples: &TripletBatch, alpha: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = embedding_leaves(&mut tape, embeddings);
    let (loss, _) = triplet_loss_on(&mut tape, &vars, triples, alpha)?;
    Ok(tape.value(loss).data()[0])
}

pub fn identity_loss(embeddings: &[Embedding], labels: &[usize], head: &SoftmaxHead) -> Result<f64> {
    if let Some(e) = embeddings.iter().find(|e| e.dim() != head.weights.shape()[0]) {
        return Err(Error::Dimension(format!(
            "embedding of dimension {} does not fit an identity head over {}",
            e.dim(),
            head.weights.shape()[0]
        )));
    }
    let mut tape = Tape::new();
    let vars = embedding_leaves(&mut tape, embeddings);
    let s = tape.constant(head.weights.clone());
    let loss = identity_loss_on(&mut tape, &vars, labels, s)?;
    Ok(tape.value(loss).data()[0])
}

pub fn multi_task_loss(trip: f64, iden: f64) -> f64 {
    trip + iden
}

/// One triple per ordered same-label pair `(a, p)`, each with a negative
/// drawn uniformly from the samples of other labels.
pub fn mine_triplets<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> Result<TripletBatch> {
    let mut triples = Vec::new();
    for (a, &la) in labels.iter().enumerate() {
        let negatives: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != la).collect();
        for (p, &lp) in labels.iter().enumerate() {
            if p == a || lp != la {
                continue;
            }
            if negatives.is_empty() {
                return Err(Error::Mining(format!(
                    "no negative available for anchor {a} (every sample has label {la})"
                )));
            }
            let negative = negatives[rng.gen_range(0..negatives.len())];
            triples.push(Triplet {
                anchor: a,
                positive: p,
                negative,
            });
        }
    }
    if triples.is_empty() {
        return Err(Error::Mining("batch contains no positive pair".into()));
    }
    Ok(TripletBatch { triples })
}
