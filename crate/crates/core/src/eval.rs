//! Ranking evaluation: Euclidean distance matrices, CMC curves and mAP.
//!
//! Ranking always sorts gallery entries by `(distance, gallery index)`, so
//! exact ties resolve to the lower gallery index.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Embedding;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::image::ImageSample;
use crate::model::CanModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub identity: usize,
    pub camera: usize,
}

impl From<&ImageSample> for Label {
    fn from(s: &ImageSample) -> Self {
        Label {
            identity: s.identity,
            camera: s.camera,
        }
    }
}

/// `Q x G` unsquared L2 distances with the labels of both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `values[i * cols + j] = |q_i - g_j|`.
    pub values: Vec<f64>,
    pub query_labels: Vec<Label>,
    pub gallery_labels: Vec<Label>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn with_labels(mut self, queries: Vec<Label>, gallery: Vec<Label>) -> Result<Self> {
        if queries.len() != self.rows || gallery.len() != self.cols {
            return Err(Error::Dimension(format!(
                "{}x{} labels for a {}x{} distance matrix",
                queries.len(),
                gallery.len(),
                self.rows,
                self.cols
            )));
        }
        self.query_labels = queries;
        self.gallery_labels = gallery;
        Ok(self)
    }

    fn check_labels(&self) -> Result<()> {
        if self.query_labels.len() != self.rows || self.gallery_labels.len() != self.cols {
            return Err(Error::Protocol("distance matrix has no identity labels".into()));
        }
        Ok(())
    }
}

pub fn distance_matrix(queries: &[Embedding], gallery: &[Embedding]) -> Result<DistanceMatrix> {
    let dim = queries.first().or(gallery.first()).map(|e| e.dim()).unwrap_or(0);
    if let Some(e) = queries.iter().chain(gallery).find(|e| e.dim() != dim) {
        return Err(Error::Dimension(format!(
            "embedding dimensions differ: {} vs {dim}",
            e.dim()
        )));
    }
    let mut values = Vec::with_capacity(queries.len() * gallery.len());
    for q in queries {
        for g in gallery {
            let sq: f64 = q
                .values
                .data()
                .iter()
                .zip(g.values.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            values.push(sq.sqrt());
        }
    }
    Ok(DistanceMatrix {
        rows: queries.len(),
        cols: gallery.len(),
        values,
        query_labels: Vec::new(),
        gallery_labels: Vec::new(),
    })
}

/// Entry `m - 1` is the rank-`m` accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    pub accuracy_at_rank: Vec<f64>,
}

impl CmcCurve {
    /// Rank-`m` accuracy; ranks past the gallery size saturate.
    pub fn rank(&self, m: usize) -> f64 {
        let n = self.accuracy_at_rank.len();
        if n == 0 {
            return 0.0;
        }
        self.accuracy_at_rank[m.clamp(1, n) - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmcSetting {
    /// One randomly chosen gallery entry per identity, redrawn `repeats`
    /// times and averaged.
    SingleShot { repeats: usize, seed: u64 },
    /// Whole gallery; a query's rank is that of its first true match.
    FirstMatch,
}

impl CmcSetting {
    pub fn standard(seed: u64) -> Self {
        CmcSetting::SingleShot { repeats: 10, seed }
    }
}

/// `(d_a, a) < (d_b, b)` in the ranking order.
fn precedes(da: f64, a: usize, db: f64, b: usize) -> bool {
    da < db || (da == db && a < b)
}

/// 1-based rank of the best-placed match among `candidates`.
fn first_match_rank(row: &[f64], candidates: &[usize], is_match: impl Fn(usize) -> bool) -> Option<usize> {
    let best = candidates
        .iter()
        .copied()
        .filter(|&j| is_match(j))
        .reduce(|a, b| if precedes(row[b], b, row[a], a) { b } else { a })?;
    Some(1 + candidates.iter().filter(|&&j| precedes(row[j], j, row[best], best)).count())
}

fn check_queries_present(dist: &DistanceMatrix) -> Result<()> {
    for q in &dist.query_labels {
        if !dist.gallery_labels.iter().any(|g| g.identity == q.identity) {
            return Err(Error::Protocol(format!(
                "query identity {} is absent from the gallery",
                q.identity
            )));
        }
    }
    Ok(())
}

fn curve_from_ranks(ranks: &[usize], len: usize) -> Vec<f64> {
    let mut hist = vec![0usize; len];
    for &r in ranks {
        hist[r - 1] += 1;
    }
    let n = ranks.len() as f64;
    let mut acc = 0;
    hist.iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect()
}

/// Gallery indices kept in each single-shot repeat: one uniformly drawn
/// entry per identity, sorted ascending.
pub fn single_shot_draws(gallery_labels: &[Label], repeats: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, g) in gallery_labels.iter().enumerate() {
        by_id.entry(g.identity).or_default().push(j);
    }
    (0..repeats)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut chosen: Vec<usize> = by_id
                .values()
                .map(|members| members[rng.gen_range(0..members.len())])
                .collect();
            chosen.sort_unstable();
            chosen
        })
        .collect()
}

pub fn cmc(dist: &DistanceMatrix, setting: CmcSetting) -> Result<CmcCurve> {
    dist.check_labels()?;
    if dist.rows == 0 {
        return Err(Error::Protocol("no queries to rank".into()));
    }
    check_queries_present(dist)?;
    let ranks_for = |candidates: &[usize]| -> Vec<usize> {
        (0..dist.rows)
            .map(|i| {
                let id = dist.query_labels[i].identity;
                first_match_rank(dist.row(i), candidates, |j| dist.gallery_labels[j].identity == id)
                    .expect("presence checked")
            })
            .collect()
    };
    match setting {
        CmcSetting::FirstMatch => {
            let all: Vec<usize> = (0..dist.cols).collect();
            Ok(CmcCurve {
                accuracy_at_rank: curve_from_ranks(&ranks_for(&all), dist.cols),
            })
        }
        CmcSetting::SingleShot { repeats, seed } => {
            if repeats == 0 {
                return Err(Error::Usage("single-shot evaluation needs at least one repeat".into()));
            }
            let draws = single_shot_draws(&dist.gallery_labels, repeats, seed);
            let len = draws.first().map_or(0, Vec::len);
            let mut total = vec![0.0; len];
            for chosen in &draws {
                for (t, c) in total.iter_mut().zip(curve_from_ranks(&ranks_for(chosen), len)) {
                    *t += c;
                }
            }
            Ok(CmcCurve {
                accuracy_at_rank: total.into_iter().map(|t| t / repeats as f64).collect(),
            })
        }
    }
}

fn average_precision(dist: &DistanceMatrix, i: usize, cross_camera: bool) -> Result<f64> {
    let q = dist.query_labels[i];
    let row = dist.row(i);
    let mut ranked: Vec<usize> = (0..dist.cols)
        .filter(|&j| {
            let g = dist.gallery_labels[j];
            !(cross_camera && g.identity == q.identity && g.camera == q.camera)
        })
        .collect();
    ranked.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let mut hits = 0;
    let mut sum = 0.0;
    for (pos, &j) in ranked.iter().enumerate() {
        if dist.gallery_labels[j].identity == q.identity {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Protocol(format!(
            "query {i} (identity {}) has no {}matches in the gallery",
            q.identity,
            if cross_camera { "cross-camera " } else { "" }
        )));
    }
    Ok(sum / hits as f64)
}

fn map_with(dist: &DistanceMatrix, cross_camera: bool) -> Result<f64> {
    dist.check_labels()?;
    if dist.rows == 0 {
        return Err(Error::Protocol("no queries to rank".into()));
    }
    let mut total = 0.0;
    for i in 0..dist.rows {
        total += average_precision(dist, i, cross_camera)?;
    }
    Ok(total / dist.rows as f64)
}

/// Mean average precision with cross-camera ground truth: gallery entries
/// sharing both identity and camera with the query are dropped entirely.
pub fn mean_average_precision(dist: &DistanceMatrix) -> Result<f64> {
    map_with(dist, true)
}

/// Mean average precision over every same-identity gallery entry.
pub fn mean_average_precision_all(dist: &DistanceMatrix) -> Result<f64> {
    map_with(dist, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
    pub queries: usize,
    pub gallery: usize,
    pub curve: CmcCurve,
}

impl EvalReport {
    fn from_parts(dist: &DistanceMatrix, curve: CmcCurve, map: f64) -> Self {
        EvalReport {
            rank1: curve.rank(1),
            rank5: curve.rank(5),
            rank10: curve.rank(10),
            rank20: curve.rank(20),
            map,
            queries: dist.rows,
            gallery: dist.cols,
            curve,
        }
    }
}

/// Splits a test set into camera-0 probes and camera-1 gallery.
pub fn probe_gallery(samples: &[ImageSample]) -> (Vec<ImageSample>, Vec<ImageSample>) {
    samples.iter().cloned().partition(|s| s.camera == 0)
}

pub fn evaluate_embeddings(
    queries: &[Embedding],
    query_labels: Vec<Label>,
    gallery: &[Embedding],
    gallery_labels: Vec<Label>,
    setting: CmcSetting,
) -> Result<EvalReport> {
    let dist = distance_matrix(queries, gallery)?.with_labels(query_labels, gallery_labels)?;
    let curve = cmc(&dist, setting)?;
    let map = match setting {
        CmcSetting::FirstMatch => mean_average_precision_all(&dist)?,
        CmcSetting::SingleShot { .. } => mean_average_precision(&dist)?,
    };
    Ok(EvalReport::from_parts(&dist, curve, map))
}

/// Embeds both sides with `model` and evaluates.
pub fn evaluate_model(
    model: &CanModel,
    probes: &[ImageSample],
    gallery: &[ImageSample],
    setting: CmcSetting,
    exec: Execution,
) -> Result<EvalReport> {
    let q = model.embed_all(probes, exec)?;
    let g = model.embed_all(gallery, exec)?;
    evaluate_embeddings(
        &q,
        probes.iter().map(Label::from).collect(),
        &g,
        gallery.iter().map(Label::from).collect(),
        setting,
    )
}

/// Cross-camera evaluation of a split: camera 0 probes against camera 1.
pub fn evaluate_split(model: &CanModel, samples: &[ImageSample], seed: u64, exec: Execution) -> Result<EvalReport> {
    let (probes, gallery) = probe_gallery(samples);
    evaluate_model(model, &probes, &gallery, CmcSetting::standard(seed), exec)
}

pub fn write_report_csv(path: &Path, rows: &[(String, EvalReport)]) -> Result<()> {
    let mut out = String::from("run,rank1,rank5,rank10,rank20,mAP,queries,gallery\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            r.rank1, r.rank5, r.rank10, r.rank20, r.map, r.queries, r.gallery
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_curve_csv(path: &Path, curve: &CmcCurve) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = String::from("rank,accuracy\n");
    for (m, a) in curve.accuracy_at_rank.iter().enumerate() {
        out.push_str(&format!("{},{a}\n", m + 1));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests;
