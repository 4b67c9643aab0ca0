//! Synthetic person-like identities, augmentation, and mini-batch assembly.
//!
//! Each identity is a procedurally drawn figure (head, torso, legs) whose
//! colours, texture and proportions derive from the identity seed. Each
//! camera re-renders it under its own illumination, hue shift, pose offset,
//! background clutter and occluders. Pixels are quantised to 8 bits so that a
//! dataset exported to pixmaps reloads bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_pnm, write_pnm, ImageSample};
use crate::tensor::Tensor;

pub const CAMERAS: usize = 2;

/// Strength of each per-camera / per-image perturbation. All zero means the
/// two camera views of an identity are pixel-identical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    /// Hue rotation scale (fraction of a 60 degree turn).
    pub color_shift: f64,
    /// Relative illumination gain spread.
    pub illumination_gain: f64,
    /// Probability of an occluding bar per image.
    pub occlusion_prob: f64,
    /// Maximum horizontal figure offset in pixels.
    pub pose_offset: f64,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
    /// Probability of each of two distractor patches in the background.
    pub clutter: f64,
}

impl Distortion {
    pub fn none() -> Self {
        Distortion {
            color_shift: 0.0,
            illumination_gain: 0.0,
            occlusion_prob: 0.0,
            pose_offset: 0.0,
            noise: 0.0,
            clutter: 0.0,
        }
    }

    pub fn desk() -> Self {
        Distortion {
            color_shift: 0.15,
            illumination_gain: 0.15,
            occlusion_prob: 0.15,
            pose_offset: 2.0,
            noise: 0.02,
            clutter: 0.3,
        }
    }

    /// Heavier distortion used by the ablation direction checks.
    pub fn hardened() -> Self {
        Distortion {
            color_shift: 0.3,
            illumination_gain: 0.3,
            occlusion_prob: 0.4,
            pose_offset: 4.0,
            noise: 0.05,
            clutter: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_identities: usize,
    pub val_identities: usize,
    pub test_identities: usize,
    pub images_per_identity_per_camera: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
    pub distortion: Distortion,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_identities: 35,
            val_identities: 5,
            test_identities: 10,
            images_per_identity_per_camera: 6,
            image_height: 32,
            image_width: 32,
            seed: 0,
            distortion: Distortion::desk(),
        }
    }
}

impl DatasetConfig {
    pub fn hardened() -> Self {
        DatasetConfig {
            distortion: Distortion::hardened(),
            ..Self::default()
        }
    }

    pub fn train_identities(&self) -> usize {
        self.num_identities
            .saturating_sub(self.val_identities + self.test_identities)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Config("need at least 2 identities".into()));
        }
        if self.images_per_identity_per_camera < 1 {
            return Err(Error::Config("need at least 1 image per identity per camera".into()));
        }
        if self.val_identities + self.test_identities > self.num_identities {
            return Err(Error::Config("val + test identities exceed the total".into()));
        }
        if self.image_height < 16 || self.image_width < 12 {
            return Err(Error::Config("images must be at least 16x12 to draw a figure".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, identity: usize) -> Split {
        let train = self.train_identities();
        if identity < train {
            Split::Train
        } else if identity < train + self.val_identities {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ImageSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of distinct training identities (labels are `0..n`).
    pub fn train_identity_count(&self) -> usize {
        self.train.iter().map(|s| s.identity + 1).max().unwrap_or(0)
    }
}

fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 20);
    rng
}

#[derive(Debug, Clone)]
struct Figure {
    head: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    stripe: Option<([f64; 3], usize)>,
    head_radius: f64,
    torso_width: usize,
    torso_height: usize,
    leg_gap: usize,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

impl Figure {
    fn for_identity(seed: u64, identity: usize) -> Self {
        let mut rng = derived_rng(seed, 1, identity as u64);
        let head = random_color(&mut rng);
        let torso = random_color(&mut rng);
        let legs = random_color(&mut rng);
        let stripe = if rng.gen_bool(0.5) {
            Some((random_color(&mut rng), rng.gen_range(2..5)))
        } else {
            None
        };
        Figure {
            head,
            torso,
            legs,
            stripe,
            head_radius: rng.gen_range(2.5..4.0),
            torso_width: rng.gen_range(8..13),
            torso_height: rng.gen_range(9..13),
            leg_gap: rng.gen_range(1..3),
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn fill_rect(&mut self, y0: isize, x0: isize, h: usize, w: usize, color: [f64; 3]) {
        for y in y0.max(0)..(y0 + h as isize).min(self.h as isize) {
            for x in x0.max(0)..(x0 + w as isize).min(self.w as isize) {
                self.px[y as usize * self.w + x as usize] = color;
            }
        }
    }
}

/// Rotation about the grey axis by `angle` radians.
fn hue_rotate(c: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, co) = angle.sin_cos();
    let k = (1.0 - co) / 3.0;
    let r = s / 3f64.sqrt();
    let m = [
        [co + k, k - r, k + r],
        [k + r, co + k, k - r],
        [k - r, k + r, co + k],
    ];
    std::array::from_fn(|i| m[i][0] * c[0] + m[i][1] * c[1] + m[i][2] * c[2])
}

fn render(config: &DatasetConfig, identity: usize, camera: usize, index: usize) -> Tensor {
    let (h, w) = (config.image_height, config.image_width);
    let fig = Figure::for_identity(config.seed, identity);
    let dist = &config.distortion;
    let image_key = ((identity * CAMERAS + camera) * config.images_per_identity_per_camera + index) as u64;
    let mut rng = derived_rng(config.seed, 2, image_key);
    // camera 0 and camera 1 perturb in opposite directions
    let side = if camera == 0 { -1.0 } else { 1.0 };
    let mut jitter = || rng.gen_range(-1.0..1.0);
    let gain = 1.0 + dist.illumination_gain * (0.5 * side + 0.5 * jitter());
    let hue = dist.color_shift * std::f64::consts::FRAC_PI_3 * (0.5 * side + 0.5 * jitter());
    let offset = (dist.pose_offset * (0.5 * side + 0.5 * jitter())).round() as isize;
    let background = {
        let t = dist.clutter * 0.3;
        [0.5 + t * jitter(), 0.5 + t * jitter(), 0.5 + t * jitter()]
    };

    let mut canvas = Canvas {
        h,
        w,
        px: vec![background; h * w],
    };
    for _ in 0..2 {
        if dist.clutter > 0.0 && rng.gen_bool(dist.clutter.min(1.0)) {
            let ph = rng.gen_range(3..h / 3);
            let pw = rng.gen_range(2..w / 5);
            let y0 = rng.gen_range(0..h - ph) as isize;
            let x0 = if rng.gen_bool(0.5) { 0 } else { (w - pw) as isize };
            let color = random_color(&mut rng);
            canvas.fill_rect(y0, x0, ph, pw, color);
        }
    }

    let cx = (w / 2) as isize + offset;
    let top = (h / 16) as isize;
    let r = fig.head_radius;
    let head_cy = top as f64 + r;
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 + 0.5 - head_cy;
            let dx = x as f64 + 0.5 - cx as f64;
            if dx * dx + dy * dy <= r * r {
                canvas.px[y * w + x] = fig.head;
            }
        }
    }
    let torso_top = (head_cy + r).ceil() as isize;
    let torso_h = fig.torso_height.min(h / 2);
    let torso_x = cx - (fig.torso_width / 2) as isize;
    canvas.fill_rect(torso_top, torso_x, torso_h, fig.torso_width, fig.torso);
    if let Some((color, period)) = fig.stripe {
        let mut y = torso_top + 1;
        while y < torso_top + torso_h as isize {
            canvas.fill_rect(y, torso_x, 1, fig.torso_width, color);
            y += period as isize;
        }
    }
    let legs_top = torso_top + torso_h as isize;
    let legs_h = (h as isize - legs_top - (h / 32) as isize).max(1) as usize;
    let leg_w = (fig.torso_width - fig.leg_gap) / 2;
    canvas.fill_rect(legs_top, torso_x, legs_h, leg_w, fig.legs);
    canvas.fill_rect(legs_top, torso_x + (leg_w + fig.leg_gap) as isize, legs_h, leg_w, fig.legs);

    if dist.occlusion_prob > 0.0 && rng.gen_bool(dist.occlusion_prob.min(1.0)) {
        let color = random_color(&mut rng);
        if rng.gen_bool(0.5) {
            let bh = rng.gen_range(2..=h / 8);
            let y0 = rng.gen_range(0..h - bh) as isize;
            canvas.fill_rect(y0, 0, bh, w, color);
        } else {
            let bw = rng.gen_range(2..=w / 8);
            let x0 = rng.gen_range(0..w - bw) as isize;
            canvas.fill_rect(0, x0, h, bw, color);
        }
    }

    let mut data = Vec::with_capacity(h * w * 3);
    for p in &canvas.px {
        let c = hue_rotate(*p, hue);
        for v in c {
            let noisy = v * gain + dist.noise * rng.gen_range(-1.0..1.0);
            data.push(quantize(noisy));
        }
    }
    Tensor::new(vec![h, w, 3], data).expect("canvas shape")
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders every identity under both cameras. Deterministic in the config.
pub fn generate_synthetic_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mut ds = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for identity in 0..config.num_identities {
        for camera in 0..CAMERAS {
            for index in 0..config.images_per_identity_per_camera {
                let sample = ImageSample {
                    pixels: render(config, identity, camera, index),
                    identity,
                    camera,
                };
                match config.split_of(identity) {
                    Split::Train => ds.train.push(sample),
                    Split::Val => ds.val.push(sample),
                    Split::Test => ds.test.push(sample),
                }
            }
        }
    }
    Ok(ds)
}

/// Integer pixel shift of a crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Translation {
    pub dx: isize,
    pub dy: isize,
}

fn max_shift(dim: usize) -> isize {
    (0.05 * dim as f64).floor() as isize
}

fn check_augmentable(image: &ImageSample) -> Result<()> {
    if image.height() < 20 || image.width() < 20 {
        return Err(Error::Usage(format!(
            "augmentation needs at least 20x20 images, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// Uniform integer shift in `[-floor(0.05 w), floor(0.05 w)] x [-floor(0.05 h), floor(0.05 h)]`.
pub fn sample_translation<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Translation {
    let (mx, my) = (max_shift(width), max_shift(height));
    Translation {
        dx: rng.gen_range(-mx..=mx),
        dy: rng.gen_range(-my..=my),
    }
}

/// Same-size crop shifted by `t`; out-of-frame pixels replicate the edge.
pub fn translate(image: &ImageSample, t: Translation) -> ImageSample {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let src = image.pixels.data();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let sy = (y as isize + t.dy).clamp(0, h as isize - 1) as usize;
        for x in 0..w {
            let sx = (x as isize + t.dx).clamp(0, w as isize - 1) as usize;
            data.extend_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    ImageSample {
        pixels: Tensor::new(vec![h, w, c], data).expect("same shape"),
        ..image.clone()
    }
}

pub fn flip_horizontal(image: &ImageSample) -> ImageSample {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let src = image.pixels.data();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in (0..w).rev() {
            data.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    ImageSample {
        pixels: Tensor::new(vec![h, w, c], data).expect("same shape"),
        ..image.clone()
    }
}

/// Ten random shifted crops followed by the mirror of each: 20 samples.
pub fn augment<R: Rng + ?Sized>(image: &ImageSample, rng: &mut R) -> Result<Vec<ImageSample>> {
    check_augmentable(image)?;
    let crops: Vec<ImageSample> = (0..10)
        .map(|_| translate(image, sample_translation(image.width(), image.height(), rng)))
        .collect();
    let mirrors: Vec<ImageSample> = crops.iter().map(flip_horizontal).collect();
    Ok(crops.into_iter().chain(mirrors).collect())
}

/// One random draw from the augmentation set: a shifted crop, mirrored with
/// probability one half.
pub fn augment_once<R: Rng + ?Sized>(image: &ImageSample, rng: &mut R) -> Result<ImageSample> {
    check_augmentable(image)?;
    let crop = translate(image, sample_translation(image.width(), image.height(), rng));
    Ok(if rng.gen_bool(0.5) { flip_horizontal(&crop) } else { crop })
}

fn group_by_identity(samples: &[ImageSample]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.identity).or_default().push(i);
    }
    groups
}

/// Identity-balanced batch: `identities_per_batch` identities with
/// `batch_size / identities_per_batch` distinct samples each.
pub fn build_minibatch<R: Rng + ?Sized>(
    samples: &[ImageSample],
    batch_size: usize,
    identities_per_batch: usize,
    augment_samples: bool,
    rng: &mut R,
) -> Result<Vec<ImageSample>> {
    if identities_per_batch < 2 || batch_size % identities_per_batch != 0 {
        return Err(Error::Usage(format!(
            "cannot split a batch of {batch_size} over {identities_per_batch} identities"
        )));
    }
    let per_identity = batch_size / identities_per_batch;
    if per_identity < 2 {
        return Err(Error::Usage("each identity needs at least 2 samples per batch".into()));
    }
    let eligible: Vec<(usize, Vec<usize>)> = group_by_identity(samples)
        .into_iter()
        .filter(|(_, members)| members.len() >= per_identity)
        .collect();
    if eligible.len() < identities_per_batch {
        return Err(Error::Usage(format!(
            "only {} identities have {per_identity} samples, need {identities_per_batch}",
            eligible.len()
        )));
    }
    let chosen = rand::seq::index::sample(rng, eligible.len(), identities_per_batch).into_vec();
    let mut batch = Vec::with_capacity(batch_size);
    for idx in chosen {
        let members = &eligible[idx].1;
        let picks = rand::seq::index::sample(rng, members.len(), per_identity).into_vec();
        for p in picks {
            let s = &samples[members[p]];
            batch.push(if augment_samples { augment_once(s, rng)? } else { s.clone() });
        }
    }
    Ok(batch)
}

/// Dataset order for the label-shuffle mode: each round shuffles the identity
/// order and lists every identity's samples contiguously.
pub fn label_shuffled_order<R: Rng + ?Sized>(samples: &[ImageSample], rounds: usize, rng: &mut R) -> Vec<usize> {
    let groups: Vec<Vec<usize>> = group_by_identity(samples).into_values().collect();
    let mut order = Vec::with_capacity(samples.len() * rounds);
    for _ in 0..rounds {
        let mut ids: Vec<usize> = (0..groups.len()).collect();
        ids.shuffle(rng);
        for g in ids {
            let mut members = groups[g].clone();
            members.shuffle(rng);
            order.extend(members);
        }
    }
    order
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub file: String,
    pub identity: usize,
    pub camera: usize,
    pub split: String,
}

fn file_name(split: Split, sample: &ImageSample, n: usize) -> String {
    format!("{}_{:04}_c{}_{:03}.ppm", split.name(), sample.identity, sample.camera, n)
}

/// Writes `images/*.ppm` and `manifest.csv` under `dir`.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<Vec<ManifestRow>> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(images.display().to_string(), e))?;
    let mut rows = Vec::with_capacity(dataset.len());
    for split in [Split::Train, Split::Val, Split::Test] {
        for (n, s) in dataset.split(split).iter().enumerate() {
            let file = format!("images/{}", file_name(split, s, n));
            write_pnm(&dir.join(&file), &s.pixels)?;
            rows.push(ManifestRow {
                file,
                identity: s.identity,
                camera: s.camera,
                split: split.name().into(),
            });
        }
    }
    let path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(rows)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join("manifest.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Loads a dataset written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let mut ds = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for row in read_manifest(dir)? {
        let sample = ImageSample {
            pixels: read_pnm(&dir.join(&row.file))?,
            identity: row.identity,
            camera: row.camera,
        };
        match Split::parse(&row.split)? {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests;
