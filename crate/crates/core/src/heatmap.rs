//! Attention heatmap export: one grayscale map and one overlay per glimpse.

use std::path::Path;

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::image::{write_pnm, ImageSample};
use crate::model::CanModel;
use crate::tensor::Tensor;

/// Nearest-neighbour upsampling of a row-major `k x k` map to `h x w x 1`,
/// divided by its maximum.
pub fn upsample(weights: &[f64], k: usize, h: usize, w: usize) -> Result<Tensor> {
    if weights.len() != k * k || k == 0 {
        return Err(Error::Dimension(format!(
            "attention map of {} weights is not {k}x{k}",
            weights.len()
        )));
    }
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 || !max.is_finite() {
        return Err(Error::Degenerate(format!("attention map maximum {max}")));
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(weights[(y * k / h) * k + x * k / w] / max);
        }
    }
    Tensor::new(vec![h, w, 1], out)
}

/// Image darkened where attention is low and tinted red where it is high.
pub fn overlay(image: &Tensor, heat: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || heat.shape() != [s[0], s[1], 1] {
        return Err(Error::Dimension(format!(
            "cannot overlay heat {:?} on image {:?}",
            heat.shape(),
            s
        )));
    }
    let mut out = image.clone();
    for (px, &m) in out.data_mut().chunks_mut(3).zip(heat.data()) {
        for (c, v) in px.iter_mut().enumerate() {
            let tint = if c == 0 { m } else { 0.0 };
            *v = 0.5 * *v * (0.3 + 0.7 * m) + 0.5 * tint;
        }
    }
    Ok(out)
}

/// One exported glimpse map.
#[derive(Debug, Clone, PartialEq)]
pub struct GlimpseMap {
    pub image: String,
    pub map: AttentionMap,
    pub heat: Tensor,
}

/// Writes `{name}_t{step}.pgm`, `{name}_t{step}_overlay.ppm` and a raw
/// `attention.csv` (image, step, cell, weight) for every image.
pub fn export_attention_maps(
    model: &CanModel,
    images: &[(String, ImageSample)],
    out_dir: &Path,
) -> Result<Vec<GlimpseMap>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let k = model.config.backbone.k;
    let mut maps = Vec::new();
    let mut csv = String::from("image,step,cell,weight\n");
    for (name, sample) in images {
        let trace = model.glimpse_trace(sample)?;
        if trace.attention_maps.is_empty() {
            return Err(Error::Usage(format!(
                "ablation '{}' produces no attention maps",
                model.config.ablation
            )));
        }
        for map in trace.attention_maps {
            let heat = upsample(map.weights.data(), k, sample.height(), sample.width())?;
            let t = map.step_index;
            write_pnm(&out_dir.join(format!("{name}_t{t}.pgm")), &heat)?;
            write_pnm(
                &out_dir.join(format!("{name}_t{t}_overlay.ppm")),
                &overlay(&sample.pixels, &heat)?,
            )?;
            for (cell, w) in map.weights.data().iter().enumerate() {
                csv.push_str(&format!("{name},{t},{cell},{w:e}\n"));
            }
            maps.push(GlimpseMap {
                image: name.clone(),
                map,
                heat,
            });
        }
    }
    let path = out_dir.join("attention.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(maps)
}
