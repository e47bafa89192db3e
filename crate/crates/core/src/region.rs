//! Region features from dense grids and detector score fusion.
//!
//! Boxes use normalized image coordinates. Patch `(i, j)` of an `H×W` grid has
//! its center at `((j + 0.5) / W, (i + 0.5) / H)`, so a normalized `x` maps to
//! the continuous column coordinate `x·W − 0.5`.

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, softmax_row, Tensor};

/// Axis-aligned box in normalized `[0, 1]` coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite())
            && 0.0 <= x1
            && x1 < x2
            && x2 <= 1.0
            && 0.0 <= y1
            && y1 < y2
            && y2 <= 1.0;
        if !ok {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn full() -> Self {
        Self { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiConfig {
    pub out_h: usize,
    pub out_w: usize,
    /// Bilinear samples per bin along each axis.
    pub samples: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self { out_h: 1, out_w: 1, samples: 2 }
    }
}

/// Sparse bilinear weights per output bin: `(patch index, weight)` pairs whose
/// weighted sum of grid rows gives the bin value.
pub fn roi_weights(height: usize, width: usize, bbox: &BBox, cfg: &RoiConfig) -> Vec<Vec<(usize, f64)>> {
    let [x1, y1, x2, y2] = bbox.coords();
    let gx1 = x1 * width as f64 - 0.5;
    let gy1 = y1 * height as f64 - 0.5;
    let bin_w = (x2 - x1) * width as f64 / cfg.out_w as f64;
    let bin_h = (y2 - y1) * height as f64 / cfg.out_h as f64;
    let s = cfg.samples;
    let per_sample = 1.0 / (s * s) as f64;

    let mut bins = Vec::with_capacity(cfg.out_h * cfg.out_w);
    for by in 0..cfg.out_h {
        for bx in 0..cfg.out_w {
            let mut acc: Vec<(usize, f64)> = Vec::new();
            for sy in 0..s {
                let y = gy1 + by as f64 * bin_h + (sy as f64 + 0.5) * bin_h / s as f64;
                for sx in 0..s {
                    let x = gx1 + bx as f64 * bin_w + (sx as f64 + 0.5) * bin_w / s as f64;
                    for (idx, w) in bilinear_taps(height, width, y, x) {
                        push_weight(&mut acc, idx, w * per_sample);
                    }
                }
            }
            bins.push(acc);
        }
    }
    bins
}

fn push_weight(acc: &mut Vec<(usize, f64)>, idx: usize, w: f64) {
    if w == 0.0 {
        return;
    }
    match acc.iter_mut().find(|(i, _)| *i == idx) {
        Some((_, v)) => *v += w,
        None => acc.push((idx, w)),
    }
}

/// Four bilinear taps at continuous grid coordinate `(y, x)`, clamped to the grid.
fn bilinear_taps(height: usize, width: usize, y: f64, x: f64) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (height - 1) as f64);
    let x = x.clamp(0.0, (width - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    [
        (y0 * width + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * width + x1, (1.0 - ly) * lx),
        (y1 * width + x0, ly * (1.0 - lx)),
        (y1 * width + x1, ly * lx),
    ]
}

/// `out_h × out_w × D` region features; each bin averages `samples²` bilinear
/// samples taken at regular offsets inside the bin.
pub fn roi_align(grid: &FeatureGrid, bbox: &BBox, cfg: &RoiConfig) -> Result<Tensor> {
    if cfg.out_h == 0 || cfg.out_w == 0 || cfg.samples == 0 {
        return Err(Error::Config("RoIAlign bins and samples must be positive".into()));
    }
    let d = grid.dim();
    let weights = roi_weights(grid.height, grid.width, bbox, cfg);
    let mut data = Vec::with_capacity(weights.len() * d);
    for bin in &weights {
        data.extend(gather(&grid.features, bin));
    }
    Ok(Tensor::from_parts(vec![cfg.out_h, cfg.out_w, d], data))
}

fn gather(features: &Tensor, taps: &[(usize, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; features.cols()];
    for &(idx, w) in taps {
        for (o, &f) in out.iter_mut().zip(features.row(idx)) {
            *o += w * f;
        }
    }
    out
}

/// Weights of the mean over all RoIAlign bins.
pub fn region_pool_weights(height: usize, width: usize, bbox: &BBox, cfg: &RoiConfig) -> Vec<(usize, f64)> {
    let bins = roi_weights(height, width, bbox, cfg);
    let inv = 1.0 / bins.len() as f64;
    let mut acc = Vec::new();
    for bin in bins {
        for (idx, w) in bin {
            push_weight(&mut acc, idx, w * inv);
        }
    }
    acc
}

/// Mean-pooled RoIAlign feature before normalization.
pub fn region_pooled(grid: &FeatureGrid, bbox: &BBox, cfg: &RoiConfig) -> Vec<f64> {
    gather(&grid.features, &region_pool_weights(grid.height, grid.width, bbox, cfg))
}

/// Scatters the gradient of a pooled region feature back onto the grid rows.
pub fn region_pooled_backward(taps: &[(usize, f64)], d_pooled: &[f64], d_grid: &mut Tensor) {
    for &(idx, w) in taps {
        for (g, &d) in d_grid.row_mut(idx).iter_mut().zip(d_pooled) {
            *g += w * d;
        }
    }
}

/// Unit-norm region embedding: default RoIAlign (1×1 bin, 2×2 samples),
/// mean-pooled, then normalized.
pub fn region_embedding(grid: &FeatureGrid, bbox: &BBox) -> Result<Vec<f64>> {
    let cfg = RoiConfig::default();
    let t = roi_align(grid, bbox, &cfg)?;
    let d = grid.dim();
    let bins = t.len() / d;
    let mut pooled = vec![0.0; d];
    for b in 0..bins {
        for (p, &v) in pooled.iter_mut().zip(&t.data()[b * d..(b + 1) * d]) {
            *p += v / bins as f64;
        }
    }
    l2_normalize(&pooled)
}

// ---------------------------------------------------------------------------
// Detector fusion

/// A detector output: one box with its predicted category and confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
    pub category: usize,
}

/// Per-category detector confidences and alignment similarities for one box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidences: Vec<f64>,
    pub sims: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub fused: Vec<f64>,
    pub category: usize,
    pub confidence: f64,
}

impl FusedBox {
    pub fn detection(&self) -> Detection {
        Detection { bbox: self.bbox, confidence: self.confidence, category: self.category }
    }
}

pub const DEFAULT_FUSION_ALPHA: f64 = 0.5;
pub const DEFAULT_FUSION_SCALE: f64 = 10.0;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Weighted multiplicative fusion `conf_c^α · p_c^(1−α)` with
/// `p = softmax(scale · sims)`.
pub fn ovd_fuse(input: &ScoredBox, alpha: f64, scale: f64) -> Result<FusedBox> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if input.confidences.len() != input.sims.len() || input.sims.is_empty() {
        return Err(Error::Shape(format!(
            "{} confidences vs {} similarities",
            input.confidences.len(),
            input.sims.len()
        )));
    }
    if let Some(&c) = input.confidences.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
        return Err(Error::InvalidConfidence(c));
    }
    if input.sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("similarity".into()));
    }
    let p = softmax_row(&input.sims, scale);
    let fused: Vec<f64> = input
        .confidences
        .iter()
        .zip(&p)
        .map(|(c, pc)| c.powf(alpha) * pc.powf(1.0 - alpha))
        .collect();
    let category = argmax(&fused);
    Ok(FusedBox { bbox: input.bbox, confidence: fused[category], category, fused })
}
