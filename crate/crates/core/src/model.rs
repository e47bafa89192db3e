//! Trainable parameters and the batched objective.
//!
//! A step is split into three phases so it can be sharded:
//! [`Model::encode_shard`] runs the encoders over a slice of the batch,
//! [`objective`] evaluates all losses on the gathered embeddings of the whole
//! batch, and [`Model::backward_shard`] maps the embedding gradients of the
//! shard's own samples back onto parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{
    select_resolution_bucket, EncoderConfig, ImageEncoderParams, ImageForward, TextEncoderParams, TextForward,
};
use crate::error::{Error, Result};
use crate::losses::{
    cmr_loss, dual_caption_global_loss, fgt_batch_loss, fgv_regional_loss, tic_loss, tic_select_negatives,
    total_loss, LossComponents, LossWeights, MarginStats, SigmoidLossParams, Stage, TicReduction, HARD_NEGATIVES,
    KEY_BIAS, KEY_LOG_SCALE,
};
use crate::numerics::{
    dot, finite_diff_check, l2_normalize_backward, norm, FdOptions, GradPair, ParamMap, Tensor, ZERO_NORM_EPS,
};
use crate::region::{region_pool_weights, region_pooled_backward, BBox, RoiConfig};
use crate::synthdata::{generate_corpus, max_token_id, Sample, SynthConfig};

pub const PARAM_LOG_SCALE: &str = "loss.log_scale";
pub const PARAM_BIAS: &str = "loss.bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub roi: RoiConfig,
    pub init_log_scale: f64,
    pub init_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = SigmoidLossParams::default();
        Self {
            encoder: EncoderConfig::default(),
            roi: RoiConfig::default(),
            init_log_scale: s.log_scale,
            init_bias: s.bias,
        }
    }
}

impl ModelConfig {
    /// Takes patch width and vocabulary size from the corpus.
    pub fn fit_corpus(mut self, corpus: &[Sample]) -> Result<Self> {
        let first = corpus.first().ok_or_else(|| Error::Config("empty corpus".into()))?;
        self.encoder.patch_dim = first.image.first().map_or(0, Vec::len);
        self.encoder.vocab_size = self.encoder.vocab_size.max(max_token_id(corpus) as usize + 1);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.roi.out_h == 0 || self.roi.out_w == 0 || self.roi.samples == 0 {
            return Err(Error::Config("RoIAlign output size and samples must be positive".into()));
        }
        if !self.init_log_scale.is_finite() || !self.init_bias.is_finite() {
            return Err(Error::Config("initial logit scale and bias must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub image: ImageEncoderParams,
    pub text: TextEncoderParams,
    pub log_scale: Tensor,
    pub bias: Tensor,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = ImageEncoderParams::init(&config.encoder, &mut rng);
        let text = TextEncoderParams::init(&config.encoder, &mut rng);
        Ok(Self {
            log_scale: Tensor::scalar(config.init_log_scale),
            bias: Tensor::scalar(config.init_bias),
            image,
            text,
            config,
        })
    }

    /// Same structure with every tensor zero; used as a gradient accumulator.
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            image: ImageEncoderParams::zeros(&config.encoder),
            text: TextEncoderParams::zeros(&config.encoder),
            log_scale: Tensor::scalar(0.0),
            bias: Tensor::scalar(0.0),
            config: config.clone(),
        }
    }

    pub fn sigmoid_params(&self) -> SigmoidLossParams {
        SigmoidLossParams { log_scale: self.log_scale.data()[0], bias: self.bias.data()[0] }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.image.named_tensors();
        out.extend(self.text.named_tensors());
        out.push((PARAM_LOG_SCALE.into(), &self.log_scale));
        out.push((PARAM_BIAS.into(), &self.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.image.named_tensors_mut();
        out.extend(self.text.named_tensors_mut());
        out.push((PARAM_LOG_SCALE.into(), &mut self.log_scale));
        out.push((PARAM_BIAS.into(), &mut self.bias));
        out
    }

    pub fn params(&self) -> ParamMap {
        self.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Overwrites every parameter; names and shapes must match exactly.
    pub fn set_params(&mut self, params: &ParamMap) -> Result<()> {
        let mut slots = self.named_tensors_mut();
        if slots.len() != params.len() {
            return Err(Error::Shape(format!("{} tensors given, model has {}", params.len(), slots.len())));
        }
        for (name, slot) in slots.iter_mut() {
            let src = params
                .get(name.as_str())
                .ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))?;
            if src.shape() != slot.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            **slot = src.clone();
        }
        Ok(())
    }

    pub fn with_params(&self, params: &ParamMap) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    /// SHA-256 over names, shapes and little-endian values of all parameters.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        hash_params(&mut h, &self.named_tensors());
        hex(&h.finalize())
    }

    // -----------------------------------------------------------------------
    // Inference helpers

    fn image_forward(&self, sample: &Sample, side: usize) -> Result<ImageForward> {
        let mut grid = sample.patch_grid()?;
        if grid.height != side {
            grid = grid.resize_nearest(side);
        }
        self.image.forward(&grid, &self.config.encoder)
    }

    /// Patch-grid side of the bucket chosen for `samples`.
    pub fn batch_grid_side(&self, samples: &[&Sample]) -> Result<usize> {
        let cfg = &self.config.encoder;
        let mut max_side = 0u32;
        for s in samples {
            let side = s
                .grid_side()
                .ok_or_else(|| Error::Shape(format!("{} patches do not form a square grid", s.image.len())))?;
            max_side = max_side.max(side as u32 * cfg.patch_pixels);
        }
        Ok(cfg.grid_side(select_resolution_bucket(max_side, &cfg.buckets)))
    }

    pub fn embed_image(&self, sample: &Sample) -> Result<Vec<f64>> {
        let side = self.batch_grid_side(&[sample])?;
        Ok(Unit::of(&self.image_forward(sample, side)?.pooled)?.unit)
    }

    pub fn embed_text(&self, ids: &[u32]) -> Result<Vec<f64>> {
        Ok(Unit::of(&self.text.forward(ids)?.pooled)?.unit)
    }

    /// Unit region embeddings for `boxes`, sharing one image forward pass.
    pub fn embed_regions(&self, sample: &Sample, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
        let side = self.batch_grid_side(&[sample])?;
        let fwd = self.image_forward(sample, side)?;
        boxes
            .iter()
            .map(|b| Ok(self.region_unit(&fwd, b)?.1.unit))
            .collect()
    }

    fn region_unit(&self, fwd: &ImageForward, bbox: &BBox) -> Result<(Vec<(usize, f64)>, Unit)> {
        let grid = &fwd.dense;
        let taps = region_pool_weights(grid.height, grid.width, bbox, &self.config.roi);
        let mut pooled = vec![0.0; grid.dim()];
        for &(idx, w) in &taps {
            for (p, &f) in pooled.iter_mut().zip(grid.features.row(idx)) {
                *p += w * f;
            }
        }
        Ok((taps, Unit::of(&pooled)?))
    }

    // -----------------------------------------------------------------------
    // Sharded training pieces

    /// Forward pass over one shard. Stage 1 skips region and phrase encoding.
    pub fn encode_shard(&self, samples: &[&Sample], stage: Stage, grid_side: usize) -> Result<ShardForward> {
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let image = self.image_forward(s, grid_side)?;
            let img = Unit::of(&image.pooled)?;
            let short = self.text_unit(&s.short_caption)?;
            let long = self.text_unit(&s.long_caption)?;
            let mut regions = Vec::new();
            if stage == Stage::Two {
                for r in &s.regions {
                    if r.hard_negatives.len() != HARD_NEGATIVES {
                        return Err(Error::BadNegativeCount { expected: HARD_NEGATIVES, got: r.hard_negatives.len() });
                    }
                    let (taps, unit) = self.region_unit(&image, &r.bbox)?;
                    let phrase = self.text_unit(&r.phrase)?;
                    let negatives = r.hard_negatives.iter().map(|n| self.text_unit(n)).collect::<Result<_>>()?;
                    regions.push(RegionForward { taps, unit, phrase, negatives });
                }
            }
            out.push(SampleForward { image, img, short, long, regions });
        }
        Ok(ShardForward { samples: out, dim: self.config.encoder.embed_dim })
    }

    fn text_unit(&self, ids: &[u32]) -> Result<Encoded<TextForward>> {
        let fwd = self.text.forward(ids)?;
        let u = Unit::of(&fwd.pooled)?;
        Ok(Encoded { fwd, u })
    }

    /// Accumulates parameter gradients for the shard's samples into `grads`.
    /// `offsets` locates the shard inside the gathered batch.
    pub fn backward_shard(&self, fwd: &ShardForward, d: &GradPair, offsets: ShardOffsets, grads: &mut Model) {
        let dim = fwd.dim;
        let row = |key: &str, i: usize| -> Option<&[f64]> { d.grad(key).map(|t| t.row(i)) };
        let mut r_idx = offsets.regions;
        for (i, s) in fwd.samples.iter().enumerate() {
            let gi = offsets.samples + i;
            let d_pooled = row("img", gi).map(|g| s.img.backward(g));
            let mut d_grid = None;
            if !s.regions.is_empty() {
                let mut dg = Tensor::zeros(&[s.image.dense.height * s.image.dense.width, dim]);
                for r in &s.regions {
                    if let Some(g) = row("region", r_idx) {
                        region_pooled_backward(&r.taps, &r.unit.backward(g), &mut dg);
                    }
                    if let Some(g) = row("phrase", r_idx) {
                        self.text.backward(&r.phrase.fwd, &r.phrase.u.backward(g), &mut grads.text);
                    }
                    for (k, n) in r.negatives.iter().enumerate() {
                        if let Some(g) = row("negatives", r_idx * HARD_NEGATIVES + k) {
                            self.text.backward(&n.fwd, &n.u.backward(g), &mut grads.text);
                        }
                    }
                    r_idx += 1;
                }
                d_grid = Some(dg);
            }
            self.image.backward(&s.image, d_pooled.as_deref(), d_grid.as_ref(), &mut grads.image);
            for (key, t) in [("short", &s.short), ("long", &s.long)] {
                if let Some(g) = row(key, gi) {
                    self.text.backward(&t.fwd, &t.u.backward(g), &mut grads.text);
                }
            }
        }
    }

    /// Single-process objective and full parameter gradient for `samples`.
    pub fn batch_gradient(&self, samples: &[&Sample], opts: &ObjectiveOptions, tau: &[f64]) -> Result<BatchGradient> {
        let side = self.batch_grid_side(samples)?;
        let fwd = self.encode_shard(samples, opts.stage, side)?;
        let emb = Embeddings::gather(&[fwd.embeddings()])?;
        let obj = objective(&emb, &self.sigmoid_params(), opts, tau)?;
        let mut grads = Model::zeros(&self.config);
        self.backward_shard(&fwd, &obj.grads, ShardOffsets::default(), &mut grads);
        grads.add_scalar_grads(&obj.grads, 1.0);
        let stats = MarginStats::from_sims(&obj.pos_sims, &obj.neg_sims, tau.len())?;
        Ok(BatchGradient { grads: grads.params(), report: obj.report, stats, pos_sims: obj.pos_sims, neg_sims: obj.neg_sims })
    }

    /// Adds `weight ·` the logit scale and bias gradients of an objective.
    pub fn add_scalar_grads(&mut self, g: &GradPair, weight: f64) {
        if let Some(t) = g.grad(KEY_LOG_SCALE) {
            self.log_scale.axpy(weight, t);
        }
        if let Some(t) = g.grad(KEY_BIAS) {
            self.bias.axpy(weight, t);
        }
    }
}

pub(crate) fn hash_params(h: &mut Sha256, tensors: &[(String, &Tensor)]) {
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Forward caches

#[derive(Clone, Debug)]
struct Unit {
    unit: Vec<f64>,
    norm: f64,
}

impl Unit {
    fn of(v: &[f64]) -> Result<Self> {
        let n = norm(v);
        if !(n > ZERO_NORM_EPS) {
            return Err(Error::ZeroVector { eps: ZERO_NORM_EPS });
        }
        Ok(Self { unit: v.iter().map(|x| x / n).collect(), norm: n })
    }

    fn backward(&self, d_unit: &[f64]) -> Vec<f64> {
        l2_normalize_backward(&self.unit, self.norm, d_unit)
    }
}

#[derive(Clone, Debug)]
struct Encoded<F> {
    fwd: F,
    u: Unit,
}

#[derive(Clone, Debug)]
struct RegionForward {
    taps: Vec<(usize, f64)>,
    unit: Unit,
    phrase: Encoded<TextForward>,
    negatives: Vec<Encoded<TextForward>>,
}

#[derive(Clone, Debug)]
struct SampleForward {
    image: ImageForward,
    img: Unit,
    short: Encoded<TextForward>,
    long: Encoded<TextForward>,
    regions: Vec<RegionForward>,
}

/// Cached forward pass over one shard.
#[derive(Clone, Debug)]
pub struct ShardForward {
    samples: Vec<SampleForward>,
    dim: usize,
}

impl ShardForward {
    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn num_regions(&self) -> usize {
        self.samples.iter().map(|s| s.regions.len()).sum()
    }

    pub fn embeddings(&self) -> Embeddings {
        let d = self.dim;
        let rows = |f: &dyn Fn(&SampleForward) -> Vec<Vec<f64>>| -> Tensor {
            let all: Vec<Vec<f64>> = self.samples.iter().flat_map(f).collect();
            stack(&all, d)
        };
        Embeddings {
            img: rows(&|s| vec![s.img.unit.clone()]),
            short: rows(&|s| vec![s.short.u.unit.clone()]),
            long: rows(&|s| vec![s.long.u.unit.clone()]),
            region: rows(&|s| s.regions.iter().map(|r| r.unit.unit.clone()).collect()),
            phrase: rows(&|s| s.regions.iter().map(|r| r.phrase.u.unit.clone()).collect()),
            negatives: rows(&|s| {
                s.regions.iter().flat_map(|r| r.negatives.iter().map(|n| n.u.unit.clone())).collect()
            }),
        }
    }
}

/// Start of a shard's samples and regions inside the gathered batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ShardOffsets {
    pub samples: usize,
    pub regions: usize,
}

fn stack(rows: &[Vec<f64>], d: usize) -> Tensor {
    if rows.is_empty() {
        Tensor::zeros(&[0, d])
    } else {
        Tensor::stack_rows(rows)
    }
}

/// Unit-norm embeddings of a batch; regions are flattened in sample order and
/// negatives hold `HARD_NEGATIVES` consecutive rows per region.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub img: Tensor,
    pub short: Tensor,
    pub long: Tensor,
    pub region: Tensor,
    pub phrase: Tensor,
    pub negatives: Tensor,
}

impl Embeddings {
    /// Concatenates shard embeddings in worker order.
    pub fn gather(parts: &[Embeddings]) -> Result<Embeddings> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to gather".into()))?;
        let d = first.img.cols();
        let cat = |f: fn(&Embeddings) -> &Tensor| -> Result<Tensor> {
            let mut data = Vec::new();
            let mut n = 0;
            for p in parts {
                let t = f(p);
                if t.rows() > 0 && t.cols() != d {
                    return Err(Error::Shape(format!("embedding width {} vs {d}", t.cols())));
                }
                n += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![n, d], data)
        };
        Ok(Embeddings {
            img: cat(|e| &e.img)?,
            short: cat(|e| &e.short)?,
            long: cat(|e| &e.long)?,
            region: cat(|e| &e.region)?,
            phrase: cat(|e| &e.phrase)?,
            negatives: cat(|e| &e.negatives)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Objective

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOptions {
    pub stage: Stage,
    pub weights: LossWeights,
    pub tic_reduction: TicReduction,
}

impl ObjectiveOptions {
    pub fn stage(stage: Stage) -> Self {
        Self { stage, weights: LossWeights::default(), tic_reduction: TicReduction::default() }
    }
}

/// Per-component values of one step; inactive components are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub global: f64,
    pub fgv: Option<f64>,
    pub fgt: Option<f64>,
    pub cmr: Option<f64>,
    pub tic: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Objective {
    /// Keys `img`, `short`, `long`, `region`, `phrase`, `negatives`,
    /// `log_scale`, `bias`.
    pub grads: GradPair,
    pub report: LossReport,
    /// Region/phrase similarities and region/negative similarities of this
    /// step, feeding the next margin update.
    pub pos_sims: Vec<f64>,
    pub neg_sims: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub grads: ParamMap,
    pub report: LossReport,
    pub stats: MarginStats,
    pub pos_sims: Vec<f64>,
    pub neg_sims: Vec<Vec<f64>>,
}

fn rename(mut g: GradPair, from: &str, to: &str) -> GradPair {
    if let Some(t) = g.grads.remove(from) {
        g.grads.insert(to.to_owned(), t);
    }
    g
}

/// Weighted objective over gathered embeddings. `tau` holds the CMR margins
/// of this step (computed from the previous step).
pub fn objective(emb: &Embeddings, sig: &SigmoidLossParams, opts: &ObjectiveOptions, tau: &[f64]) -> Result<Objective> {
    let mut comps = LossComponents {
        global: Some(dual_caption_global_loss(&emb.img, &emb.short, &emb.long, sig)?),
        ..Default::default()
    };
    let mut pos_sims = Vec::new();
    let mut neg_sims = Vec::new();
    if opts.stage == Stage::Two {
        let (region, phrase, negs) = (&emb.region, &emb.phrase, &emb.negatives);
        let r = region.rows();
        comps.fgv = Some(fgv_regional_loss(region, phrase, sig)?);
        comps.fgt = Some(fgt_batch_loss(region, phrase, negs, HARD_NEGATIVES, sig)?);

        pos_sims = (0..r).map(|i| dot(region.row(i), phrase.row(i))).collect();
        neg_sims = (0..r)
            .map(|i| (0..HARD_NEGATIVES).map(|k| dot(region.row(i), negs.row(i * HARD_NEGATIVES + k))).collect())
            .collect::<Vec<Vec<f64>>>();
        let neg_t = stack(&neg_sims, HARD_NEGATIVES);
        let c = cmr_loss(&pos_sims, &neg_t, tau)?;
        let (dp, dn) = (&c.grads["pos_sims"], &c.grads["neg_sims"]);
        let d = region.cols();
        let mut d_region = Tensor::zeros(&[r, d]);
        let mut d_phrase = Tensor::zeros(&[r, d]);
        let mut d_negs = Tensor::zeros(&[r * HARD_NEGATIVES, d]);
        for i in 0..r {
            let gp = dp.data()[i];
            axpy(d_region.row_mut(i), gp, phrase.row(i));
            axpy(d_phrase.row_mut(i), gp, region.row(i));
            for k in 0..HARD_NEGATIVES {
                let gn = dn.get2(i, k);
                if gn != 0.0 {
                    axpy(d_region.row_mut(i), gn, negs.row(i * HARD_NEGATIVES + k));
                    axpy(d_negs.row_mut(i * HARD_NEGATIVES + k), gn, region.row(i));
                }
            }
        }
        comps.cmr = Some(
            GradPair::new(c.value)
                .with("region", d_region)
                .with("phrase", d_phrase)
                .with("negatives", d_negs),
        );

        let sets = tic_select_negatives(phrase)?;
        comps.tic = Some(rename(tic_loss(phrase, &sets, opts.tic_reduction)?, "text", "phrase"));
    }
    let total = total_loss(opts.stage, &comps, &opts.weights)?;
    let value = |c: &Option<GradPair>| c.as_ref().map(|g| g.value);
    let report = LossReport {
        total: total.value,
        global: comps.global.as_ref().map_or(0.0, |g| g.value),
        fgv: value(&comps.fgv),
        fgt: value(&comps.fgt),
        cmr: value(&comps.cmr),
        tic: value(&comps.tic),
    };
    Ok(Objective { grads: total, report, pos_sims, neg_sims })
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Max relative error per objective: each loss alone, then the weighted total.
    pub max_rel_error: Vec<(String, f64)>,
    /// Distance of the probe point from the nearest hinge or threshold kink.
    pub kink_distance: f64,
    pub model_seed: u64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

fn kink_distance(model: &Model, batch: &[&Sample], tau: &[f64]) -> Result<f64> {
    let g = model.batch_gradient(batch, &ObjectiveOptions::stage(Stage::Two), tau)?;
    let mut d = f64::INFINITY;
    for (p, row) in g.pos_sims.iter().zip(&g.neg_sims) {
        for (n, t) in row.iter().zip(tau) {
            d = d.min((n - p + t).abs());
        }
    }
    let phrases: Vec<Vec<f64>> = batch
        .iter()
        .flat_map(|s| s.regions.iter().map(|r| model.embed_text(&r.phrase)))
        .collect::<Result<_>>()?;
    let t = Tensor::stack_rows(&phrases);
    let sims = t.matmul_t(&t);
    for i in 0..t.rows() {
        for j in (0..t.rows()).filter(|&j| j != i) {
            d = d.min((sims.get2(i, j) - crate::losses::TIC_SIM_THRESHOLD).abs());
        }
    }
    Ok(d)
}

/// Finite-difference check of the full parameter gradient on a small stage-2
/// batch, for each loss alone and for the weighted total. Model seeds from
/// `seed` upward are tried until the probe point is at least `10·h` away
/// from every kink.
pub fn check_gradients(seed: u64, fd: &FdOptions) -> Result<GradCheckReport> {
    let corpus = generate_corpus(&SynthConfig { samples: 4, seed, ..Default::default() })?;
    let batch: Vec<&Sample> = corpus.iter().collect();
    let cfg = ModelConfig::default().fit_corpus(&corpus)?;
    let tau: Vec<f64> = (0..HARD_NEGATIVES).map(|k| 0.02 + 0.013 * k as f64).collect();
    let mut found = None;
    for model_seed in seed..seed + 32 {
        let m = Model::init(cfg.clone(), model_seed)?;
        let d = kink_distance(&m, &batch, &tau)?;
        if d >= 10.0 * fd.step {
            found = Some((m, d, model_seed));
            break;
        }
    }
    let (model, kink, model_seed) =
        found.ok_or_else(|| Error::Config("no probe point away from loss kinks".into()))?;

    let unit = |i: usize| {
        let mut w = [0.0; 5];
        w[i] = 1.0;
        LossWeights { global: w[0], fgv: w[1], fgt: w[2], cmr: w[3], tic: w[4] }
    };
    let cases = [
        ("global", unit(0)),
        ("fgv", unit(1)),
        ("fgt", unit(2)),
        ("cmr", unit(3)),
        ("tic", unit(4)),
        ("total", LossWeights::default()),
    ];
    let params = model.params();
    let mut out = Vec::new();
    let mut coords = 0;
    for (name, weights) in cases {
        let opts = ObjectiveOptions { stage: Stage::Two, weights, tic_reduction: TicReduction::Sum };
        let f = |p: &ParamMap| -> Result<GradPair> {
            let g = model.with_params(p)?.batch_gradient(&batch, &opts, &tau)?;
            Ok(GradPair { value: g.report.total, grads: g.grads })
        };
        let r = finite_diff_check(f, &params, fd)?;
        coords += r.coords_checked;
        out.push((name.to_string(), r.max_rel_error));
    }
    Ok(GradCheckReport { max_rel_error: out, kink_distance: kink, model_seed, coords_checked: coords })
}
