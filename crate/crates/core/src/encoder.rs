//! Toy dual encoders.
//!
//! The image side projects patch vectors to `D` dimensions, adds an optional
//! fixed 2-D sinusoidal position code and then runs two branches on the
//! resulting tokens:
//!
//! * a masked attention pooling (MAP) head producing the global embedding;
//! * `dense_layers` residual single-head self-attention layers producing the
//!   dense [`FeatureGrid`] consumed by region pooling.
//!
//! The text side sums token and learned position embeddings (at most
//! [`MAX_TEXT_LEN`] positions) and pools them with its own MAP head, masking
//! padding tokens. Every forward pass returns a cache from which the matching
//! backward pass accumulates parameter gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor};

/// Maximum caption length in tokens.
pub const MAX_TEXT_LEN: usize = 196;

/// Token id reserved for padding; masked out of pooling.
pub const PAD_TOKEN: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// Values per image patch.
    pub patch_dim: usize,
    pub vocab_size: usize,
    /// Depth of the dense self-attention branch (at least 1).
    pub dense_layers: usize,
    /// Pixel side of one patch; a bucket of side `s` gives an `s/p × s/p` grid.
    pub patch_pixels: u32,
    pub image_positional: bool,
    pub buckets: ResolutionBuckets,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            patch_dim: 16,
            vocab_size: 64,
            dense_layers: 1,
            patch_pixels: 16,
            image_positional: true,
            buckets: ResolutionBuckets::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.patch_dim == 0 || self.vocab_size < 2 {
            return Err(Error::Config("embed_dim, patch_dim must be > 0 and vocab_size ≥ 2".into()));
        }
        if self.dense_layers == 0 {
            return Err(Error::Config("dense_layers must be at least 1".into()));
        }
        if self.patch_pixels == 0 {
            return Err(Error::Config("patch_pixels must be positive".into()));
        }
        Ok(())
    }

    /// Patch-grid side for a bucket side length.
    pub fn grid_side(&self, bucket: u32) -> usize {
        (bucket / self.patch_pixels) as usize
    }

    /// The bucket whose patch layout is exactly `height × width`, if any.
    pub fn bucket_for_grid(&self, height: usize, width: usize) -> Option<u32> {
        if height != width {
            return None;
        }
        self.buckets
            .sides()
            .iter()
            .copied()
            .find(|&b| b % self.patch_pixels == 0 && self.grid_side(b) == height)
    }
}

// ---------------------------------------------------------------------------
// Resolution buckets

/// Candidate square resolutions, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct ResolutionBuckets(Vec<u32>);

impl ResolutionBuckets {
    pub fn new(sides: Vec<u32>) -> Result<Self> {
        if sides.is_empty() || sides[0] == 0 || sides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "buckets must be positive and strictly increasing, got {sides:?}"
            )));
        }
        Ok(Self(sides))
    }

    pub fn sides(&self) -> &[u32] {
        &self.0
    }
}

impl Default for ResolutionBuckets {
    fn default() -> Self {
        Self(vec![128, 256, 576, 784, 1024])
    }
}

impl TryFrom<Vec<u32>> for ResolutionBuckets {
    type Error = Error;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ResolutionBuckets> for Vec<u32> {
    fn from(b: ResolutionBuckets) -> Self {
        b.0
    }
}

/// Bucket with the smallest `|ln(bucket / max_side)|`; ties go to the smaller
/// bucket.
pub fn select_resolution_bucket(max_side: u32, buckets: &ResolutionBuckets) -> u32 {
    debug_assert!(max_side > 0);
    let target = f64::from(max_side.max(1));
    let mut best = buckets.0[0];
    let mut best_cost = (f64::from(best) / target).ln().abs();
    for &b in &buckets.0[1..] {
        let cost = (f64::from(b) / target).ln().abs();
        if cost < best_cost {
            best = b;
            best_cost = cost;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Inputs and outputs

/// Image input: `height × width` patches of `channels` values each, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patches: Tensor,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patches: Tensor) -> Result<Self> {
        if height * width == 0 || patches.rows() != height * width || patches.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "{height}×{width} grid needs {} patch rows, got shape {:?}",
                height * width,
                patches.shape()
            )));
        }
        Ok(Self { height, width, patches })
    }

    pub fn channels(&self) -> usize {
        self.patches.cols()
    }

    /// Nearest-neighbour resample onto a `side × side` grid.
    pub fn resize_nearest(&self, side: usize) -> PatchGrid {
        if side == self.height && side == self.width {
            return self.clone();
        }
        let mut rows = Vec::with_capacity(side * side);
        for i in 0..side {
            let si = ((i as f64 + 0.5) * self.height as f64 / side as f64) as usize;
            for j in 0..side {
                let sj = ((j as f64 + 0.5) * self.width as f64 / side as f64) as usize;
                rows.push(self.patches.row(si.min(self.height - 1) * self.width + sj.min(self.width - 1)));
            }
        }
        PatchGrid { height: side, width: side, patches: Tensor::stack_rows(&rows) }
    }
}

/// Dense per-patch features, `height·width` rows of `D` values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub features: Tensor,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, features: Tensor) -> Result<Self> {
        if height * width == 0 || features.rows() != height * width || features.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "{height}×{width} feature grid got shape {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature grid".into()));
        }
        Ok(Self { height, width, features })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.features.row(row * self.width + col)
    }
}

// ---------------------------------------------------------------------------
// Parameter blocks

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Residual single-head self-attention: `y = x + softmax(QKᵀ/√D)·V·Wo`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
    mixed: Tensor,
}

impl AttentionLayer {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, d: usize) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            wq: normal_tensor(rng, &[d, d], s),
            wk: normal_tensor(rng, &[d, d], s),
            wv: normal_tensor(rng, &[d, d], s),
            wo: normal_tensor(rng, &[d, d], 0.5 * s),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, AttentionCache) {
        let inv = 1.0 / (x.cols() as f64).sqrt();
        let q = x.matmul(&self.wq);
        let k = x.matmul(&self.wk);
        let v = x.matmul(&self.wv);
        let mut attn = q.matmul_t(&k);
        for i in 0..attn.rows() {
            let row = attn.row_mut(i);
            let p = crate::numerics::softmax_row(row, inv);
            row.copy_from_slice(&p);
        }
        let mixed = attn.matmul(&v);
        let mut y = mixed.matmul(&self.wo);
        y.add_assign(x);
        (y, AttentionCache { x: x.clone(), q, k, v, attn, mixed })
    }

    /// Accumulates weight gradients into `grads` and returns `∂/∂x`.
    pub fn backward(&self, cache: &AttentionCache, dy: &Tensor, grads: &mut AttentionLayer) -> Tensor {
        let inv = 1.0 / (cache.x.cols() as f64).sqrt();
        grads.wo.add_assign(&cache.mixed.t_matmul(dy));
        let dmixed = dy.matmul_t(&self.wo);
        let dattn = dmixed.matmul_t(&cache.v);
        let dv = cache.attn.t_matmul(&dmixed);
        let mut ds = dattn;
        for i in 0..ds.rows() {
            let a = cache.attn.row(i);
            let da = ds.row_mut(i);
            let inner = dot(a, da);
            for (g, &ai) in da.iter_mut().zip(a) {
                *g = ai * (*g - inner) * inv;
            }
        }
        let dq = ds.matmul(&cache.k);
        let dk = ds.t_matmul(&cache.q);
        grads.wq.add_assign(&cache.x.t_matmul(&dq));
        grads.wk.add_assign(&cache.x.t_matmul(&dk));
        grads.wv.add_assign(&cache.x.t_matmul(&dv));
        let mut dx = dy.clone();
        dx.add_assign(&dq.matmul_t(&self.wq));
        dx.add_assign(&dk.matmul_t(&self.wk));
        dx.add_assign(&dv.matmul_t(&self.wv));
        dx
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ]
    }
}

/// Masked attention pooling head with one learned probe.
#[derive(Clone, Debug, PartialEq)]
pub struct MapHead {
    pub query: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug)]
pub struct MapCache {
    tokens: Tensor,
    probe: Vec<f64>,
    keys: Tensor,
    values: Tensor,
    attn: Vec<f64>,
    mixed: Vec<f64>,
}

impl MapCache {
    /// Attention weight per token; exactly zero at masked positions.
    pub fn weights(&self) -> &[f64] {
        &self.attn
    }
}

impl MapHead {
    pub fn zeros(d: usize) -> Self {
        Self {
            query: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, d: usize) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            query: normal_tensor(rng, &[d], 1.0),
            wq: normal_tensor(rng, &[d, d], s),
            wk: normal_tensor(rng, &[d, d], s),
            wv: normal_tensor(rng, &[d, d], s),
            wo: normal_tensor(rng, &[d, d], s),
        }
    }

    /// `mask[i] == true` keeps token `i`.
    pub fn forward(&self, tokens: &Tensor, mask: &[bool]) -> Result<(Vec<f64>, MapCache)> {
        let d = self.wq.rows();
        if tokens.cols() != d || tokens.rows() != mask.len() {
            return Err(Error::Shape(format!(
                "pooling {} tokens of width {} with a mask of {} and head width {d}",
                tokens.rows(),
                tokens.cols(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyPool);
        }
        let inv = 1.0 / (d as f64).sqrt();
        let probe = vec_mat(self.query.data(), &self.wq);
        let keys = tokens.matmul(&self.wk);
        let values = tokens.matmul(&self.wv);

        let kept: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let scores: Vec<f64> = kept.iter().map(|&i| dot(&probe, keys.row(i))).collect();
        let p = crate::numerics::softmax_row(&scores, inv);
        let mut attn = vec![0.0; mask.len()];
        for (&i, &w) in kept.iter().zip(&p) {
            attn[i] = w;
        }
        let mut mixed = vec![0.0; d];
        for &i in &kept {
            for (m, &v) in mixed.iter_mut().zip(values.row(i)) {
                *m += attn[i] * v;
            }
        }
        let out = vec_mat(&mixed, &self.wo);
        Ok((out, MapCache { tokens: tokens.clone(), probe, keys, values, attn, mixed }))
    }

    /// Accumulates head gradients into `grads` and returns `∂/∂tokens`.
    pub fn backward(&self, cache: &MapCache, d_out: &[f64], grads: &mut MapHead) -> Tensor {
        let d = self.wq.rows();
        let inv = 1.0 / (d as f64).sqrt();
        outer_add(&mut grads.wo, &cache.mixed, d_out);
        let dmixed = mat_vec(&self.wo, d_out);

        let n = cache.attn.len();
        let mut dvalues = Tensor::zeros(&[n, d]);
        let mut dscore = vec![0.0; n];
        for i in 0..n {
            let a = cache.attn[i];
            if a == 0.0 {
                continue;
            }
            for (g, &dm) in dvalues.row_mut(i).iter_mut().zip(&dmixed) {
                *g = a * dm;
            }
            dscore[i] = dot(&dmixed, cache.values.row(i));
        }
        let inner = dot(&cache.attn, &dscore);
        let mut dkeys = Tensor::zeros(&[n, d]);
        let mut dprobe = vec![0.0; d];
        for i in 0..n {
            let a = cache.attn[i];
            if a == 0.0 {
                continue;
            }
            let ds = a * (dscore[i] - inner) * inv;
            for (g, &k) in dprobe.iter_mut().zip(cache.keys.row(i)) {
                *g += ds * k;
            }
            for (g, &q) in dkeys.row_mut(i).iter_mut().zip(&cache.probe) {
                *g = ds * q;
            }
        }
        outer_add(&mut grads.wq, self.query.data(), &dprobe);
        for (g, v) in grads.query.data_mut().iter_mut().zip(mat_vec(&self.wq, &dprobe)) {
            *g += v;
        }
        grads.wk.add_assign(&cache.tokens.t_matmul(&dkeys));
        grads.wv.add_assign(&cache.tokens.t_matmul(&dvalues));
        let mut dtokens = dkeys.matmul_t(&self.wk);
        dtokens.add_assign(&dvalues.matmul_t(&self.wv));
        dtokens
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("query", &self.query),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            ("query", &mut self.query),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ]
    }
}

/// `v · M` for a row vector `v`.
fn vec_mat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, &vi) in v.iter().enumerate() {
        for (o, &mij) in out.iter_mut().zip(m.row(i)) {
            *o += vi * mij;
        }
    }
    out
}

/// `M · v` for a column vector `v`.
fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), v)).collect()
}

fn outer_add(m: &mut Tensor, a: &[f64], b: &[f64]) {
    for (i, &ai) in a.iter().enumerate() {
        for (mij, &bj) in m.row_mut(i).iter_mut().zip(b) {
            *mij += ai * bj;
        }
    }
}

/// Masked attention pooling of `tokens` (`K×D`); `mask[i] == true` keeps token `i`.
pub fn pool_map(tokens: &Tensor, mask: &[bool], head: &MapHead) -> Result<Vec<f64>> {
    head.forward(tokens, mask).map(|(out, _)| out)
}

// ---------------------------------------------------------------------------
// Image encoder

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderParams {
    pub patch_proj: Tensor,
    pub layers: Vec<AttentionLayer>,
    pub map: MapHead,
}

#[derive(Clone, Debug)]
pub struct ImageForward {
    patches: Tensor,
    layers: Vec<AttentionCache>,
    map: MapCache,
    /// Dense branch output.
    pub dense: FeatureGrid,
    /// Global branch output before normalization.
    pub pooled: Vec<f64>,
}

/// Fixed 2-D sinusoidal code; the first half of the channels encodes the row,
/// the second half the column.
pub fn image_position_code(height: usize, width: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = Tensor::zeros(&[height * width, d]);
    let encode = |pos: usize, c: usize, span: usize| {
        let pair = (c / 2) as f64;
        let freq = 1.0 / 100f64.powf(2.0 * pair / span.max(1) as f64);
        let angle = pos as f64 * freq;
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    for i in 0..height {
        for j in 0..width {
            let row = out.row_mut(i * width + j);
            for c in 0..half {
                row[c] = encode(i, c, half);
            }
            for c in half..d {
                row[c] = encode(j, c - half, d - half);
            }
        }
    }
    out
}

impl ImageEncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            patch_proj: Tensor::zeros(&[cfg.patch_dim, d]),
            layers: (0..cfg.dense_layers).map(|_| AttentionLayer::zeros(d)).collect(),
            map: MapHead::zeros(d),
        }
    }

    pub fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            patch_proj: normal_tensor(rng, &[cfg.patch_dim, d], 1.0 / (cfg.patch_dim as f64).sqrt()),
            layers: (0..cfg.dense_layers).map(|_| AttentionLayer::init(rng, d)).collect(),
            map: MapHead::init(rng, d),
        }
    }

    pub fn forward(&self, image: &PatchGrid, cfg: &EncoderConfig) -> Result<ImageForward> {
        if cfg.bucket_for_grid(image.height, image.width).is_none() {
            return Err(Error::Shape(format!(
                "{}×{} patch grid matches no resolution bucket",
                image.height, image.width
            )));
        }
        if image.channels() != self.patch_proj.rows() {
            return Err(Error::Shape(format!(
                "patches have {} values, projection expects {}",
                image.channels(),
                self.patch_proj.rows()
            )));
        }
        let mut x = image.patches.matmul(&self.patch_proj);
        if cfg.image_positional {
            x.add_assign(&image_position_code(image.height, image.width, x.cols()));
        }
        let mask = vec![true; x.rows()];
        let (pooled, map) = self.map.forward(&x, &mask)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x);
            caches.push(cache);
            x = y;
        }
        Ok(ImageForward {
            patches: image.patches.clone(),
            layers: caches,
            map,
            dense: FeatureGrid::new(image.height, image.width, x)?,
            pooled,
        })
    }

    /// Backpropagates gradients w.r.t. the pooled output and/or the dense grid.
    pub fn backward(
        &self,
        fwd: &ImageForward,
        d_pooled: Option<&[f64]>,
        d_dense: Option<&Tensor>,
        grads: &mut ImageEncoderParams,
    ) {
        let n = fwd.patches.rows();
        let d = self.patch_proj.cols();
        let mut dx = Tensor::zeros(&[n, d]);
        if let Some(dd) = d_dense {
            let mut g = dd.clone();
            for (layer, (cache, lg)) in self
                .layers
                .iter()
                .zip(fwd.layers.iter().zip(grads.layers.iter_mut()))
                .rev()
            {
                g = layer.backward(cache, &g, lg);
            }
            dx.add_assign(&g);
        }
        if let Some(dp) = d_pooled {
            dx.add_assign(&self.map.backward(&fwd.map, dp, &mut grads.map));
        }
        grads.patch_proj.add_assign(&fwd.patches.t_matmul(&dx));
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("image.patch_proj".to_string(), &self.patch_proj)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, t)| (format!("image.dense{l}.{n}"), t)));
        }
        out.extend(self.map.tensors().into_iter().map(|(n, t)| (format!("image.map.{n}"), t)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("image.patch_proj".to_string(), &mut self.patch_proj)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer.tensors_mut().into_iter().map(|(n, t)| (format!("image.dense{l}.{n}"), t)),
            );
        }
        out.extend(self.map.tensors_mut().into_iter().map(|(n, t)| (format!("image.map.{n}"), t)));
        out
    }
}

pub fn encode_image_dense(
    image: &PatchGrid,
    params: &ImageEncoderParams,
    cfg: &EncoderConfig,
) -> Result<FeatureGrid> {
    params.forward(image, cfg).map(|f| f.dense)
}

// ---------------------------------------------------------------------------
// Text encoder

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderParams {
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub map: MapHead,
}

#[derive(Clone, Debug)]
pub struct TextForward {
    ids: Vec<u32>,
    map: MapCache,
    pub pooled: Vec<f64>,
}

impl TextEncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            token_emb: Tensor::zeros(&[cfg.vocab_size, d]),
            pos_emb: Tensor::zeros(&[MAX_TEXT_LEN, d]),
            map: MapHead::zeros(d),
        }
    }

    pub fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            token_emb: normal_tensor(rng, &[cfg.vocab_size, d], 1.0),
            pos_emb: normal_tensor(rng, &[MAX_TEXT_LEN, d], 0.1),
            map: MapHead::init(rng, d),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_emb.rows()
    }

    pub fn forward(&self, ids: &[u32]) -> Result<TextForward> {
        if ids.len() > MAX_TEXT_LEN {
            return Err(Error::TooLong { len: ids.len(), max: MAX_TEXT_LEN });
        }
        if ids.is_empty() {
            return Err(Error::EmptyPool);
        }
        let vocab = self.vocab_size();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::UnknownToken { id, vocab });
        }
        let d = self.token_emb.cols();
        let mut x = Tensor::zeros(&[ids.len(), d]);
        for (p, &id) in ids.iter().enumerate() {
            let row = x.row_mut(p);
            for ((r, &e), &q) in row.iter_mut().zip(self.token_emb.row(id as usize)).zip(self.pos_emb.row(p)) {
                *r = e + q;
            }
        }
        let mask: Vec<bool> = ids.iter().map(|&id| id != PAD_TOKEN).collect();
        let (pooled, map) = self.map.forward(&x, &mask)?;
        Ok(TextForward { ids: ids.to_vec(), map, pooled })
    }

    pub fn backward(&self, fwd: &TextForward, d_pooled: &[f64], grads: &mut TextEncoderParams) {
        let dx = self.map.backward(&fwd.map, d_pooled, &mut grads.map);
        for (p, &id) in fwd.ids.iter().enumerate() {
            if id == PAD_TOKEN {
                continue;
            }
            let g = dx.row(p);
            for (t, &v) in grads.token_emb.row_mut(id as usize).iter_mut().zip(g) {
                *t += v;
            }
            for (t, &v) in grads.pos_emb.row_mut(p).iter_mut().zip(g) {
                *t += v;
            }
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("text.token_emb".to_string(), &self.token_emb),
            ("text.pos_emb".to_string(), &self.pos_emb),
        ];
        out.extend(self.map.tensors().into_iter().map(|(n, t)| (format!("text.map.{n}"), t)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("text.token_emb".to_string(), &mut self.token_emb),
            ("text.pos_emb".to_string(), &mut self.pos_emb),
        ];
        out.extend(self.map.tensors_mut().into_iter().map(|(n, t)| (format!("text.map.{n}"), t)));
        out
    }
}

/// Pooled (unnormalized) text embedding.
pub fn encode_text(ids: &[u32], params: &TextEncoderParams) -> Result<Vec<f64>> {
    params.forward(ids).map(|f| f.pooled)
}
