//! The five training objectives with hand-derived gradients, and their
//! weighted combination.
//!
//! Sigmoid-family losses take unit-norm embedding rows, so cosine similarity
//! is a plain dot product; their gradients are w.r.t. those rows as given
//! (the caller chains through normalization). Gradients are reported in a
//! [`GradPair`] under the key names listed on each function.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sigmoid, log_sum_exp, norm, sigmoid, ExactSum, GradPair, Tensor};

/// Hard negatives per region text.
pub const HARD_NEGATIVES: usize = 10;
/// Text pairs more similar than this are never used as TIC negatives.
pub const TIC_SIM_THRESHOLD: f64 = 0.95;
/// Maximum TIC negatives per text.
pub const TIC_TOP_K: usize = 10;

pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Loss-scalar gradient keys shared by the sigmoid-family losses.
pub const KEY_LOG_SCALE: &str = "log_scale";
pub const KEY_BIAS: &str = "bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub global: f64,
    pub fgv: f64,
    pub fgt: f64,
    pub cmr: f64,
    pub tic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { global: 1.0, fgv: 0.1, fgt: 0.5, cmr: 0.4, tic: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.global, self.fgv, self.fgt, self.cmr, self.tic];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {all:?}")));
        }
        Ok(())
    }
}

/// Learnable logit scale (`exp(log_scale)`) and bias of the sigmoid losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidLossParams {
    pub log_scale: f64,
    pub bias: f64,
}

impl Default for SigmoidLossParams {
    fn default() -> Self {
        Self { log_scale: 10f64.ln(), bias: -10.0 }
    }
}

impl SigmoidLossParams {
    pub fn logit(&self, sim: f64) -> f64 {
        self.log_scale.exp() * sim + self.bias
    }
}

fn check_unit_rows(t: &Tensor, what: &'static str) -> Result<()> {
    for i in 0..t.rows() {
        let n = norm(t.row(i));
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotNormalized { what, row: i, norm: n });
        }
    }
    Ok(())
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sigmoid-family losses

/// Pairwise sigmoid loss over an `N×N` batch using raw dot products
/// (no unit-norm check). Keys: `a`, `b`, `log_scale`, `bias`.
///
/// `L = −(1/N) Σ_i Σ_j log σ(z_ij · (e^{t′}·⟨a_i, b_j⟩ + b))`, `z_ii = 1`,
/// `z_ij = −1` otherwise.
pub fn sigmoid_pairwise_loss(a: &Tensor, b: &Tensor, p: &SigmoidLossParams) -> Result<GradPair> {
    check_same_shape(a, b, "paired embeddings")?;
    let n = a.rows();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let scale = p.log_scale.exp();
    let sims = a.matmul_t(b);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dsim = Tensor::zeros(&[n, n]);
    let (mut d_log_scale, mut d_bias) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let z = if i == j { 1.0 } else { -1.0 };
            let s = sims.get2(i, j);
            let logit = scale * s + p.bias;
            loss -= log_sigmoid(z * logit);
            // d/dlogit of −log σ(z·logit) = −z·σ(−z·logit)
            let dl = -z * sigmoid(-z * logit) * inv_n;
            dsim.row_mut(i)[j] = dl * scale;
            d_log_scale += dl * scale * s;
            d_bias += dl;
        }
    }
    Ok(GradPair::new(loss * inv_n)
        .with("a", dsim.matmul(b))
        .with("b", dsim.t_matmul(a))
        .with(KEY_LOG_SCALE, Tensor::scalar(d_log_scale))
        .with(KEY_BIAS, Tensor::scalar(d_bias)))
}

fn rename(mut g: GradPair, from: &str, to: &str) -> GradPair {
    if let Some(t) = g.grads.remove(from) {
        g.grads.insert(to.to_owned(), t);
    }
    g
}

/// Keys: `img`, `txt`, `log_scale`, `bias`.
pub fn global_sigmoid_loss(img: &Tensor, txt: &Tensor, p: &SigmoidLossParams) -> Result<GradPair> {
    check_same_shape(img, txt, "image/text embeddings")?;
    check_unit_rows(img, "img")?;
    check_unit_rows(txt, "txt")?;
    let g = sigmoid_pairwise_loss(img, txt, p)?;
    Ok(rename(rename(g, "a", "img"), "b", "txt"))
}

/// Mean of the global loss against short and against long captions.
/// Keys: `img`, `short`, `long`, `log_scale`, `bias`.
pub fn dual_caption_global_loss(
    img: &Tensor,
    short: &Tensor,
    long: &Tensor,
    p: &SigmoidLossParams,
) -> Result<GradPair> {
    check_same_shape(short, long, "short/long captions")?;
    let s = rename(global_sigmoid_loss(img, short, p)?, "txt", "short");
    let l = rename(global_sigmoid_loss(img, long, p)?, "txt", "long");
    let mut out = GradPair::new(0.0);
    out.accumulate(0.5, &s);
    out.accumulate(0.5, &l);
    Ok(out)
}

/// Region/phrase alignment with the same pairwise sigmoid form.
/// Keys: `region`, `phrase`, `log_scale`, `bias`.
pub fn fgv_regional_loss(region: &Tensor, phrase: &Tensor, p: &SigmoidLossParams) -> Result<GradPair> {
    check_same_shape(region, phrase, "region/phrase embeddings")?;
    check_unit_rows(region, "region")?;
    check_unit_rows(phrase, "phrase")?;
    let g = sigmoid_pairwise_loss(region, phrase, p)?;
    Ok(rename(rename(g, "a", "region"), "b", "phrase"))
}

/// Binary classification of one positive against `negatives.rows()` hard
/// negatives: `(1/(1+K))[−log σ(ℓ_pos) − Σ_k log σ(−ℓ_k)]`.
/// Keys: `region`, `positive`, `negatives`, `log_scale`, `bias`.
pub fn fgt_hard_negative_loss(
    region: &[f64],
    positive: &[f64],
    negatives: &Tensor,
    expected_negatives: usize,
    p: &SigmoidLossParams,
) -> Result<GradPair> {
    if negatives.rows() != expected_negatives {
        return Err(Error::BadNegativeCount { expected: expected_negatives, got: negatives.rows() });
    }
    let d = region.len();
    if positive.len() != d || negatives.cols() != d {
        return Err(Error::Shape("hard-negative embedding widths differ".into()));
    }
    for (what, v) in [("region", region), ("positive", positive)] {
        let n = norm(v);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotNormalized { what, row: 0, norm: n });
        }
    }
    check_unit_rows(negatives, "negatives")?;
    Ok(fgt_unchecked(region, positive, negatives, p))
}

fn fgt_unchecked(region: &[f64], positive: &[f64], negatives: &Tensor, p: &SigmoidLossParams) -> GradPair {
    let scale = p.log_scale.exp();
    let k = negatives.rows();
    let inv = 1.0 / (k + 1) as f64;
    let d = region.len();

    let mut d_region = vec![0.0; d];
    let mut d_log_scale = 0.0;
    let mut d_bias = 0.0;

    let s_pos = dot(region, positive);
    let l_pos = scale * s_pos + p.bias;
    let mut loss = -log_sigmoid(l_pos);
    let dl_pos = -sigmoid(-l_pos) * inv;
    let d_positive: Vec<f64> = region.iter().map(|r| dl_pos * scale * r).collect();
    for (g, &v) in d_region.iter_mut().zip(positive) {
        *g += dl_pos * scale * v;
    }
    d_log_scale += dl_pos * scale * s_pos;
    d_bias += dl_pos;

    let mut d_neg = Tensor::zeros(&[k, d]);
    for j in 0..k {
        let nj = negatives.row(j);
        let s = dot(region, nj);
        let l = scale * s + p.bias;
        loss -= log_sigmoid(-l);
        let dl = sigmoid(l) * inv;
        for (g, &v) in d_region.iter_mut().zip(nj) {
            *g += dl * scale * v;
        }
        for (g, &r) in d_neg.row_mut(j).iter_mut().zip(region) {
            *g = dl * scale * r;
        }
        d_log_scale += dl * scale * s;
        d_bias += dl;
    }
    GradPair::new(loss * inv)
        .with("region", Tensor::from_parts(vec![d], d_region))
        .with("positive", Tensor::from_parts(vec![d], d_positive))
        .with("negatives", d_neg)
        .with(KEY_LOG_SCALE, Tensor::scalar(d_log_scale))
        .with(KEY_BIAS, Tensor::scalar(d_bias))
}

/// Mean of [`fgt_hard_negative_loss`] over `R` regions. `negatives` holds the
/// `R·k` hard-negative rows grouped by region.
/// Keys: `region`, `phrase`, `negatives`, `log_scale`, `bias`.
pub fn fgt_batch_loss(
    regions: &Tensor,
    phrases: &Tensor,
    negatives: &Tensor,
    negatives_per_region: usize,
    p: &SigmoidLossParams,
) -> Result<GradPair> {
    check_same_shape(regions, phrases, "region/phrase embeddings")?;
    let r = regions.rows();
    let k = negatives_per_region;
    if negatives.rows() != r * k {
        return Err(Error::BadNegativeCount {
            expected: k,
            got: if r == 0 { negatives.rows() } else { negatives.rows() / r },
        });
    }
    if r == 0 {
        return Err(Error::Shape("no regions".into()));
    }
    check_unit_rows(regions, "region")?;
    check_unit_rows(phrases, "phrase")?;
    check_unit_rows(negatives, "negatives")?;
    Ok(fgt_batch_unchecked(regions, phrases, negatives, k, p))
}

pub(crate) fn fgt_batch_unchecked(
    regions: &Tensor,
    phrases: &Tensor,
    negatives: &Tensor,
    k: usize,
    p: &SigmoidLossParams,
) -> GradPair {
    let r = regions.rows();
    let d = regions.cols();
    let inv = 1.0 / r as f64;
    let mut d_region = Tensor::zeros(&[r, d]);
    let mut d_phrase = Tensor::zeros(&[r, d]);
    let mut d_neg = Tensor::zeros(&[r * k, d]);
    let (mut loss, mut dls, mut db) = (0.0, 0.0, 0.0);
    for i in 0..r {
        let negs = negatives.slice_rows(i * k, (i + 1) * k);
        let g = fgt_unchecked(regions.row(i), phrases.row(i), &negs, p);
        loss += g.value * inv;
        axpy_row(d_region.row_mut(i), inv, g.grads["region"].data());
        axpy_row(d_phrase.row_mut(i), inv, g.grads["positive"].data());
        let gn = &g.grads["negatives"];
        for j in 0..k {
            axpy_row(d_neg.row_mut(i * k + j), inv, gn.row(j));
        }
        dls += inv * g.grads[KEY_LOG_SCALE].data()[0];
        db += inv * g.grads[KEY_BIAS].data()[0];
    }
    GradPair::new(loss)
        .with("region", d_region)
        .with("phrase", d_phrase)
        .with("negatives", d_neg)
        .with(KEY_LOG_SCALE, Tensor::scalar(dls))
        .with(KEY_BIAS, Tensor::scalar(db))
}

fn axpy_row(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

// ---------------------------------------------------------------------------
// Cross-modal rank loss and margin synchronization

/// Per-slot margins plus the similarity cache they were computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginState {
    pub tau: Vec<f64>,
    pub prev_pos: Vec<f64>,
    /// `prev_pos.len()` rows of one similarity per hard-negative slot.
    pub prev_neg: Vec<Vec<f64>>,
    pub step: u64,
}

impl MarginState {
    pub fn new(slots: usize) -> Self {
        Self { tau: vec![0.0; slots], prev_pos: Vec::new(), prev_neg: Vec::new(), step: 0 }
    }

    pub fn slots(&self) -> usize {
        self.tau.len()
    }
}

impl Default for MarginState {
    fn default() -> Self {
        Self::new(HARD_NEGATIVES)
    }
}

/// Partial sums of `S(I,T) − S(I,T_k)` per slot over some set of pairs.
///
/// Sums are exact, so merging the statistics of any partition of a batch
/// yields bit-identical margins.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MarginStats {
    pub gap_sums: Vec<ExactSum>,
    pub count: usize,
}

impl MarginStats {
    pub fn new(slots: usize) -> Self {
        Self { gap_sums: vec![ExactSum::new(); slots], count: 0 }
    }

    pub fn from_sims(pos: &[f64], neg: &[Vec<f64>], slots: usize) -> Result<Self> {
        if pos.len() != neg.len() {
            return Err(Error::Shape(format!("{} positive vs {} negative rows", pos.len(), neg.len())));
        }
        let mut st = Self::new(slots);
        for (p, row) in pos.iter().zip(neg) {
            if row.len() != slots {
                return Err(Error::Shape(format!("{} negatives per pair, expected {slots}", row.len())));
            }
            for (acc, n) in st.gap_sums.iter_mut().zip(row) {
                acc.add(p - n);
            }
            st.count += 1;
        }
        Ok(st)
    }

    pub fn merge(&mut self, other: &MarginStats) -> Result<()> {
        if self.gap_sums.len() != other.gap_sums.len() {
            return Err(Error::Shape("margin statistics with different slot counts".into()));
        }
        for (a, b) in self.gap_sums.iter_mut().zip(&other.gap_sums) {
            a.merge(b);
        }
        self.count += other.count;
        Ok(())
    }

    /// Mean gap per slot; zero when no pairs were seen.
    pub fn margins(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.gap_sums.len()];
        }
        self.gap_sums.iter().map(|s| s.value() / self.count as f64).collect()
    }
}

/// Mean hinge `max(0, S(I,T_k) − S(I,T) + τ_k)` over all `(pair, k)` terms;
/// margins are constants. `neg_sims` is `P×K`. Keys: `pos_sims`, `neg_sims`.
pub fn cmr_loss(pos_sims: &[f64], neg_sims: &Tensor, tau: &[f64]) -> Result<GradPair> {
    let p = pos_sims.len();
    let k = tau.len();
    if neg_sims.rows() != p || neg_sims.cols() != k || (p > 0 && neg_sims.shape().len() != 2) {
        return Err(Error::Shape(format!(
            "{p} pairs with {k} margins vs negative similarities {:?}",
            neg_sims.shape()
        )));
    }
    if tau.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("margin".into()));
    }
    if p == 0 {
        return Ok(GradPair::new(0.0)
            .with("pos_sims", Tensor::zeros(&[0]))
            .with("neg_sims", Tensor::zeros(&[0, k])));
    }
    let inv = 1.0 / (p * k) as f64;
    let mut loss = 0.0;
    let mut d_pos = vec![0.0; p];
    let mut d_neg = Tensor::zeros(&[p, k]);
    for i in 0..p {
        for (j, &t) in tau.iter().enumerate() {
            let h = neg_sims.get2(i, j) - pos_sims[i] + t;
            if h > 0.0 {
                loss += h;
                d_pos[i] -= inv;
                d_neg.row_mut(i)[j] = inv;
            }
        }
    }
    Ok(GradPair::new(loss * inv)
        .with("pos_sims", Tensor::from_parts(vec![p], d_pos))
        .with("neg_sims", d_neg))
}

/// `τ_k = mean over pairs of (S_prev(I,T) − S_prev(I,T_k))`; all zero when the
/// cache is empty. Stores the cache and advances the step counter.
pub fn cmr_update_margins(prev_pos: &[f64], prev_neg: &[Vec<f64>], state: &MarginState) -> Result<MarginState> {
    let stats = MarginStats::from_sims(prev_pos, prev_neg, state.slots())?;
    Ok(apply_margin_stats(&stats, prev_pos, prev_neg, state))
}

pub(crate) fn apply_margin_stats(
    stats: &MarginStats,
    prev_pos: &[f64],
    prev_neg: &[Vec<f64>],
    state: &MarginState,
) -> MarginState {
    MarginState {
        tau: stats.margins(),
        prev_pos: prev_pos.to_vec(),
        prev_neg: prev_neg.to_vec(),
        step: state.step + 1,
    }
}

// ---------------------------------------------------------------------------
// Textual intra-modal contrastive loss

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TicNegativeSet {
    pub indices: Vec<usize>,
    pub sims: Vec<f64>,
}

impl TicNegativeSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// For each text, the up-to-10 most similar other texts with similarity
/// `≤ 0.95`, most similar first; equal similarities keep the lower index first.
pub fn tic_select_negatives(text: &Tensor) -> Result<Vec<TicNegativeSet>> {
    let n = text.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let sims = text.matmul_t(text);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = sims.row(i);
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != i && row[j] <= TIC_SIM_THRESHOLD).collect();
        cand.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        cand.truncate(TIC_TOP_K);
        out.push(TicNegativeSet { sims: cand.iter().map(|&j| row[j]).collect(), indices: cand });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicReduction {
    /// Sum over texts.
    #[default]
    Sum,
    /// Sum divided by the number of texts.
    Mean,
}

/// `Σ_i log Σ_{m∈𝒯_i} exp(S(T_i, T_m))`, skipping empty sets. Similarities are
/// recomputed from `text`; the stored values in `sets` are not used.
/// Key: `text`.
pub fn tic_loss(text: &Tensor, sets: &[TicNegativeSet], reduction: TicReduction) -> Result<GradPair> {
    let n = text.rows();
    if sets.len() != n {
        return Err(Error::Shape(format!("{} negative sets for {n} texts", sets.len())));
    }
    for set in sets {
        if let Some(&bad) = set.indices.iter().find(|&&j| j >= n) {
            return Err(Error::BadIndex { index: bad, len: n });
        }
    }
    let norm_factor = match reduction {
        TicReduction::Sum => 1.0,
        TicReduction::Mean => 1.0 / n as f64,
    };
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[n, text.cols()]);
    for (i, set) in sets.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let s: Vec<f64> = set.indices.iter().map(|&m| dot(text.row(i), text.row(m))).collect();
        loss += log_sum_exp(&s);
        let w = crate::numerics::softmax_row(&s, 1.0);
        for (&m, &wm) in set.indices.iter().zip(&w) {
            let c = wm * norm_factor;
            let (ti, tm) = (text.row(i).to_vec(), text.row(m).to_vec());
            axpy_row(grad.row_mut(i), c, &tm);
            axpy_row(grad.row_mut(m), c, &ti);
        }
    }
    Ok(GradPair::new(loss * norm_factor).with("text", grad))
}

// ---------------------------------------------------------------------------
// Weighted total

#[derive(Clone, Debug, Default)]
pub struct LossComponents {
    pub global: Option<GradPair>,
    pub fgv: Option<GradPair>,
    pub fgt: Option<GradPair>,
    pub cmr: Option<GradPair>,
    pub tic: Option<GradPair>,
}

/// Stage 1: `λ1·L_global`. Stage 2: `λ1·L_global + λ2·L_fgv + λ3·L_fgt +
/// λ4·L_cmr + λ5·L_tic`. Gradients combine with the same weights, summing
/// entries that share a key.
pub fn total_loss(stage: Stage, c: &LossComponents, w: &LossWeights) -> Result<GradPair> {
    let mut out = GradPair::new(0.0);
    let global = c.global.as_ref().ok_or(Error::MissingComponent("global"))?;
    out.accumulate(w.global, global);
    if stage == Stage::Two {
        let parts = [
            ("fgv", &c.fgv, w.fgv),
            ("fgt", &c.fgt, w.fgt),
            ("cmr", &c.cmr, w.cmr),
            ("tic", &c.tic, w.tic),
        ];
        for (name, part, weight) in parts {
            let g = part.as_ref().ok_or(Error::MissingComponent(name))?;
            out.accumulate(weight, g);
        }
    }
    Ok(out)
}
