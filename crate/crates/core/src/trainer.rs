//! AdamW, warmup, checkpoints and the two-stage training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distsim::{parallel_train_step, Replica};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, MarginState, Stage, TicReduction};
use crate::model::{LossReport, Model, ModelConfig, ObjectiveOptions};
use crate::numerics::{ParamMap, Tensor};
use crate::synthdata::Sample;

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { weight_decay: 0.001, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: ParamMap,
    pub v: ParamMap,
    pub step: u64,
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`.
///
/// All gradients are checked before anything is modified.
pub fn adamw_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &ParamMap,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    for (name, p) in &params {
        let g = grads.get(name).ok_or_else(|| Error::Shape(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient `{name}` {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGrad(name.clone()));
        }
    }
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for (name, p) in params {
        let g = &grads[&name];
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
        let (pd, gd) = (p.data_mut(), g.data());
        for (((x, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            *x -= lr * cfg.weight_decay * *x + lr * update;
        }
    }
    state.step = t;
    Ok(())
}

/// Linear ramp from 0 to `lr` over `warmup` steps, then constant.
pub fn lr_schedule(step: u64, lr: f64, warmup: u64) -> f64 {
    if step >= warmup {
        lr
    } else {
        lr * step as f64 / warmup as f64
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub warmup_steps: u64,
    pub optimizer: AdamWConfig,
    /// Defaults to 32 in stage 1 and 16 in stage 2.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    /// Stops after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub workers: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub tic_reduction: TicReduction,
    /// Used only when stage 1 starts from scratch.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::One,
            lr: 1e-6,
            warmup_steps: 30,
            optimizer: AdamWConfig::default(),
            batch_size: None,
            epochs: 1,
            max_steps: None,
            workers: 1,
            seed: 0,
            weights: LossWeights::default(),
            tic_reduction: TicReduction::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.stage {
            Stage::One => 32,
            Stage::Two => 16,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let positive = [self.lr, o.eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning rate and eps must be positive".into()));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size() == 0 || self.workers == 0 {
            return Err(Error::Config("batch size and workers must be positive".into()));
        }
        if self.batch_size() < self.workers {
            return Err(Error::TooFewSamples { samples: self.batch_size(), workers: self.workers });
        }
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_FORMAT: &str = "regalign-checkpoint-1";
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub stage: Stage,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the parameter file, in values.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    stage: Stage,
    step: u64,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `manifest.json` and `params.bin` (little-endian f64) into `dir`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in ckpt.model.named_tensors() {
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset });
        offset += t.len();
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        stage: ckpt.stage,
        step: ckpt.step,
        model: ckpt.model.config.clone(),
        tensors,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(PARAMS), &data)?;
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::MissingCheckpoint);
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    let bytes = fs::read(dir.join(PARAMS))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("parameter file is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut params = ParamMap::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the parameter file", e.name)))?;
        params.insert(e.name, Tensor::new(e.shape, slice.to_vec())?);
    }
    let model = Model::zeros(&manifest.model).with_params(&params)?;
    Ok(Checkpoint { model, stage: manifest.stage, step: manifest.step })
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_global: f64,
    pub loss_fgv: Option<f64>,
    pub loss_fgt: Option<f64>,
    pub loss_cmr: Option<f64>,
    pub loss_tic: Option<f64>,
    pub tau: Vec<f64>,
    pub worker_hash: String,
}

impl MetricsRecord {
    fn new(step: u64, lr: f64, r: &LossReport, tau: &[f64], worker_hash: String) -> Self {
        Self {
            step,
            lr,
            loss_total: r.total,
            loss_global: r.global,
            loss_fgv: r.fgv,
            loss_fgt: r.fgt,
            loss_cmr: r.cmr,
            loss_tic: r.tic,
            tau: tau.to_vec(),
            worker_hash,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub model: Model,
    pub metrics: Vec<MetricsRecord>,
    pub margins: MarginState,
}

/// Batches for one epoch: a seeded shuffle cut into `batch`-sized chunks; a
/// short tail with fewer samples than workers is dropped.
fn epoch_batches(n: usize, batch: usize, workers: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).filter(|c| c.len() >= workers).map(<[usize]>::to_vec).collect()
}

/// Trains one stage in memory. Stage 2 requires `init`; stage 1 starts from
/// `init` when given and from a seeded initialization otherwise.
pub fn train_stage(corpus: &[Sample], init: Option<&Model>, cfg: &TrainConfig) -> Result<StageOutput> {
    cfg.validate()?;
    let model = match (cfg.stage, init) {
        (_, Some(m)) => m.clone(),
        (Stage::Two, None) => return Err(Error::MissingCheckpoint),
        (Stage::One, None) => Model::init(cfg.model.clone().fit_corpus(corpus)?, cfg.seed)?,
    };
    let k = cfg.workers;
    let mut replicas = vec![Replica { model, margins: MarginState::default() }; k];
    let mut optim = vec![OptimizerState::default(); k];
    let opts = ObjectiveOptions { stage: cfg.stage, weights: cfg.weights, tic_reduction: cfg.tic_reduction };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(u8::from(cfg.stage)) << 32));

    let mut metrics = Vec::new();
    let mut step = 0u64;
    'outer: for _ in 0..cfg.epochs {
        for idx in epoch_batches(corpus.len(), cfg.batch_size(), k, &mut rng) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let batch: Vec<&Sample> = idx.iter().map(|&i| &corpus[i]).collect();
            let out = parallel_train_step(&replicas, &batch, &opts)?;
            let lr = lr_schedule(step, cfg.lr, cfg.warmup_steps);
            metrics.push(MetricsRecord::new(step, lr, &out.report, &replicas[0].margins.tau, out.worker_hash));
            for (r, o) in replicas.iter_mut().zip(optim.iter_mut()) {
                adamw_step(r.model.named_tensors_mut(), &out.grads, o, &cfg.optimizer, lr)?;
                r.margins = out.margins.clone();
            }
            step += 1;
        }
    }
    let Replica { model, margins } = replicas.swap_remove(0);
    Ok(StageOutput { model, metrics, margins })
}

/// Paths written by [`run_stage`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub output: StageOutput,
}

/// Trains one stage and writes `metrics.jsonl` and `checkpoint/` under `out`.
pub fn run_stage(corpus: &[Sample], init: Option<&Checkpoint>, cfg: &TrainConfig, out: &Path) -> Result<RunArtifacts> {
    if cfg.stage == Stage::Two && init.is_none() {
        return Err(Error::MissingCheckpoint);
    }
    let output = train_stage(corpus, init.map(|c| &c.model), cfg)?;
    fs::create_dir_all(out)?;
    let mut log = Vec::new();
    for m in &output.metrics {
        serde_json::to_writer(&mut log, m)?;
        log.push(b'\n');
    }
    let metrics = out.join("metrics.jsonl");
    write_atomic(&metrics, &log)?;
    let checkpoint = out.join("checkpoint");
    let ckpt = Checkpoint { model: output.model.clone(), stage: cfg.stage, step: output.metrics.len() as u64 };
    save_checkpoint(&checkpoint, &ckpt)?;
    Ok(RunArtifacts { checkpoint, metrics, output })
}
