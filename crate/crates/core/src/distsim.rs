//! Simulated data-parallel workers.
//!
//! Each worker holds a full replica of the parameters and margin state. A step
//! encodes shards concurrently, all-gathers the embeddings, evaluates the
//! objective on the union batch, backpropagates each shard locally and then
//! all-reduces gradients and margin statistics in fixed worker order.

use std::ops::Range;
use std::thread;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{apply_margin_stats, MarginState, MarginStats, Stage};
use crate::model::{hash_params, hex, objective, Embeddings, LossReport, Model, ObjectiveOptions, ShardOffsets};
use crate::numerics::{ParamMap, Tensor};
use crate::synthdata::Sample;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerShard {
    pub worker: usize,
    pub range: Range<usize>,
}

impl WorkerShard {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

/// Contiguous balanced partition: the first `N mod K` workers take
/// `⌈N/K⌉` samples, the rest `⌊N/K⌋`, in index order.
pub fn shard_batch(n: usize, workers: usize) -> Result<Vec<WorkerShard>> {
    if workers == 0 || n < workers {
        return Err(Error::TooFewSamples { samples: n, workers });
    }
    let (base, extra) = (n / workers, n % workers);
    let mut start = 0;
    Ok((0..workers)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let s = WorkerShard { worker: w, range: start..start + len };
            start += len;
            s
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    /// `Σ_w c_w·v_w / Σ_w c_w`.
    MeanByCount,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReduceResult {
    pub value: Tensor,
    pub count: usize,
}

/// Reduces per-worker tensors sequentially in worker order.
pub fn all_reduce(values: &[Tensor], counts: &[usize], mode: ReduceMode) -> Result<ReduceResult> {
    let first = values.first().ok_or_else(|| Error::Shape("all-reduce over zero workers".into()))?;
    if counts.len() != values.len() {
        return Err(Error::Shape(format!("{} counts for {} workers", counts.len(), values.len())));
    }
    if let Some(bad) = values.iter().find(|v| v.shape() != first.shape()) {
        return Err(Error::Shape(format!("worker tensors {:?} vs {:?}", bad.shape(), first.shape())));
    }
    let total: usize = counts.iter().sum();
    if values.len() == 1 && mode == ReduceMode::MeanByCount && total > 0 {
        return Ok(ReduceResult { value: first.clone(), count: total });
    }
    let mut acc = Tensor::zeros(first.shape());
    for (v, &c) in values.iter().zip(counts) {
        let w = match mode {
            ReduceMode::Sum => 1.0,
            ReduceMode::MeanByCount => c as f64,
        };
        acc.axpy(w, v);
    }
    if mode == ReduceMode::MeanByCount {
        if total == 0 {
            return Err(Error::Shape("mean over zero contributions".into()));
        }
        acc.scale(1.0 / total as f64);
    }
    Ok(ReduceResult { value: acc, count: total })
}

/// Reduces named gradient maps key by key.
pub fn all_reduce_params(values: &[ParamMap], counts: &[usize], mode: ReduceMode) -> Result<ParamMap> {
    let first = values.first().ok_or_else(|| Error::Shape("all-reduce over zero workers".into()))?;
    let mut out = ParamMap::new();
    for name in first.keys() {
        let per: Vec<Tensor> = values
            .iter()
            .map(|m| m.get(name).cloned().ok_or_else(|| Error::Shape(format!("worker lacks `{name}`"))))
            .collect::<Result<_>>()?;
        out.insert(name.clone(), all_reduce(&per, counts, mode)?.value);
    }
    Ok(out)
}

/// State held by one simulated worker.
#[derive(Clone, Debug, PartialEq)]
pub struct Replica {
    pub model: Model,
    pub margins: MarginState,
}

impl Replica {
    /// Hash of parameters and margin state; equal across workers when in sync.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        hash_params(&mut h, &self.model.named_tensors());
        for t in &self.margins.tau {
            h.update(t.to_le_bytes());
        }
        h.update(self.margins.step.to_le_bytes());
        hex(&h.finalize())
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Shard-size weighted mean of worker gradients.
    pub grads: ParamMap,
    /// Margins for the next step.
    pub margins: MarginState,
    pub report: LossReport,
    /// Replica hash observed at step entry.
    pub worker_hash: String,
}

/// One synchronized step over `batch` with one worker per replica.
pub fn parallel_train_step(replicas: &[Replica], batch: &[&Sample], opts: &ObjectiveOptions) -> Result<StepOutput> {
    let k = replicas.len();
    let shards = shard_batch(batch.len(), k)?;
    let hashes: Vec<String> = replicas.iter().map(Replica::hash).collect();
    for (w, h) in hashes.iter().enumerate().skip(1) {
        if *h != hashes[0] {
            return Err(Error::Desync { worker: w, expected: hashes[0].clone(), got: h.clone() });
        }
    }
    let grid_side = replicas[0].model.batch_grid_side(batch)?;

    // Local forward passes.
    let forwards = run_workers(&shards, |w, s| {
        replicas[w].model.encode_shard(&batch[s.range.clone()], opts.stage, grid_side)
    })?;

    // All-gather; every worker sees the same union embeddings and objective.
    let parts: Vec<Embeddings> = forwards.iter().map(|f| f.embeddings()).collect();
    let emb = Embeddings::gather(&parts)?;
    let tau = &replicas[0].margins.tau;
    let obj = objective(&emb, &replicas[0].model.sigmoid_params(), opts, tau)?;

    let mut offsets = Vec::with_capacity(k);
    let mut acc = ShardOffsets::default();
    for f in &forwards {
        offsets.push(acc);
        acc.samples += f.num_samples();
        acc.regions += f.num_regions();
    }

    // Local backward; the shared scalar gradients are split by shard share.
    // Each local gradient is rescaled by N/n_w so the count-weighted mean
    // recovers the full-batch gradient.
    let n = batch.len() as f64;
    let local = run_workers(&shards, |w, s| {
        let model = &replicas[w].model;
        let mut g = Model::zeros(&model.config);
        model.backward_shard(&forwards[w], &obj.grads, offsets[w], &mut g);
        let share = s.len() as f64 / n;
        let p = if k == 1 {
            g.add_scalar_grads(&obj.grads, 1.0);
            g.params()
        } else {
            g.add_scalar_grads(&obj.grads, share);
            let mut p = g.params();
            for t in p.values_mut() {
                t.scale(1.0 / share);
            }
            p
        };
        let regions = offsets[w].regions..offsets[w].regions + forwards[w].num_regions();
        let stats = if opts.stage == Stage::Two {
            MarginStats::from_sims(&obj.pos_sims[regions.clone()], &obj.neg_sims[regions], tau.len())?
        } else {
            MarginStats::new(tau.len())
        };
        Ok((p, stats))
    })?;

    let counts: Vec<usize> = shards.iter().map(WorkerShard::len).collect();
    let grads: Vec<ParamMap> = local.iter().map(|(g, _)| g.clone()).collect();
    let grads = all_reduce_params(&grads, &counts, ReduceMode::MeanByCount)?;

    let margins = if opts.stage == Stage::Two {
        let mut stats = MarginStats::new(tau.len());
        for (_, s) in &local {
            stats.merge(s)?;
        }
        apply_margin_stats(&stats, &obj.pos_sims, &obj.neg_sims, &replicas[0].margins)
    } else {
        replicas[0].margins.clone()
    };

    Ok(StepOutput { grads, margins, report: obj.report, worker_hash: hashes[0].clone() })
}

/// Runs `f` for every shard on its own thread; results come back in worker
/// order regardless of completion order.
fn run_workers<T, F>(shards: &[WorkerShard], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &WorkerShard) -> Result<T> + Sync,
{
    if shards.len() == 1 {
        return Ok(vec![f(0, &shards[0])?]);
    }
    thread::scope(|scope| {
        let handles: Vec<_> = shards.iter().map(|s| scope.spawn(|| f(s.worker, s))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}
