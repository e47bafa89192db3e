//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regalign_core::distsim::{parallel_train_step, shard_batch, Replica};
use regalign_core::encoder::FeatureGrid;
use regalign_core::eval::{evaluate_fgovd, evaluate_retrieval, CaptionKind};
use regalign_core::losses::{
    tic_select_negatives, total_loss, LossComponents, LossWeights, MarginState, MarginStats, Stage, HARD_NEGATIVES,
    TIC_SIM_THRESHOLD, TIC_TOP_K,
};
use regalign_core::model::{Model, ModelConfig, ObjectiveOptions};
use regalign_core::numerics::{finite_diff_check, l2_normalize, FdOptions, GradPair, ParamMap, Tensor};
use regalign_core::region::{argmax, ovd_fuse, roi_align, BBox, RoiConfig, ScoredBox};
use regalign_core::synthdata::{generate_corpus, parse_corpus, write_corpus, Sample, SynthConfig};
use regalign_core::trainer::{load_checkpoint, run_stage, train_stage, TrainConfig};
use regalign_core::TicReduction;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn corpus(samples: usize, seed: u64) -> Vec<Sample> {
    generate_corpus(&SynthConfig { samples, seed, ..Default::default() }).expect("corpus")
}

fn model_for(corpus: &[Sample], seed: u64) -> Model {
    Model::init(ModelConfig::default().fit_corpus(corpus).unwrap(), seed).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

const FD_STEP: f64 = 1e-5;

/// Smallest distance of any CMR hinge argument or TIC threshold comparison
/// from its kink at the probe point.
fn kink_distance(model: &Model, batch: &[&Sample], tau: &[f64]) -> f64 {
    let g = model.batch_gradient(batch, &ObjectiveOptions::stage(Stage::Two), tau).unwrap();
    let mut d = f64::INFINITY;
    for (p, row) in g.pos_sims.iter().zip(&g.neg_sims) {
        for (n, t) in row.iter().zip(tau) {
            d = d.min((n - p + t).abs());
        }
    }
    let phrases: Vec<Vec<f64>> = batch
        .iter()
        .flat_map(|s| s.regions.iter().map(|r| model.embed_text(&r.phrase).unwrap()))
        .collect();
    let t = Tensor::stack_rows(&phrases);
    let sims = t.matmul_t(&t);
    for i in 0..t.rows() {
        for j in 0..t.rows() {
            if i != j {
                d = d.min((sims.get2(i, j) - TIC_SIM_THRESHOLD).abs());
            }
        }
    }
    d
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let data = corpus(4, 7);
    let batch: Vec<&Sample> = data.iter().collect();
    let tau: Vec<f64> = (0..HARD_NEGATIVES).map(|k| 0.02 + 0.013 * k as f64).collect();
    // First initialization whose probe point keeps 10h away from every kink.
    let (model, kink) = (0..20)
        .map(|seed| {
            let m = model_for(&data, seed);
            let k = kink_distance(&m, &batch, &tau);
            (m, k)
        })
        .find(|(_, k)| *k >= 10.0 * FD_STEP)
        .ok_or("no probe point away from kinks")?;

    let one_hot = |i: usize| {
        let mut w = [0.0; 5];
        w[i] = 1.0;
        LossWeights { global: w[0], fgv: w[1], fgt: w[2], cmr: w[3], tic: w[4] }
    };
    let cases = [
        ("global", one_hot(0)),
        ("fgv", one_hot(1)),
        ("fgt", one_hot(2)),
        ("cmr", one_hot(3)),
        ("tic", one_hot(4)),
        ("total", LossWeights::default()),
    ];
    let mut worst = Vec::new();
    for (name, weights) in cases {
        let opts = ObjectiveOptions { stage: Stage::Two, weights, tic_reduction: TicReduction::Sum };
        let f = |p: &ParamMap| -> regalign_core::Result<GradPair> {
            let g = model.with_params(p)?.batch_gradient(&batch, &opts, &tau)?;
            Ok(GradPair { value: g.report.total, grads: g.grads })
        };
        let fd = FdOptions { step: FD_STEP, max_coords_per_param: Some(6), seed: 1 };
        let r = finite_diff_check(f, &model.params(), &fd).map_err(|e| e.to_string())?;
        ensure(r.max_rel_error < 1e-4, format!("{name}: max relative error {:e}", r.max_rel_error))?;
        worst.push(format!("{name} {:.1e}", r.max_rel_error));
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("{} (kink distance {kink:.1e}) in {:.1?}", worst.join(", "), elapsed))
}

// ---------------------------------------------------------------------------
// 2. Margin synchronization

fn margin_sync() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pos: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let neg: Vec<Vec<f64>> = (0..8).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut reference: Option<Vec<u64>> = None;
    for k in [1, 2, 4, 8] {
        let shards = shard_batch(8, k).map_err(|e| e.to_string())?;
        let partials: Vec<MarginStats> = shards
            .iter()
            .map(|s| MarginStats::from_sims(&pos[s.range.clone()], &neg[s.range.clone()], 10).unwrap())
            .collect();
        // Every worker reduces the same partials in worker order.
        for _worker in 0..k {
            let mut acc = MarginStats::new(10);
            for p in &partials {
                acc.merge(p).unwrap();
            }
            let bits: Vec<u64> = acc.margins().iter().map(|t| t.to_bits()).collect();
            match &reference {
                None => reference = Some(bits),
                Some(r) => ensure(*r == bits, format!("K={k} margins differ"))?,
            }
        }
    }

    // Same through full synchronized steps.
    let data = generate_corpus(&SynthConfig { samples: 8, seed: 3, min_regions: 1, max_regions: 1, ..Default::default() })
        .unwrap();
    let batch: Vec<&Sample> = data.iter().collect();
    let model = model_for(&data, 2);
    let mut taus = Vec::new();
    for k in [1, 2, 4, 8] {
        let replicas = vec![Replica { model: model.clone(), margins: MarginState::default() }; k];
        let out = parallel_train_step(&replicas, &batch, &ObjectiveOptions::stage(Stage::Two)).map_err(|e| e.to_string())?;
        taus.push(out.margins.tau.iter().map(|t| t.to_bits()).collect::<Vec<_>>());
    }
    ensure(taus.windows(2).all(|w| w[0] == w[1]), "training-step margins differ across K")?;
    Ok("τ bit-identical for K ∈ {1,2,4,8}, all workers".into())
}

// ---------------------------------------------------------------------------
// 3. Sharding invariance

fn sharding_invariance() -> Outcome {
    let data = corpus(16, 4);
    let batch: Vec<&Sample> = data.iter().collect();
    let model = model_for(&data, 8);
    let mut margins = MarginState::default();
    margins.tau = (0..10).map(|k| 0.01 * k as f64).collect();
    let step = |k: usize| {
        let replicas = vec![Replica { model: model.clone(), margins: margins.clone() }; k];
        parallel_train_step(&replicas, &batch, &ObjectiveOptions::stage(Stage::Two)).map_err(|e| e.to_string())
    };
    let one = step(1)?;
    let four = step(4)?;
    let mut worst: f64 = 0.0;
    for (name, g) in &one.grads {
        worst = worst.max(g.max_abs_diff(&four.grads[name]));
    }
    ensure(worst < 1e-9, format!("max abs gradient difference {worst:e}"))?;
    Ok(format!("max abs difference {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 4. RoIAlign oracle

/// Bilinear value of channel `c` at continuous grid coordinate `(y, x)`.
fn bilinear(grid: &FeatureGrid, y: f64, x: f64, c: usize) -> f64 {
    let (h, w) = (grid.height as f64, grid.width as f64);
    let y = y.max(0.0).min(h - 1.0);
    let x = x.max(0.0).min(w - 1.0);
    let (yl, xl) = (y.floor(), x.floor());
    let (yh, xh) = ((yl + 1.0).min(h - 1.0), (xl + 1.0).min(w - 1.0));
    let v = |yy: f64, xx: f64| grid.at(yy as usize, xx as usize)[c];
    let (fy, fx) = (y - yl, x - xl);
    v(yl, xl) * (1.0 - fy) * (1.0 - fx) + v(yl, xh) * (1.0 - fy) * fx + v(yh, xl) * fy * (1.0 - fx) + v(yh, xh) * fy * fx
}

fn roi_oracle(grid: &FeatureGrid, b: &BBox, cfg: &RoiConfig) -> Vec<f64> {
    let [x1, y1, x2, y2] = b.coords();
    let (h, w) = (grid.height as f64, grid.width as f64);
    let s = cfg.samples as f64;
    let mut out = Vec::new();
    for by in 0..cfg.out_h {
        for bx in 0..cfg.out_w {
            for c in 0..grid.dim() {
                let mut acc = 0.0;
                for sy in 0..cfg.samples {
                    for sx in 0..cfg.samples {
                        let fy = (by as f64 + (sy as f64 + 0.5) / s) / cfg.out_h as f64;
                        let fx = (bx as f64 + (sx as f64 + 0.5) / s) / cfg.out_w as f64;
                        let y = (y1 + fy * (y2 - y1)) * h - 0.5;
                        let x = (x1 + fx * (x2 - x1)) * w - 0.5;
                        acc += bilinear(grid, y, x, c);
                    }
                }
                out.push(acc / (s * s));
            }
        }
    }
    out
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let mut pair = || {
        let a: f64 = rng.random_range(0.0..1.0);
        let b: f64 = rng.random_range(0.0..1.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        (lo, hi.max(lo + 1e-3).min(1.0))
    };
    let (x1, x2) = pair();
    let (y1, y2) = pair();
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
    let data = (0..h * w * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    FeatureGrid::new(h, w, Tensor::new(vec![h * w, d], data).unwrap()).unwrap()
}

fn roi_align_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    let mut worst_lin: f64 = 0.0;
    for _ in 0..100 {
        let (h, w, d) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let cfg = RoiConfig { out_h: rng.random_range(1..=3), out_w: rng.random_range(1..=3), samples: rng.random_range(1..=3) };
        let b = random_box(&mut rng);
        let g1 = random_grid(&mut rng, h, w, d);
        let got = roi_align(&g1, &b, &cfg).map_err(|e| e.to_string())?;
        for (a, o) in got.data().iter().zip(roi_oracle(&g1, &b, &cfg)) {
            worst = worst.max((a - o).abs());
        }

        let g2 = random_grid(&mut rng, h, w, d);
        let (alpha, beta) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mut mix = g1.features.scaled(alpha);
        mix.axpy(beta, &g2.features);
        let combined = roi_align(&FeatureGrid::new(h, w, mix).unwrap(), &b, &cfg).unwrap();
        let mut expect = got.scaled(alpha);
        expect.axpy(beta, &roi_align(&g2, &b, &cfg).unwrap());
        worst_lin = worst_lin.max(combined.max_abs_diff(&expect));
    }
    ensure(worst < 1e-12, format!("oracle difference {worst:e}"))?;
    ensure(worst_lin < 1e-12, format!("linearity difference {worst_lin:e}"))?;
    Ok(format!("oracle {worst:.1e}, linearity {worst_lin:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. TIC construction

fn tic_construction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for trial in 0..1000 {
        let n = rng.random_range(2..=32);
        let d = rng.random_range(2..=6);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for _ in 0..n {
            // Duplicates and near-duplicates exercise ties and the threshold.
            let row = if !rows.is_empty() && rng.random_bool(0.3) {
                let base: &Vec<f64> = &rows[rng.random_range(0..rows.len())];
                let jitter = if rng.random_bool(0.5) { 0.0 } else { 0.2 };
                l2_normalize(&base.iter().map(|v| v + jitter * rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
            } else {
                l2_normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
            };
            rows.push(row);
        }
        let t = Tensor::stack_rows(&rows);
        let sets = tic_select_negatives(&t).map_err(|e| e.to_string())?;
        let sims = t.matmul_t(&t);
        for (i, set) in sets.iter().enumerate() {
            let mut cand: Vec<(usize, f64)> =
                (0..n).filter(|&j| j != i).map(|j| (j, sims.get2(i, j))).filter(|&(_, s)| s <= TIC_SIM_THRESHOLD).collect();
            let available = cand.len();
            // Insertion sort: descending similarity, ascending index on ties.
            for a in 1..cand.len() {
                let mut b = a;
                while b > 0 && (cand[b].1 > cand[b - 1].1 || (cand[b].1 == cand[b - 1].1 && cand[b].0 < cand[b - 1].0)) {
                    cand.swap(b, b - 1);
                    b -= 1;
                }
            }
            cand.truncate(TIC_TOP_K);
            let want: Vec<usize> = cand.iter().map(|c| c.0).collect();
            ensure(set.indices == want, format!("trial {trial} row {i}: {:?} vs {:?}", set.indices, want))?;
            ensure(set.sims.iter().all(|&s| s <= TIC_SIM_THRESHOLD), format!("trial {trial}: similarity above threshold"))?;
            ensure(set.len() == available.min(TIC_TOP_K), format!("trial {trial}: wrong set size"))?;
        }
    }
    Ok("1000 batches match the filter-then-sort oracle".into())
}

// ---------------------------------------------------------------------------
// 6. Weighted total

fn weighted_total() -> Outcome {
    let one = || Some(GradPair::new(1.0));
    let c = LossComponents { global: one(), fgv: one(), fgt: one(), cmr: one(), tic: one() };
    let total = total_loss(Stage::Two, &c, &LossWeights::default()).map_err(|e| e.to_string())?.value;
    ensure(total == 2.1, format!("total {total:?}"))?;
    Ok(format!("total = {total}"))
}

// ---------------------------------------------------------------------------
// 7 & 8. Training

fn smoke_config(stage: Stage, workers: usize) -> TrainConfig {
    TrainConfig {
        stage,
        lr: 1e-2,
        warmup_steps: 30,
        epochs: usize::MAX,
        max_steps: Some(500),
        workers,
        seed: 0,
        ..Default::default()
    }
}

fn two_stage_smoke() -> Outcome {
    let start = Instant::now();
    let data = corpus(32, 0);
    let s1 = train_stage(&data, None, &smoke_config(Stage::One, 1)).map_err(|e| e.to_string())?;
    let short = evaluate_retrieval(&s1.model, &data, CaptionKind::Short).map_err(|e| e.to_string())?;
    let (a, b) = (short.image_to_text.r1, short.text_to_image.r1);
    ensure(a == 1.0 && b == 1.0, format!("stage 1 Recall@1 {a}/{b}"))?;

    let s2 = train_stage(&data, Some(&s1.model), &smoke_config(Stage::Two, 1)).map_err(|e| e.to_string())?;
    let fgovd = evaluate_fgovd(&s2.model, &data).map_err(|e| e.to_string())?;
    let after = evaluate_retrieval(&s2.model, &data, CaptionKind::Short).map_err(|e| e.to_string())?;
    let (c, d) = (after.image_to_text.r1, after.text_to_image.r1);
    let elapsed = start.elapsed();
    ensure(fgovd.accuracy >= 0.9, format!("stage 2 candidate top-1 {}", fgovd.accuracy))?;
    ensure(c >= 0.95 && d >= 0.95, format!("stage 2 Recall@1 {c}/{d}"))?;
    ensure(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!(
        "stage 1 R@1 {a}/{b} ({} steps); stage 2 top-1 {:.3} over {} regions, R@1 {c}/{d} ({} steps); {:.1?}",
        s1.metrics.len(),
        fgovd.accuracy,
        fgovd.regions,
        s2.metrics.len(),
        elapsed
    ))
}

fn full_run(dir: &Path, data: &[Sample]) -> Result<Vec<(String, Vec<u8>)>, String> {
    let s1 = run_stage(data, None, &smoke_config(Stage::One, 2), &dir.join("stage1")).map_err(|e| e.to_string())?;
    let ckpt = load_checkpoint(&s1.checkpoint).map_err(|e| e.to_string())?;
    run_stage(data, Some(&ckpt), &smoke_config(Stage::Two, 2), &dir.join("stage2")).map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for stage in ["stage1", "stage2"] {
        for rel in ["metrics.jsonl", "checkpoint/manifest.json", "checkpoint/params.bin"] {
            let path = dir.join(stage).join(rel);
            files.push((format!("{stage}/{rel}"), fs::read(&path).map_err(|e| e.to_string())?));
        }
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let data = corpus(32, 0);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = full_run(a.path(), &data)?;
    let fb = full_run(b.path(), &data)?;
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        ensure(x == y, format!("{name} differs"))?;
    }
    let bytes: usize = fa.iter().map(|(_, x)| x.len()).sum();
    Ok(format!("{} files ({bytes} bytes) byte-identical with K=2", fa.len()))
}

// ---------------------------------------------------------------------------
// 9. Fusion

fn fusion_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..1000 {
        let c = rng.random_range(2..12);
        let input = ScoredBox {
            bbox: random_box(&mut rng),
            confidences: (0..c).map(|_| rng.random_range(0.01..1.0)).collect(),
            sims: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let det = ovd_fuse(&input, 1.0, 10.0).map_err(|e| e.to_string())?;
        ensure(det.category == argmax(&input.confidences), format!("case {case}: alpha=1 changed the argmax"))?;

        let alpha = rng.random_range(0.0..1.0);
        let base = ovd_fuse(&input, alpha, 10.0).unwrap().category;
        let k = rng.random_range(0.1..10.0);
        let shift = rng.random_range(-5.0..5.0);
        let moved = ScoredBox {
            bbox: input.bbox,
            confidences: input.confidences.iter().map(|v| v * k).collect(),
            sims: input.sims.iter().map(|v| v + shift).collect(),
        };
        ensure(ovd_fuse(&moved, alpha, 10.0).unwrap().category == base, format!("case {case}: argmax moved"))?;
    }
    Ok("1000 cases".into())
}

// ---------------------------------------------------------------------------
// 10. Format round trip

fn format_round_trip() -> Outcome {
    let data = corpus(100, 10);
    let mut bytes = Vec::new();
    write_corpus(&data, &mut bytes).unwrap();
    let back = parse_corpus(&bytes[..]).map_err(|e| e.to_string())?;
    let mut again = Vec::new();
    write_corpus(&back, &mut again).unwrap();
    ensure(bytes == again, "re-serialization differs")?;

    let mut long = data[..5].to_vec();
    long[3].short_caption = vec![3; 197];
    let mut buf = Vec::new();
    write_corpus(&long, &mut buf).unwrap();
    match parse_corpus(&buf[..]) {
        Err(regalign_core::Error::Validation { line: 4, msg }) if msg.contains("196") => {}
        other => return Err(format!("197-token caption: {other:?}")),
    }

    let mut few = data[..5].to_vec();
    few[1].regions[0].hard_negatives.truncate(9);
    let mut buf = Vec::new();
    write_corpus(&few, &mut buf).unwrap();
    match parse_corpus(&buf[..]) {
        Err(regalign_core::Error::Validation { line: 2, msg }) if msg.contains("10") => {}
        other => return Err(format!("9 negatives: {other:?}")),
    }
    Ok(format!("{} bytes round-trip; limits rejected with line numbers", bytes.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("margin synchronization", margin_sync),
        ("sharding invariance", sharding_invariance),
        ("RoIAlign oracle", roi_align_oracle),
        ("TIC construction", tic_construction),
        ("weighted total", weighted_total),
        ("two-stage convergence", two_stage_smoke),
        ("determinism", determinism),
        ("OVD fusion", fusion_properties),
        ("format round-trip", format_round_trip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {:>2}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2}. {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
