//! `regalign` command-line tool. Every subcommand prints one JSON document to
//! stdout; errors go to stderr with a non-zero exit code.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use regalign_core::eval::{
    default_shape_classes, evaluate_bbox, evaluate_fgovd, evaluate_retrieval, CaptionKind, ClassSpec,
};
use regalign_core::numerics::FdOptions;
use regalign_core::region::{ovd_fuse, ScoredBox, DEFAULT_FUSION_ALPHA, DEFAULT_FUSION_SCALE};
use regalign_core::synthdata::{generate_corpus, load_corpus, save_corpus, AttributeVocab, SynthConfig};
use regalign_core::trainer::{load_checkpoint, run_stage, Checkpoint, TrainConfig};
use regalign_core::{model, Stage};

#[derive(Parser)]
#[command(name = "regalign", version, about = "Region-aware dual-encoder alignment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic JSON-lines corpus.
    Generate(GenerateArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Image/caption Recall@{1,5,10} in both directions.
    EvalRetrieval(RetrievalArgs),
    /// Zero-shot region classification accuracy.
    EvalBbox(BboxArgs),
    /// Region versus ten hard negatives, top-1 accuracy.
    EvalFgovd(EvalArgs),
    /// Finite-difference check of all loss gradients.
    GradCheck(GradCheckArgs),
    /// Fuse detector confidences with alignment similarities.
    OvdFuse(FuseArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    min_regions: usize,
    #[arg(long, default_value_t = 3)]
    max_regions: usize,
    /// Patch-grid side; times 16 pixels it must be a resolution bucket.
    #[arg(long, default_value_t = 8)]
    grid_side: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    data: PathBuf,
    /// TOML training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to start from; required for stage 2.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct RetrievalArgs {
    #[command(flatten)]
    common: EvalArgs,
    /// Use long captions.
    #[arg(long, conflicts_with = "short")]
    long: bool,
    /// Use short captions (the default).
    #[arg(long)]
    short: bool,
}

#[derive(Args)]
struct BboxArgs {
    #[command(flatten)]
    common: EvalArgs,
    /// JSON array of `{"name", "tokens"}` class descriptions; defaults to one
    /// class per shape and language of the synthetic vocabulary.
    #[arg(long)]
    classes: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 4)]
    coords: usize,
}

#[derive(Args)]
struct FuseArgs {
    /// JSON array of `{"box", "confidences", "sims"}`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FUSION_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_FUSION_SCALE)]
    scale: f64,
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(v) => println!("{}", serde_json::to_string_pretty(&v).expect("serializable output")),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn run(cmd: Command) -> Result<Value> {
    match cmd {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::EvalRetrieval(a) => {
            let (ckpt, corpus) = load_eval(&a.common)?;
            let kind = if a.long { CaptionKind::Long } else { CaptionKind::Short };
            let r = evaluate_retrieval(&ckpt.model, &corpus, kind)?;
            Ok(json!({ "captions": kind, "samples": corpus.len(), "recall": r }))
        }
        Command::EvalBbox(a) => {
            let (ckpt, corpus) = load_eval(&a.common)?;
            let classes: Vec<ClassSpec> = match &a.classes {
                Some(p) => read_json(p)?,
                None => default_shape_classes(&AttributeVocab::default()),
            };
            let r = evaluate_bbox(&ckpt.model, &corpus, &classes)?;
            Ok(json!({ "classes": classes.len(), "result": r }))
        }
        Command::EvalFgovd(a) => {
            let (ckpt, corpus) = load_eval(&a)?;
            Ok(json!({ "result": evaluate_fgovd(&ckpt.model, &corpus)? }))
        }
        Command::GradCheck(a) => grad_check(a),
        Command::OvdFuse(a) => fuse(a),
    }
}

fn generate(a: GenerateArgs) -> Result<Value> {
    let cfg = SynthConfig {
        samples: a.samples,
        seed: a.seed,
        min_regions: a.min_regions,
        max_regions: a.max_regions,
        grid_side: a.grid_side,
        ..Default::default()
    };
    let corpus = generate_corpus(&cfg)?;
    save_corpus(&corpus, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let regions: usize = corpus.iter().map(|s| s.regions.len()).sum();
    Ok(json!({
        "out": a.out,
        "samples": corpus.len(),
        "regions": regions,
        "vocab_size": cfg.vocab.vocab_size(),
        "patch_dim": cfg.vocab.patch_dim(),
    }))
}

fn train(a: TrainArgs) -> Result<Value> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => TrainConfig::default(),
    };
    cfg.stage = Stage::try_from(a.stage)?;
    if let Some(k) = a.workers {
        cfg.workers = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.validate()?;
    let corpus = load_corpus(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let init = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let run = run_stage(&corpus, init.as_ref(), &cfg, &a.out)?;
    Ok(json!({
        "stage": a.stage,
        "steps": run.output.metrics.len(),
        "workers": cfg.workers,
        "final": run.output.metrics.last(),
        "checkpoint": run.checkpoint,
        "metrics": run.metrics,
        "model_hash": run.output.model.hash(),
    }))
}

fn load_eval(a: &EvalArgs) -> Result<(Checkpoint, Vec<regalign_core::Sample>)> {
    let ckpt = load_checkpoint(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let corpus = load_corpus(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    Ok((ckpt, corpus))
}

fn grad_check(a: GradCheckArgs) -> Result<Value> {
    const TOLERANCE: f64 = 1e-4;
    let fd = FdOptions { max_coords_per_param: Some(a.coords), seed: a.seed, ..Default::default() };
    let r = model::check_gradients(a.seed, &fd)?;
    let worst = r.worst();
    let errors: serde_json::Map<String, Value> = r.max_rel_error.iter().map(|(n, e)| (n.clone(), json!(e))).collect();
    let out = json!({
        "seed": a.seed,
        "model_seed": r.model_seed,
        "max_rel_error": errors,
        "kink_distance": r.kink_distance,
        "coords_checked": r.coords_checked,
        "tolerance": TOLERANCE,
        "pass": worst < TOLERANCE,
    });
    if worst >= TOLERANCE {
        bail!("gradient check failed: {out}");
    }
    Ok(out)
}

fn fuse(a: FuseArgs) -> Result<Value> {
    let boxes: Vec<ScoredBox> = read_json(&a.input)?;
    let fused = boxes.iter().map(|b| ovd_fuse(b, a.alpha, a.scale)).collect::<Result<Vec<_>, _>>()?;
    let mut bytes = serde_json::to_vec_pretty(&fused)?;
    bytes.push(b'\n');
    fs::write(&a.out, bytes).with_context(|| format!("writing {}", a.out.display()))?;
    let categories: Vec<usize> = fused.iter().map(|f| f.category).collect();
    Ok(json!({ "boxes": fused.len(), "alpha": a.alpha, "categories": categories, "out": a.out }))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}
