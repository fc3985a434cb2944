//! The `vidtag` command line: synth, analyze, train, eval, predict, fuse.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{DataPaths, RunConfig};

use crate::dataio::{
    cooccurrence_matrix, infer_num_classes, label_distribution, parse_predictions, read_records, synth_generate,
    write_predictions, write_records, Dataset, FrameRecord,
};
use crate::error::{Error, Result};
use crate::fusion::{average_fuse, fuse, per_class_weights, FusionNorm};
use crate::metrics::{parse_class_csv, EvalReport, DEFAULT_TOP_K};
use crate::model::Checkpoint;
use crate::train::train_model;

#[derive(Debug, Parser)]
#[command(name = "vidtag", version, about = "Multi-label video tagging on frame-level features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train/val/test splits) from the [synth] config section.
    Synth(SynthArgs),
    /// Write label-frequency and co-occurrence tables for a dataset.
    Analyze(AnalyzeArgs),
    /// Train a model and keep the checkpoint with the best validation GAP.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Write top-k predictions for every video in a dataset.
    Predict(PredictArgs),
    /// Combine prediction files with per-class AP weights.
    Fuse(FuseArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for train.jsonl, val.jsonl and test.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for label_distribution.csv and cooccurrence.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of most frequent classes in the co-occurrence table (capped at V).
    #[arg(long, default_value_t = 20)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding train.jsonl and val.jsonl; overrides the [data] paths.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoint.json, train_log.txt and validation reports.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for summary.txt and class_ap.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub topk: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output prediction CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub topk: usize,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Prediction CSV; repeat once per model.
    #[arg(long = "pred", required = true)]
    pub preds: Vec<PathBuf>,
    /// Per-class AP CSV (as written by eval), one per --pred, in the same order.
    #[arg(long = "ap")]
    pub aps: Vec<PathBuf>,
    /// avg, l1, l2, l3 (or any lP with P >= 1).
    #[arg(long, default_value = "l1")]
    pub norm: FusionNorm,
    /// Rescale each class's weights to sum to one.
    #[arg(long)]
    pub rescale: bool,
    /// Output prediction CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub topk: usize,
}

/// Maps a result to the process exit code: 0 success, 1 validation, 2 runtime.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_validation() => 1,
        Err(_) => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Fuse(a) => cmd_fuse(&a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn check_topk(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config(vec!["--topk must be positive".into()]));
    }
    Ok(())
}

fn ensure_valid(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let mut synth = cfg
        .synth
        .clone()
        .ok_or_else(|| Error::Config(vec![format!("{}: missing [synth] section", args.config.display())]))?;
    ensure_valid(synth.validate())?;
    if let Some(seed) = args.seed {
        synth.seed = seed;
    }
    let data = synth_generate(&synth)?;
    create_dir(&args.out)?;
    for (name, records) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        write_records(args.out.join(format!("{name}.jsonl")), &data.manifest(&synth, name), records)?;
    }
    println!(
        "wrote {} train, {} val, {} test videos to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    if args.top == 0 {
        return Err(Error::Config(vec!["--top must be positive".into()]));
    }
    let (manifest, records) = read_records(&args.data)?;
    let labels: Vec<Vec<usize>> = records.iter().map(|r| r.labels.clone()).collect();
    let v = manifest.num_classes;
    let dist = label_distribution(&labels, v)?;
    let co = cooccurrence_matrix(&labels, v, args.top.min(v))?;
    create_dir(&args.out)?;
    write_text(&args.out.join("label_distribution.csv"), &dist.csv())?;
    write_text(&args.out.join("cooccurrence.csv"), &co.csv())?;
    println!("analyzed {} videos over {v} classes", records.len());
    Ok(())
}

fn load_split(path: &Path, max_len: Option<usize>) -> Result<Dataset> {
    let (mut manifest, records) = read_records(path)?;
    if let Some(l) = max_len {
        manifest.max_len = l;
    }
    Ok(Dataset::prepare(manifest, records))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    ensure_valid(cfg.validate())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.data {
        cfg.data.train = Some(dir.join("train.jsonl"));
        cfg.data.val = Some(dir.join("val.jsonl"));
    }
    let train_path = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| Error::Config(vec!["no training data: pass --data or set data.train".into()]))?;
    let train = load_split(&train_path, cfg.data.max_len)?;
    let (v, d) = (train.manifest.num_classes, train.manifest.feature_dim);
    let val = match &cfg.data.val {
        Some(p) if p.exists() || args.data.is_none() => {
            let val = load_split(p, cfg.data.max_len)?;
            if (val.manifest.num_classes, val.manifest.feature_dim) != (v, d) {
                return Err(Error::Config(vec![format!(
                    "validation set has V={} D={}, training set V={v} D={d}",
                    val.manifest.num_classes, val.manifest.feature_dim
                )]));
            }
            val.records
        }
        _ => Vec::new(),
    };
    let outcome = train_model(&cfg.model, &cfg.train, cfg.seed, v, d, &train.records, &val)?;
    create_dir(&args.out)?;
    outcome.best.save(args.out.join("checkpoint.json"))?;
    write_text(&args.out.join("train_log.txt"), &outcome.log_text())?;
    print!("{}", outcome.log_text());
    if !val.is_empty() {
        let (model, store) = outcome.best.restore()?;
        let pred = model.predict(&store, &outcome.best.stats, &val)?;
        let labels: Vec<Vec<usize>> = val.iter().map(|r| r.labels.clone()).collect();
        let report = EvalReport::compute(&pred, &labels, cfg.train.top_k)?;
        write_predictions(args.out.join("val_predictions.csv"), &pred, cfg.train.top_k)?;
        write_text(&args.out.join("val_class_ap.csv"), &report.class_csv())?;
        write_text(&args.out.join("val_summary.txt"), &report.summary())?;
    }
    Ok(())
}

fn load_for_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<Vec<FrameRecord>> {
    let data = Dataset::load(path)?;
    let m = &data.manifest;
    if (m.num_classes, m.feature_dim) != (checkpoint.num_classes, checkpoint.feature_dim) {
        return Err(Error::Config(vec![format!(
            "{} has V={} D={}, checkpoint expects V={} D={}",
            path.display(),
            m.num_classes,
            m.feature_dim,
            checkpoint.num_classes,
            checkpoint.feature_dim
        )]));
    }
    Ok(data.records)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    check_topk(args.topk)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let (model, store) = checkpoint.restore()?;
    let records = load_for_checkpoint(&checkpoint, &args.data)?;
    let pred = model.predict(&store, &checkpoint.stats, &records)?;
    let labels: Vec<Vec<usize>> = records.iter().map(|r| r.labels.clone()).collect();
    let report = EvalReport::compute(&pred, &labels, args.topk)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("summary.txt"), &report.summary())?;
    write_text(&args.out.join("class_ap.csv"), &report.class_csv())?;
    print!("{}", report.summary());
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    check_topk(args.topk)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let (model, store) = checkpoint.restore()?;
    let records = load_for_checkpoint(&checkpoint, &args.data)?;
    let pred = model.predict(&store, &checkpoint.stats, &records)?;
    write_predictions(&args.out, &pred, args.topk)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_fuse(args: &FuseArgs) -> Result<()> {
    check_topk(args.topk)?;
    let weighted = args.norm != FusionNorm::Avg;
    if weighted && args.aps.len() != args.preds.len() {
        return Err(Error::Config(vec![format!(
            "--norm {} needs one --ap per --pred ({} vs {})",
            args.norm,
            args.aps.len(),
            args.preds.len()
        )]));
    }
    let pred_texts = args.preds.iter().map(|p| read_text(p)).collect::<Result<Vec<_>>>()?;
    let aps = if weighted {
        args.aps
            .iter()
            .map(|p| parse_class_csv(&read_text(p)?, &p.display().to_string()))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let inferred = pred_texts.iter().map(|t| infer_num_classes(t)).max().unwrap_or(0);
    let v = aps.first().map_or(inferred, Vec::len).max(1);
    if inferred > v {
        return Err(Error::Misaligned(format!("predictions mention class {} but AP files cover {v}", inferred - 1)));
    }
    let preds = pred_texts
        .iter()
        .zip(&args.preds)
        .map(|(t, p)| parse_predictions(t, v, &p.display().to_string()))
        .collect::<Result<Vec<_>>>()?;
    let fused = if weighted {
        fuse(&preds, &per_class_weights(&aps, args.norm, args.rescale)?)?
    } else {
        average_fuse(&preds)?
    };
    write_predictions(&args.out, &fused, args.topk)
}
