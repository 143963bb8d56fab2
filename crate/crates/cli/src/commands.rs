use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use swingseq::corpus::{load_clip_frames, load_prepared, load_valid_corpus, write_synthetic_corpus};
use swingseq::dataset::{
    corpus_stats, generate_splits, load_corpus, validate_annotation, BBox, SplitAssignment, SwingAnnotation,
    DEFAULT_FPS,
};
use swingseq::evaluation::{pce, pce_table_csv};
use swingseq::inference::{detect_events, infer_frames, DetectionResult};
use swingseq::io::{read_frame_dir, write_atomic};
use swingseq::model::{count_flops, count_params, Checkpoint, ModelConfig, SwingNet};
use swingseq::synthetic::SyntheticCorpusSpec;
use swingseq::training::{
    ablation_csv, reference_ablation_grid, run_ablation, train_with_progress, AblationData, ExperimentConfig,
};

use crate::UsageError;

#[derive(Debug, Parser)]
#[command(name = "swingseq", version, about, arg_required_else_help = true)]
pub struct Cli {
    /// Log filter, e.g. `info`, `debug` or `swingseq=trace`. `RUST_LOG` overrides it.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every annotation in a corpus file against the schema.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        /// Write the violations as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign samples to cross-validation folds, keeping source videos together.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 4)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON map sample_id -> fold. Printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary statistics of a corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic corpus (corpus.json plus frame directories).
    Synth {
        #[arg(long, default_value_t = 40)]
        n: usize,
        /// Number of distinct source videos the clips are spread over.
        #[arg(long)]
        sources: Option<usize>,
        #[arg(long, default_value_t = 96)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Train and evaluate the reference ablation grid.
    Ablate(AblateArgs),
    /// Per-frame probabilities and detected events for one clip or a whole corpus.
    Infer(InferArgs),
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Frame rate for the tolerance; each annotation's own rate when omitted.
        #[arg(long)]
        fps: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a results-table CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Row label used in the CSV.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Parameter counts as CSV rows.
    Params(CountArgs),
    /// FLOP counts (one multiply-accumulate = one FLOP) as CSV rows.
    Flops(CountArgs),
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// `--bidirectional` alone means true.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    bidirectional: Option<bool>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut ModelConfig) {
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.seq_len {
            cfg.seq_len = v;
        }
        if let Some(v) = self.layers {
            cfg.lstm_layers = v;
        }
        if let Some(v) = self.hidden {
            cfg.lstm_hidden = v;
        }
        if let Some(v) = self.bidirectional {
            cfg.bidirectional = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Fold assignment from `split`; required with `--split`.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Hold out this fold; all samples are used when omitted.
    #[arg(long)]
    split: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    freeze_k: Option<usize>,
    #[arg(long)]
    pretrained_weights: Option<PathBuf>,
    /// Start from random backbone weights.
    #[arg(long)]
    scratch: bool,
    #[command(flatten)]
    model: ModelFlags,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    /// Validation fold.
    #[arg(long, default_value_t = 0)]
    split: usize,
    /// Comma-separated configuration ids; all eleven when omitted.
    #[arg(long, value_delimiter = ',')]
    configs: Vec<usize>,
    /// Overrides the protocol's iteration count, e.g. for smoke runs.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    pretrained_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of numbered frame images.
    #[arg(long, conflicts_with = "corpus")]
    clip: Option<PathBuf>,
    /// Run every sample of this corpus instead of a single clip.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// With `--corpus`: restrict to the samples of this fold.
    #[arg(long, requires = "splits")]
    split: Option<usize>,
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Crop box `x,y,w,h` (normalized) for `--clip`.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    bbox: Option<Vec<f64>>,
    /// Use the centre square crop instead of the annotated box.
    #[arg(long)]
    no_bbox: bool,
    /// Frame rate recorded for `--clip`.
    #[arg(long, default_value_t = DEFAULT_FPS)]
    fps: f64,
    /// Window length; the checkpoint's training length when omitted.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Per-frame probability CSV (single clip only).
    #[arg(long)]
    timeline: Option<PathBuf>,
    /// Detected events as a JSON array of detection records.
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Start from a `key = value` experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print every configuration of the reference ablation grid.
    #[arg(long, conflicts_with_all = ["config", "d", "seq_len", "layers", "hidden", "bidirectional"])]
    grid: bool,
    #[command(flatten)]
    model: ModelFlags,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Validate { corpus, out } => validate(&corpus, out.as_deref()),
        Command::Split {
            corpus,
            folds,
            seed,
            out,
        } => split(&corpus, folds, seed, out.as_deref()),
        Command::Stats { corpus, out } => {
            let stats = corpus_stats(&load_valid_corpus(&corpus)?)?;
            emit_json(&stats, out.as_deref())
        }
        Command::Synth {
            n,
            sources,
            image_size,
            out,
            seed,
        } => {
            let spec = SyntheticCorpusSpec {
                n,
                n_sources: sources.unwrap_or_else(|| n.div_ceil(4).max(1)),
                image_size,
                seed,
                ..SyntheticCorpusSpec::default()
            };
            spec.validate()?;
            let anns = write_synthetic_corpus(&out, &spec)?;
            info!("wrote {} clips to {}", anns.len(), out.display());
            Ok(())
        }
        Command::Train(args) => train(args),
        Command::Ablate(args) => ablate(args),
        Command::Infer(args) => infer(args),
        Command::Eval {
            detections,
            truth,
            fps,
            out,
            csv,
            name,
        } => eval(&detections, &truth, fps, &out, csv.as_deref(), &name),
        Command::Params(args) => counts(args, "params"),
        Command::Flops(args) => counts(args, "flops"),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Writes `value` as JSON to `out`, or to stdout.
fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = to_json(value)?;
    match out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| swingseq::Error::Io {
        context: format!("reading {}", path.display()),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        swingseq::Error::Json {
            context: path.display().to_string(),
            source: e,
        }
        .into()
    })
}

fn validate(corpus: &Path, out: Option<&Path>) -> Result<()> {
    let anns = load_corpus(corpus)?;
    let mut report = BTreeMap::new();
    for a in &anns {
        let v = validate_annotation(a);
        if !v.is_empty() {
            report.insert(a.sample_id.clone(), v);
        }
    }
    if let Some(path) = out {
        write_atomic(path, to_json(&report)?.as_bytes())?;
    }
    for (id, violations) in &report {
        for v in violations {
            println!("{id}: {v}");
        }
    }
    if report.is_empty() {
        println!("{} samples, all valid", anns.len());
        Ok(())
    } else {
        Err(swingseq::Error::Input(format!("{} of {} samples are invalid", report.len(), anns.len())).into())
    }
}

fn split(corpus: &Path, folds: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let anns = load_valid_corpus(corpus)?;
    let split = generate_splits(&anns, folds, seed)?;
    info!("fold sizes {:?}", split.fold_sizes());
    emit_json(&split.fold_of_sample, out)
}

fn load_splits(path: &Path) -> Result<SplitAssignment> {
    let fold_of_sample: BTreeMap<String, usize> = read_json(path)?;
    let n_folds = fold_of_sample.values().max().map_or(0, |m| m + 1);
    Ok(SplitAssignment {
        n_folds,
        seed: 0,
        fold_of_sample,
    })
}

/// Splits the corpus into (training, held-out) for `fold`, insisting that
/// every sample has a fold.
fn partition(anns: &[SwingAnnotation], splits: &SplitAssignment, fold: usize) -> Result<(Vec<SwingAnnotation>, Vec<SwingAnnotation>)> {
    if fold >= splits.n_folds {
        return Err(UsageError(format!("fold {fold} does not exist (splits have {} folds)", splits.n_folds)).into());
    }
    if let Some(a) = anns.iter().find(|a| splits.fold_of(&a.sample_id).is_none()) {
        return Err(swingseq::Error::Input(format!("{} has no fold in the split file", a.sample_id)).into());
    }
    let (train, held): (Vec<_>, Vec<_>) = splits.partition(anns, fold);
    Ok((train.into_iter().cloned().collect(), held.into_iter().cloned().collect()))
}

/// Default -> config file -> `--set` overrides -> dedicated flags.
fn experiment_config(args: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_text(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    args.model.apply(&mut cfg.model);
    let t = &mut cfg.train;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.iterations {
        t.iterations = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.freeze_k {
        cfg.model.freeze_k = v;
    }
    if let Some(p) = &args.pretrained_weights {
        cfg.pretrained_weights = Some(p.clone());
    }
    if args.scratch {
        cfg.model.pretrained = false;
        cfg.pretrained_weights = None;
    }
    cfg.validate()?;
    if cfg.model.pretrained && cfg.pretrained_weights.is_none() {
        return Err(swingseq::Error::Config(
            "pretrained = true needs pretrained_weights (a checkpoint holding backbone arrays); use --scratch to train from random weights".into(),
        )
        .into());
    }
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    if args.split.is_some() && args.splits.is_none() {
        return Err(UsageError("--split needs --splits".into()).into());
    }
    let cfg = experiment_config(&args)?;
    for w in cfg.model.warnings() {
        warn!("{w}");
    }
    let anns = load_valid_corpus(&args.corpus)?;
    let train_anns = match (&args.splits, args.split) {
        (Some(path), Some(fold)) => partition(&anns, &load_splits(path)?, fold)?.0,
        _ => anns,
    };
    info!("preparing {} training clips at {}px", train_anns.len(), cfg.model.d);
    let clips = load_prepared(&args.corpus, &train_anns, cfg.model.d)?;

    let mut model = SwingNet::new(cfg.model, cfg.train.seed)?;
    if let Some(path) = &cfg.pretrained_weights {
        let weights = Checkpoint::load(path)?;
        model.load_pretrained_backbone(&weights.arrays)?;
        model.freeze_layers(cfg.model.freeze_k)?;
    }
    info!(
        "training {} parameters for {} iterations (batch {})",
        model.num_params(),
        cfg.train.iterations,
        cfg.train.batch_size
    );
    let every = (cfg.train.iterations / 20).max(1);
    let report = train_with_progress(&mut model, &clips, &cfg.train, &mut |it, loss| {
        if it % every == 0 {
            info!("iteration {it}: loss {loss:.4}");
        }
    })?;
    report.checkpoint.save(&args.out)?;
    if let Some(path) = &args.loss_csv {
        write_atomic(path, report.loss_curve_csv().as_bytes())?;
    }
    info!("wrote {} after {:.1}s", args.out.display(), report.wall_seconds);
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let mut grid = reference_ablation_grid();
    if !args.configs.is_empty() {
        if let Some(bad) = args.configs.iter().find(|id| !grid.iter().any(|e| e.id == **id)) {
            return Err(UsageError(format!("unknown ablation configuration {bad}")).into());
        }
        grid.retain(|e| args.configs.contains(&e.id));
    }
    for entry in &mut grid {
        entry.train.seed = args.seed;
        if let Some(n) = args.iterations {
            entry.train.iterations = n;
        }
    }
    let anns = load_valid_corpus(&args.corpus)?;
    let (train_anns, val_anns) = partition(&anns, &load_splits(&args.splits)?, args.split)?;
    let pretrained = args.pretrained_weights.as_deref().map(Checkpoint::load).transpose()?;

    let load = |set: &[SwingAnnotation]| -> Result<Vec<_>> {
        set.iter().map(|a| Ok(load_clip_frames(&args.corpus, a)?)).collect()
    };
    let (train_frames, val_frames) = (load(&train_anns)?, load(&val_anns)?);
    let data = AblationData {
        train: train_anns.iter().zip(&train_frames).collect(),
        validation: val_anns.iter().zip(&val_frames).collect(),
        pretrained: pretrained.as_ref().map(|c| &c.arrays),
    };
    let rows = run_ablation(&grid, &data)?;
    write_atomic(&args.out, ablation_csv(&rows).as_bytes())?;
    info!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<SwingNet> {
    Ok(Checkpoint::load(path)?.to_model()?)
}

fn infer(args: InferArgs) -> Result<()> {
    if args.clip.is_none() && args.corpus.is_none() {
        return Err(UsageError("give either --clip or --corpus".into()).into());
    }
    if args.timeline.is_some() && args.clip.is_none() {
        return Err(UsageError("--timeline is only available with --clip".into()).into());
    }
    if args.bbox.is_some() && (args.no_bbox || args.clip.is_none()) {
        return Err(UsageError("--bbox applies to --clip and conflicts with --no-bbox".into()).into());
    }
    if args.seq_len == Some(0) {
        return Err(UsageError("--seq-len must be at least 1".into()).into());
    }
    let model = load_model(&args.ckpt)?;
    let t = args.seq_len.unwrap_or(model.config().seq_len);

    let mut detections: Vec<DetectionResult> = Vec::new();
    if let Some(dir) = &args.clip {
        let frames = read_frame_dir(dir, args.fps)?;
        let bbox = args.bbox.as_ref().map(|b| BBox::new(b[0], b[1], b[2], b[3]));
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip".into());
        let timeline = infer_frames(&model, &id, &frames, bbox, t)?;
        if let Some(path) = &args.timeline {
            write_atomic(path, timeline.to_csv().as_bytes())?;
        }
        detections.push(detect_events(&id, &timeline));
    } else if let Some(corpus) = &args.corpus {
        let anns = load_valid_corpus(corpus)?;
        let anns = match (&args.splits, args.split) {
            (Some(path), Some(fold)) => partition(&anns, &load_splits(path)?, fold)?.1,
            _ => anns,
        };
        for ann in &anns {
            let frames = load_clip_frames(corpus, ann)?;
            let bbox = (!args.no_bbox).then_some(ann.bbox);
            let timeline = infer_frames(&model, &ann.sample_id, &frames, bbox, t)?;
            detections.push(detect_events(&ann.sample_id, &timeline));
        }
        info!("detected events in {} clips", detections.len());
    }
    match &args.events {
        Some(path) => write_atomic(path, to_json(&detections)?.as_bytes())?,
        None if args.timeline.is_none() => print!("{}", to_json(&detections)?),
        None => {}
    }
    Ok(())
}

fn eval(detections: &Path, truth: &Path, fps: Option<f64>, out: &Path, csv: Option<&Path>, name: &str) -> Result<()> {
    let dets: Vec<DetectionResult> = read_json(detections)?;
    let truths = load_valid_corpus(truth)?;
    let report = pce(&dets, &truths, fps)?;
    write_atomic(out, to_json(&report)?.as_bytes())?;
    if let Some(path) = csv {
        write_atomic(path, pce_table_csv(&[(name.to_string(), &report)]).as_bytes())?;
    }
    println!(
        "PCE {:.1}% over {} samples ({:.1}% without Address and Finish)",
        report.overall_pce, report.n_samples, report.pce_without_address_finish
    );
    Ok(())
}

const COUNT_HEADER: &str = "id,d,seq_len,layers,hidden,bidirectional";

fn count_row(id: &str, m: &ModelConfig, what: &str) -> String {
    let value = match what {
        "params" => {
            let p = count_params(m);
            format!("{p},{:.2}", p as f64 / 1e6)
        }
        _ => {
            let f = count_flops(m, m.seq_len);
            format!("{f},{:.2}", f as f64 / 1e9)
        }
    };
    format!("{id},{},{},{},{},{},{value}", m.d, m.seq_len, m.lstm_layers, m.lstm_hidden, m.bidirectional)
}

fn counts(args: CountArgs, what: &str) -> Result<()> {
    let scale = if what == "params" { "params_1e6" } else { "flops_1e9" };
    println!("{COUNT_HEADER},{what},{scale}");
    if args.grid {
        for e in reference_ablation_grid() {
            println!("{}", count_row(&e.id.to_string(), &e.model, what));
        }
        return Ok(());
    }
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_text(&text)?.model
        }
        None => ModelConfig::default(),
    };
    args.model.apply(&mut cfg);
    cfg.validate()?;
    println!("{}", count_row("custom", &cfg, what));
    Ok(())
}
