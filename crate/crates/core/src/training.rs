//! Class-weighted cross-entropy, Adam, the window-sampling training loop and
//! the ablation runner.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{SwingAnnotation, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::evaluation::pce;
use crate::inference::{detect_events, infer_timeline};
use crate::model::{count_flops, count_params, Checkpoint, ModelConfig, SwingNet, WeightMap};
use crate::nn::kernels::softmax_in_place;
use crate::nn::Parameters;
use crate::preprocess::{augment, derive_rng, AugmentParams, FrameSequence, PreparedClip};

/// Probabilities below this are clamped before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Loss weight of the background class.
pub const NO_EVENT_WEIGHT: f32 = 0.1;

pub fn default_class_weights() -> [f32; NUM_CLASSES] {
    let mut w = [1.0; NUM_CLASSES];
    w[NUM_CLASSES - 1] = NO_EVENT_WEIGHT;
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_initial: f64,
    /// First iteration (0-based) that uses the reduced rate.
    pub lr_drop_iteration: Option<usize>,
    pub lr_drop_factor: f64,
    pub class_weights: [f32; NUM_CLASSES],
    pub augment: AugmentParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The full baseline schedule: 7000 iterations, rate divided by ten
    /// after 5000, flips and affine jitter enabled.
    fn default() -> Self {
        TrainConfig {
            batch_size: 6,
            iterations: 7000,
            lr_initial: 1e-3,
            lr_drop_iteration: Some(5000),
            lr_drop_factor: 10.0,
            class_weights: default_class_weights(),
            augment: AugmentParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Ablation protocol: constant rate, flips only, 10k iterations.
    pub fn ablation(batch_size: usize) -> Self {
        TrainConfig {
            batch_size,
            iterations: 10_000,
            lr_drop_iteration: None,
            augment: AugmentParams::flip_only(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.lr_initial));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!("drop factor must be positive, got {}", self.lr_drop_factor));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return bad(format!("class weights must be positive: {:?}", self.class_weights));
        }
        self.augment.validate()
    }
}

pub fn lr_at(cfg: &TrainConfig, iteration: usize) -> f64 {
    match cfg.lr_drop_iteration {
        Some(drop) if iteration >= drop => cfg.lr_initial / cfg.lr_drop_factor,
        _ => cfg.lr_initial,
    }
}

/// Mean over frames of `w[y] * -ln p[y]`.
pub fn weighted_cross_entropy(probs: &[f32], labels: &[u8], weights: &[f32; NUM_CLASSES]) -> f64 {
    assert_eq!(probs.len(), labels.len() * NUM_CLASSES, "one probability row per label");
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .chunks_exact(NUM_CLASSES)
        .zip(labels)
        .map(|(row, &y)| {
            let p = (row[y as usize] as f64).max(PROB_FLOOR);
            weights[y as usize] as f64 * -p.ln()
        })
        .sum();
    total / labels.len() as f64
}

/// Loss from logits and its gradient with respect to the logits.
pub fn loss_and_grad(logits: &[f32], labels: &[u8], weights: &[f32; NUM_CLASSES]) -> (f64, Vec<f32>) {
    let mut probs = logits.to_vec();
    for row in probs.chunks_exact_mut(NUM_CLASSES) {
        softmax_in_place(row);
    }
    let loss = weighted_cross_entropy(&probs, labels, weights);
    let m = labels.len() as f32;
    let mut grad = probs;
    for (row, &y) in grad.chunks_exact_mut(NUM_CLASSES).zip(labels) {
        row[y as usize] -= 1.0;
        let scale = weights[y as usize] / m;
        row.iter_mut().for_each(|g| *g *= scale);
    }
    (loss, grad)
}

/// Adam with the usual defaults; frozen parameters are skipped entirely.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, model: &mut impl Parameters, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let mut idx = 0;
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |p| {
            if moments.len() == idx {
                moments.push((vec![0.0; p.numel()], vec![0.0; p.numel()]));
            }
            let (m, v) = &mut moments[idx];
            idx += 1;
            if !p.trainable {
                return;
            }
            for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / (v.sqrt() + eps);
            }
        });
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Batch loss of every iteration, in order.
    pub loss_curve: Vec<f64>,
    pub wall_seconds: f64,
    pub checkpoint: Checkpoint,
}

impl TrainReport {
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            out.push_str(&format!("{i},{l:.6}\n"));
        }
        out
    }
}

/// Trailing moving average over `window` iterations.
pub fn smoothed(curve: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut acc = 0.0;
    curve
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            acc += v;
            if i >= window {
                acc -= curve[i - window];
            }
            acc / (i + 1).min(window) as f64
        })
        .collect()
}

/// Assembles one batch: `batch_size` random looped windows, each with its
/// own augmentation draw, concatenated along the batch axis.
pub fn sample_batch(
    clips: &[PreparedClip],
    t: usize,
    cfg: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<f32>, Vec<u8>) {
    use rand::Rng;
    let mut pixels = Vec::new();
    let mut labels = Vec::with_capacity(cfg.batch_size * t);
    for _ in 0..cfg.batch_size {
        let clip = &clips[rng.random_range(0..clips.len())];
        let mut w = clip.sample_window(t, rng);
        augment(&mut w, &cfg.augment, rng);
        pixels.extend_from_slice(&w.pixels);
        labels.extend_from_slice(&w.labels);
    }
    (pixels, labels)
}

pub fn train(model: &mut SwingNet, clips: &[PreparedClip], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_progress(model, clips, cfg, &mut |_, _| {})
}

/// Runs `cfg.iterations` optimization steps, calling `progress(iteration,
/// loss)` after each.
pub fn train_with_progress(
    model: &mut SwingNet,
    clips: &[PreparedClip],
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    let d = model.config().d;
    let t = model.config().seq_len;
    if cfg.iterations > 0 && clips.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if let Some(c) = clips.iter().find(|c| c.d != d || c.is_empty()) {
        return Err(Error::Input(format!(
            "{}: prepared at {}px with {} frames; model expects {d}px",
            c.sample_id,
            c.d,
            c.len()
        )));
    }
    let started = Instant::now();
    let mut rng = derive_rng(cfg.seed, &[b"train"]);
    let mut adam = Adam::default();
    let mut loss_curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (pixels, labels) = sample_batch(clips, t, cfg, &mut rng);
        model.zero_grad();
        let logits = model
            .forward_train(&pixels, cfg.batch_size, t)
            .map_err(|e| Error::Training {
                iteration: it,
                source: Box::new(e),
            })?;
        let (loss, grad) = loss_and_grad(&logits, &labels, &cfg.class_weights);
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration: it,
                source: Box::new(Error::Degenerate(format!("loss became {loss}"))),
            });
        }
        model.backward(&grad);
        adam.step(model, lr_at(cfg, it));
        loss_curve.push(loss);
        progress(it, loss);
    }
    Ok(TrainReport {
        loss_curve,
        wall_seconds: started.elapsed().as_secs_f64(),
        checkpoint: Checkpoint::from_model(model, cfg.iterations as u64),
    })
}

/// Detects events on every clip and scores them against `truths`.
pub fn evaluate_clips(
    model: &SwingNet,
    clips: &[PreparedClip],
    truths: &[SwingAnnotation],
    t: usize,
) -> Result<crate::evaluation::PceReport> {
    let detections = clips
        .iter()
        .map(|c| infer_timeline(model, c, t).map(|tl| detect_events(&c.sample_id, &tl)))
        .collect::<Result<Vec<_>>>()?;
    pce(&detections, truths, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationEntry {
    pub id: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: usize,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub params: u64,
    pub flops: u64,
    pub pce: Option<f64>,
    pub error: Option<String>,
}

/// The eleven reference configurations under the ablation protocol.
pub fn reference_ablation_grid() -> Vec<AblationEntry> {
    crate::model::ablation_grid()
        .into_iter()
        .map(|(id, model, batch)| AblationEntry {
            id,
            model,
            train: TrainConfig::ablation(batch),
        })
        .collect()
}

/// Clips with raw frames, prepared lazily at whatever size each
/// configuration needs.
pub struct AblationData<'a> {
    pub train: Vec<(&'a SwingAnnotation, &'a FrameSequence)>,
    pub validation: Vec<(&'a SwingAnnotation, &'a FrameSequence)>,
    pub pretrained: Option<&'a WeightMap>,
}

fn prepare(set: &[(&SwingAnnotation, &FrameSequence)], d: usize) -> Result<Vec<PreparedClip>> {
    set.iter().map(|(a, f)| PreparedClip::new(a, f, d)).collect()
}

fn run_one(entry: &AblationEntry, data: &AblationData, cache: &mut BTreeMap<usize, (Vec<PreparedClip>, Vec<PreparedClip>)>) -> Result<f64> {
    let cfg = entry.model;
    let mut model = SwingNet::new(cfg, entry.train.seed)?;
    if cfg.pretrained {
        let weights = data.pretrained.ok_or_else(|| {
            Error::Config("configuration needs pretrained backbone weights but none were supplied".into())
        })?;
        model.load_pretrained_backbone(weights)?;
    }
    if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(cfg.d) {
        slot.insert((prepare(&data.train, cfg.d)?, prepare(&data.validation, cfg.d)?));
    }
    let (train_clips, val_clips) = &cache[&cfg.d];
    train(&mut model, train_clips, &entry.train)?;
    let truths: Vec<SwingAnnotation> = data.validation.iter().map(|(a, _)| (*a).clone()).collect();
    Ok(evaluate_clips(&model, val_clips, &truths, cfg.seq_len)?.overall_pce)
}

/// Trains and evaluates every entry; a failing entry is recorded in its row
/// and the remaining entries still run.
pub fn run_ablation(grid: &[AblationEntry], data: &AblationData) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut cache = BTreeMap::new();
    Ok(grid
        .iter()
        .map(|entry| {
            let result = run_one(entry, data, &mut cache);
            if let Err(e) = &result {
                log::warn!("ablation config {} failed: {e}", entry.id);
            }
            AblationRow {
                id: entry.id,
                model: entry.model,
                batch_size: entry.train.batch_size,
                params: count_params(&entry.model),
                flops: count_flops(&entry.model, entry.model.seq_len),
                pce: result.as_ref().ok().copied(),
                error: result.err().map(|e| e.to_string()),
            }
        })
        .collect())
}

pub const ABLATION_CSV_HEADER: &str =
    "id,d,seq_len,layers,hidden,bidirectional,pretrained,batch_size,params,params_1e6,flops,flops_1e9,pce,error";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let m = &r.model;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.2},{},{:.2},{},{}\n",
            r.id,
            m.d,
            m.seq_len,
            m.lstm_layers,
            m.lstm_hidden,
            m.bidirectional,
            m.pretrained,
            r.batch_size,
            r.params,
            r.params as f64 / 1e6,
            r.flops,
            r.flops as f64 / 1e9,
            r.pce.map(|p| format!("{p:.1}")).unwrap_or_default(),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        ));
    }
    out
}

/// Model and optimization settings read from a flat `key = value` file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrained_weights: Option<PathBuf>,
}

/// Parses `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "d" => m.d = parse(key, value)?,
            "seq_len" => m.seq_len = parse(key, value)?,
            "lstm_layers" => m.lstm_layers = parse(key, value)?,
            "lstm_hidden" => m.lstm_hidden = parse(key, value)?,
            "bidirectional" => m.bidirectional = parse(key, value)?,
            "width_multiplier" => m.width_multiplier = parse(key, value)?,
            "freeze_k" => m.freeze_k = parse(key, value)?,
            "pretrained" => m.pretrained = parse(key, value)?,
            "pretrained_weights" => self.pretrained_weights = Some(PathBuf::from(value)),
            "batch_size" => t.batch_size = parse(key, value)?,
            "iterations" => t.iterations = parse(key, value)?,
            "lr_initial" => t.lr_initial = parse(key, value)?,
            "lr_drop_iteration" => {
                t.lr_drop_iteration = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "lr_drop_factor" => t.lr_drop_factor = parse(key, value)?,
            "no_event_weight" => t.class_weights[NUM_CLASSES - 1] = parse(key, value)?,
            "class_weights" => {
                let w: Vec<f32> = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?;
                t.class_weights = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("class_weights needs {NUM_CLASSES} values")))?;
            }
            "augment" => t.augment.enabled = parse(key, value)?,
            "flip_prob" => t.augment.horizontal_flip_prob = parse(key, value)?,
            "max_rotation_deg" => t.augment.max_rotation_deg = parse(key, value)?,
            "max_shear_deg" => t.augment.max_shear_deg = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN9: f64 = 2.197_224_577_336_219_6;

    #[test]
    fn loss_closed_forms() {
        let w = default_class_weights();
        let uniform = [1.0 / 9.0; 9];
        assert!((weighted_cross_entropy(&uniform, &[8], &w) - 0.1 * LN9).abs() < 1e-6);
        assert!((weighted_cross_entropy(&uniform, &[5], &w) - LN9).abs() < 1e-6);
        let mut onehot = [0.0f32; 9];
        onehot[3] = 1.0;
        assert_eq!(weighted_cross_entropy(&onehot, &[3], &w), 0.0);
        // a zero at the labelled class is clamped, not infinite
        let l = weighted_cross_entropy(&onehot, &[2], &w);
        assert!((l - -(PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = default_class_weights();
        let logits: Vec<f32> = (0..27).map(|i| ((i * 7 % 11) as f32 - 5.0) / 3.0).collect();
        let labels = [8u8, 2, 8];
        let (_, grad) = loss_and_grad(&logits, &labels, &w);
        for i in 0..logits.len() {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p[i] += 1e-3;
            m[i] -= 1e-3;
            let fd = (loss_and_grad(&p, &labels, &w).0 - loss_and_grad(&m, &labels, &w).0) / 2e-3;
            assert!((fd - grad[i] as f64).abs() < 1e-4, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0), 1e-3);
        assert_eq!(lr_at(&cfg, 4999), 1e-3);
        assert!((lr_at(&cfg, 5001) - 1e-4).abs() < 1e-15);
        assert_eq!(lr_at(&TrainConfig::ablation(6), 9999), 1e-3);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn config_text() {
        let cfg = ExperimentConfig::from_text(
            "# tiny run\nd = 96\nseq_len=32\nbidirectional = false\nlr_drop_iteration = none\nno_event_weight = 0.2\n",
        )
        .unwrap();
        assert_eq!(cfg.model.d, 96);
        assert_eq!(cfg.model.seq_len, 32);
        assert!(!cfg.model.bidirectional);
        assert_eq!(cfg.train.lr_drop_iteration, None);
        assert_eq!(cfg.train.class_weights[8], 0.2);
        assert!(ExperimentConfig::from_text("bogus = 1").is_err());
        assert!(ExperimentConfig::from_text("d: 3").is_err());
    }

    #[test]
    fn zero_iterations_leave_model_untouched() {
        let cfg = ModelConfig {
            d: 32,
            seq_len: 2,
            lstm_hidden: 4,
            pretrained: false,
            ..ModelConfig::default()
        };
        let mut model = SwingNet::new(cfg, 1).unwrap();
        let before = Checkpoint::from_model(&model, 0);
        let tc = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &[], &tc).unwrap();
        assert!(report.loss_curve.is_empty());
        assert_eq!(Checkpoint::from_model(&model, 0), before);
    }
}
