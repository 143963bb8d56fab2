//! The hybrid sequence labeller: an inverted-residual CNN applied per frame,
//! global average pooling, a (bi)directional LSTM stack and a frame-shared
//! linear classifier with softmax over the nine classes.

pub mod accounting;
pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::backbone::{Backbone, NUM_UNITS};
use crate::nn::kernels::softmax_in_place;
use crate::nn::linear::Linear;
use crate::nn::lstm::Lstm;
use crate::nn::{Act, Buffer, Param, Parameters};

pub use accounting::{count_flops, count_params};
pub use checkpoint::{Checkpoint, NamedArray, WeightMap};

/// Input sizes explored in the reference ablation grid.
pub const GRID_INPUT_SIZES: [usize; 4] = [128, 160, 192, 224];
/// Smallest input the stride-32 backbone accepts here.
pub const MIN_INPUT_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input size in pixels.
    pub d: usize,
    /// Training sequence length in frames.
    pub seq_len: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub bidirectional: bool,
    pub width_multiplier: f64,
    /// Number of leading backbone units kept frozen.
    pub freeze_k: usize,
    pub pretrained: bool,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    /// The 160-pixel, T=64, single-layer bidirectional H=256 baseline with
    /// ten frozen units.
    fn default() -> Self {
        ModelConfig {
            d: 160,
            seq_len: 64,
            lstm_layers: 1,
            lstm_hidden: 256,
            bidirectional: true,
            width_multiplier: 1.0,
            freeze_k: 10,
            pretrained: true,
            num_classes: NUM_CLASSES,
        }
    }
}

impl ModelConfig {
    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Width of the recurrent output fed to the classifier.
    pub fn head_input(&self) -> usize {
        self.lstm_hidden * self.directions()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d < MIN_INPUT_SIZE {
            return bad(format!("input size {} below minimum {MIN_INPUT_SIZE}", self.d));
        }
        if self.seq_len == 0 {
            return bad("sequence length must be at least 1".into());
        }
        if self.lstm_layers == 0 || self.lstm_hidden == 0 {
            return bad("LSTM needs at least one layer and one hidden unit".into());
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return bad(format!("width multiplier {} must be positive", self.width_multiplier));
        }
        if self.pretrained && self.width_multiplier != 1.0 {
            return bad(format!(
                "pretrained backbone weights exist only at width 1.0, got {}",
                self.width_multiplier
            ));
        }
        if self.freeze_k > NUM_UNITS {
            return bad(format!("freeze_k {} outside 0..={NUM_UNITS}", self.freeze_k));
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        Ok(())
    }

    /// Non-fatal notes about settings outside the reference grid.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !GRID_INPUT_SIZES.contains(&self.d) {
            out.push(format!("input size {} is outside the reference grid {GRID_INPUT_SIZES:?}", self.d));
        }
        if self.width_multiplier != 1.0 {
            out.push("width multiplier other than 1.0 has no pretrained weights".into());
        }
        out
    }
}

/// Per-frame class probabilities for one sequence, `len x num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventProbabilities {
    pub num_classes: usize,
    pub probs: Vec<f32>,
}

impl EventProbabilities {
    pub fn len(&self) -> usize {
        self.probs.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.probs[t * self.num_classes..(t + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.probs.chunks_exact(self.num_classes)
    }
}

/// Shapes of the most recent training forward pass.
#[derive(Debug, Clone, Copy)]
struct TrainShapes {
    batch: usize,
    seq: usize,
    fmap: (usize, usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct SwingNet {
    cfg: ModelConfig,
    pub backbone: Backbone,
    pub lstm: Lstm,
    pub head: Linear,
    shapes: Option<TrainShapes>,
}

impl SwingNet {
    /// Builds a freshly initialized network and applies `cfg.freeze_k`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        crate::nn::retain_freed_memory();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(cfg.width_multiplier, &mut rng);
        let lstm = Lstm::new(
            "rnn",
            backbone.feature_dim,
            cfg.lstm_hidden,
            cfg.lstm_layers,
            cfg.bidirectional,
            &mut rng,
        );
        let head = Linear::new("lin", cfg.head_input(), cfg.num_classes, &mut rng);
        let mut net = SwingNet {
            cfg,
            backbone,
            lstm,
            head,
            shapes: None,
        };
        net.freeze_layers(cfg.freeze_k)?;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Freezes the first `k` backbone units (stem, 17 blocks, final 1x1
    /// convolution, in that order) and unfreezes the rest.
    pub fn freeze_layers(&mut self, k: usize) -> Result<()> {
        if k > NUM_UNITS {
            return Err(Error::Config(format!("cannot freeze {k} units, backbone has {NUM_UNITS}")));
        }
        self.backbone.set_frozen(k);
        self.cfg.freeze_k = k;
        Ok(())
    }

    fn check_input(&self, batch: &[f32], b: usize, t: usize) -> Result<()> {
        let d = self.cfg.d;
        let expect = b * t * 3 * d * d;
        if b == 0 || t == 0 || batch.len() != expect {
            return Err(Error::Input(format!(
                "expected {b}x{t}x3x{d}x{d} = {expect} values, got {}",
                batch.len()
            )));
        }
        Ok(())
    }

    fn pool(fmap: &Act) -> Vec<f32> {
        let (c, n, plane) = (fmap.c, fmap.n, fmap.plane());
        let mut feats = vec![0.0f32; n * c];
        for ch in 0..c {
            let data = fmap.channel(ch);
            for img in 0..n {
                let s: f32 = data[img * plane..(img + 1) * plane].iter().sum();
                feats[img * c + ch] = s / plane as f32;
            }
        }
        feats
    }

    /// Logits for a `b x t x 3 x d x d` batch, without caching anything.
    pub fn logits(&self, batch: &[f32], b: usize, t: usize) -> Result<Vec<f32>> {
        self.check_input(batch, b, t)?;
        let d = self.cfg.d;
        let x = Act::from_nchw(batch, b * t, 3, d, d);
        let fmap = self.backbone.forward_eval(&x);
        let feats = Self::pool(&fmap);
        let seq = self.lstm.forward_eval(&feats, b, t);
        Ok(self.head.forward_eval(&seq))
    }

    /// Inference-mode forward pass: one probability sequence per batch entry.
    pub fn forward(&self, batch: &[f32], b: usize, t: usize) -> Result<Vec<EventProbabilities>> {
        let mut logits = self.logits(batch, b, t)?;
        let c = self.cfg.num_classes;
        for row in logits.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        Ok(logits
            .chunks_exact(t * c)
            .map(|p| EventProbabilities {
                num_classes: c,
                probs: p.to_vec(),
            })
            .collect())
    }

    /// Training-mode forward pass (batch statistics, caches kept for
    /// [`SwingNet::backward`]). Returns `b*t x num_classes` logits.
    pub fn forward_train(&mut self, batch: &[f32], b: usize, t: usize) -> Result<Vec<f32>> {
        self.check_input(batch, b, t)?;
        let d = self.cfg.d;
        let x = Act::from_nchw(batch, b * t, 3, d, d);
        let fmap = self.backbone.forward_train(x);
        self.shapes = Some(TrainShapes {
            batch: b,
            seq: t,
            fmap: (fmap.c, fmap.n, fmap.h, fmap.w),
        });
        let feats = Self::pool(&fmap);
        drop(fmap);
        let seq = self.lstm.forward_train(&feats, b, t);
        Ok(self.head.forward_train(&seq))
    }

    /// Accumulates parameter gradients from `dlogits`.
    pub fn backward(&mut self, dlogits: &[f32]) {
        let s = self.shapes.take().expect("backward without forward_train");
        let dseq = self.head.backward(dlogits);
        let need_features = !self.backbone.is_fully_frozen();
        let dfeat = self.lstm.backward(&dseq, s.batch, s.seq, need_features);
        if let Some(dfeat) = dfeat {
            let (c, n, h, w) = s.fmap;
            let plane = h * w;
            let mut dmap = Act::zeros(c, n, h, w);
            for ch in 0..c {
                for img in 0..n {
                    let g = dfeat[img * c + ch] / plane as f32;
                    dmap.data[(ch * n + img) * plane..(ch * n + img + 1) * plane].fill(g);
                }
            }
            self.backbone.backward(dmap);
        } else {
            self.backbone.clear_cache();
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    /// Replaces every backbone weight and running statistic from `weights`,
    /// leaving the recurrent and classifier weights untouched.
    pub fn load_pretrained_backbone(&mut self, weights: &WeightMap) -> Result<()> {
        if self.cfg.width_multiplier != 1.0 {
            return Err(Error::Config(format!(
                "pretrained backbone weights exist only at width 1.0, model uses {}",
                self.cfg.width_multiplier
            )));
        }
        // validate everything before mutating
        let mut problems = Vec::new();
        let mut check = |name: &str, shape: &[usize]| match weights.get(name) {
            None => problems.push(format!("missing {name}")),
            Some(a) if a.shape != shape => {
                problems.push(format!("{name}: expected {shape:?}, found {:?}", a.shape))
            }
            Some(_) => {}
        };
        self.backbone.visit_params(&mut |p| check(&p.name, &p.shape));
        self.backbone.visit_buffers(&mut |b| check(&b.name, &b.shape));
        if !problems.is_empty() {
            return Err(Error::IncompatibleWeights(problems.join("; ")));
        }
        self.backbone
            .visit_params_mut(&mut |p| p.value.copy_from_slice(&weights[&p.name].data));
        self.backbone
            .visit_buffers_mut(&mut |b| b.value.copy_from_slice(&weights[&b.name].data));
        self.cfg.pretrained = true;
        Ok(())
    }

    /// Multiply-accumulates for a `t`-frame sequence, counted on the built layers.
    pub fn macs(&self, t: usize) -> u64 {
        let per_frame = self.backbone.macs(self.cfg.d)
            + self.lstm.macs_per_frame()
            + (self.head.input_dim() * self.head.output_dim()) as u64;
        per_frame * t as u64
    }

    pub(crate) fn set_config_unchecked(&mut self, cfg: ModelConfig) {
        self.cfg = cfg;
    }
}

impl Parameters for SwingNet {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.backbone.visit_params(f);
        self.lstm.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_params_mut(f);
        self.lstm.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Buffer)) {
        self.backbone.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.backbone.visit_buffers_mut(f);
    }
}

/// The eleven ablation configurations with their training batch sizes.
pub fn ablation_grid() -> Vec<(usize, ModelConfig, usize)> {
    let base = ModelConfig {
        d: 224,
        seq_len: 32,
        lstm_layers: 2,
        lstm_hidden: 128,
        bidirectional: true,
        width_multiplier: 1.0,
        freeze_k: 0,
        pretrained: true,
        num_classes: NUM_CLASSES,
    };
    vec![
        (0, base, 6),
        (1, ModelConfig { pretrained: false, ..base }, 6),
        (2, ModelConfig { bidirectional: false, ..base }, 6),
        (3, ModelConfig { d: 192, ..base }, 6),
        (4, ModelConfig { d: 160, ..base }, 6),
        (5, ModelConfig { d: 128, ..base }, 6),
        (6, ModelConfig { d: 160, seq_len: 64, ..base }, 6),
        (7, ModelConfig { d: 160, ..base }, 12),
        (8, ModelConfig { lstm_layers: 1, ..base }, 6),
        (9, ModelConfig { lstm_hidden: 64, ..base }, 6),
        (10, ModelConfig { lstm_hidden: 256, ..base }, 6),
    ]
}
