//! Inverted-residual convolutional feature extractor.
//!
//! Parameter names follow the common `features.<i>...` layout so weights
//! exported from other frameworks map one-to-one.

use rand::Rng;

use super::layers::{ConvBn, ConvKind};
use super::{Act, Buffer, Param, Parameters};

/// `(expansion, output channels, repeats, first stride)` per stage.
pub const STAGES: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];
pub const STEM_CHANNELS: usize = 32;
pub const LAST_CHANNELS: usize = 1280;
/// Stem + 17 inverted-residual blocks + final 1x1 convolution.
pub const NUM_UNITS: usize = 19;

/// Rounds a scaled channel count to a multiple of 8, never dropping more
/// than 10% below the unrounded value.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = ((v + d / 2.0) / d).floor() as usize * divisor;
    new_v = new_v.max(divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    new_v
}

/// One convolution in the backbone, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub unit: usize,
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub relu6: bool,
}

/// Block-level layout: `(expansion, cin, cout, stride)` for the 17 blocks.
pub fn block_table(width: f64) -> Vec<(usize, usize, usize, usize)> {
    let mut cin = make_divisible(STEM_CHANNELS as f64 * width, 8);
    let mut out = Vec::with_capacity(17);
    for &(t, c, n, s) in &STAGES {
        let cout = make_divisible(c as f64 * width, 8);
        for i in 0..n {
            out.push((t, cin, cout, if i == 0 { s } else { 1 }));
            cin = cout;
        }
    }
    out
}

pub fn stem_channels(width: f64) -> usize {
    make_divisible(STEM_CHANNELS as f64 * width, 8)
}

pub fn last_channels(width: f64) -> usize {
    make_divisible(LAST_CHANNELS as f64 * width.max(1.0), 8)
}

/// Every convolution of the backbone in order, with its freezing unit.
pub fn conv_table(width: f64) -> Vec<ConvSpec> {
    let stem = stem_channels(width);
    let mut convs = vec![ConvSpec {
        unit: 0,
        kind: ConvKind::Dense3x3,
        cin: 3,
        cout: stem,
        stride: 2,
        relu6: true,
    }];
    let blocks = block_table(width);
    for (i, &(t, cin, cout, s)) in blocks.iter().enumerate() {
        let unit = i + 1;
        let hidden = cin * t;
        if t != 1 {
            convs.push(ConvSpec { unit, kind: ConvKind::Pointwise, cin, cout: hidden, stride: 1, relu6: true });
        }
        convs.push(ConvSpec { unit, kind: ConvKind::Depthwise3x3, cin: hidden, cout: hidden, stride: s, relu6: true });
        convs.push(ConvSpec { unit, kind: ConvKind::Pointwise, cin: hidden, cout, stride: 1, relu6: false });
    }
    let last_in = blocks.last().map_or(stem, |b| b.2);
    convs.push(ConvSpec {
        unit: blocks.len() + 1,
        kind: ConvKind::Pointwise,
        cin: last_in,
        cout: last_channels(width),
        stride: 1,
        relu6: true,
    });
    convs
}

#[derive(Debug, Clone)]
pub struct InvertedResidual {
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub project: ConvBn,
    pub use_residual: bool,
}

impl InvertedResidual {
    fn forward_eval(&self, x: &Act) -> Act {
        let h = self.expand.as_ref().map(|e| e.forward_eval(x));
        let h = self.depthwise.forward_eval(h.as_ref().unwrap_or(x));
        let mut y = self.project.forward_eval(&h);
        if self.use_residual {
            add_assign(&mut y.data, &x.data);
        }
        y
    }

    fn forward_train(&mut self, x: Act) -> Act {
        let h = match self.expand.as_mut() {
            Some(e) => e.forward_train(x),
            None => x,
        };
        let h = self.depthwise.forward_train(h);
        let mut y = self.project.forward_train(h);
        if self.use_residual {
            // the block input is held by whichever layer consumed it first
            let first = self.expand.as_ref().unwrap_or(&self.depthwise);
            let x = first.cached_input().expect("block input cached");
            add_assign(&mut y.data, &x.data);
        }
        y
    }

    fn backward(&mut self, dy: Act, need_dx: bool) -> Option<Act> {
        let skip = (self.use_residual && need_dx).then(|| dy.data.clone());
        let dh = self.project.backward(dy, true).expect("requested");
        let dx = match self.expand.as_mut() {
            Some(expand) => {
                let dh = self.depthwise.backward(dh, true).expect("requested");
                expand.backward(dh, need_dx)
            }
            None => self.depthwise.backward(dh, need_dx),
        };
        dx.map(|mut dx| {
            if let Some(skip) = skip {
                add_assign(&mut dx.data, &skip);
            }
            dx
        })
    }

    fn convs(&self) -> impl Iterator<Item = &ConvBn> {
        self.expand.iter().chain([&self.depthwise, &self.project])
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvBn> {
        self.expand.iter_mut().chain([&mut self.depthwise, &mut self.project])
    }
}

fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Debug, Clone)]
pub enum Unit {
    Conv(ConvBn),
    Block(InvertedResidual),
}

impl Unit {
    pub fn forward_eval(&self, x: &Act) -> Act {
        match self {
            Unit::Conv(c) => c.forward_eval(x),
            Unit::Block(b) => b.forward_eval(x),
        }
    }

    pub fn forward_train(&mut self, x: Act) -> Act {
        match self {
            Unit::Conv(c) => c.forward_train(x),
            Unit::Block(b) => b.forward_train(x),
        }
    }

    pub fn backward(&mut self, dy: Act, need_dx: bool) -> Option<Act> {
        match self {
            Unit::Conv(c) => c.backward(dy, need_dx),
            Unit::Block(b) => b.backward(dy, need_dx),
        }
    }

    pub fn convs(&self) -> Vec<&ConvBn> {
        match self {
            Unit::Conv(c) => vec![c],
            Unit::Block(b) => b.convs().collect(),
        }
    }

    fn convs_mut(&mut self) -> Vec<&mut ConvBn> {
        match self {
            Unit::Conv(c) => vec![c],
            Unit::Block(b) => b.convs_mut().collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub units: Vec<Unit>,
    pub feature_dim: usize,
    frozen: usize,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(width: f64, rng: &mut R) -> Self {
        let convs = conv_table(width);
        let blocks = block_table(width);
        let mut units = Vec::with_capacity(NUM_UNITS);
        let mut it = convs.into_iter().peekable();
        let mk = |spec: ConvSpec, conv: String, bn: String, rng: &mut R| {
            ConvBn::new(spec.kind, spec.cin, spec.cout, spec.stride, spec.relu6, &conv, &bn, rng)
        };

        let stem = it.next().expect("stem");
        units.push(Unit::Conv(mk(stem, "features.0.0".into(), "features.0.1".into(), rng)));
        for (i, &(t, cin, cout, stride)) in blocks.iter().enumerate() {
            let idx = i + 1;
            let p = format!("features.{idx}.conv");
            let expand = (t != 1).then(|| {
                let spec = it.next().expect("expand conv");
                mk(spec, format!("{p}.0.0"), format!("{p}.0.1"), rng)
            });
            let o = if t != 1 { 1 } else { 0 };
            let dw = mk(it.next().expect("depthwise"), format!("{p}.{o}.0"), format!("{p}.{o}.1"), rng);
            let project = mk(
                it.next().expect("projection"),
                format!("{p}.{}", o + 1),
                format!("{p}.{}", o + 2),
                rng,
            );
            units.push(Unit::Block(InvertedResidual {
                expand,
                depthwise: dw,
                project,
                use_residual: stride == 1 && cin == cout,
            }));
        }
        let last = it.next().expect("final conv");
        let feature_dim = last.cout;
        let idx = blocks.len() + 1;
        units.push(Unit::Conv(mk(last, format!("features.{idx}.0"), format!("features.{idx}.1"), rng)));
        Backbone {
            units,
            feature_dim,
            frozen: 0,
        }
    }

    pub fn frozen_units(&self) -> usize {
        self.frozen
    }

    /// Marks the first `k` units non-trainable; they run with their running
    /// statistics and receive no updates.
    pub fn set_frozen(&mut self, k: usize) {
        assert!(k <= self.units.len());
        self.frozen = k;
        for (i, unit) in self.units.iter_mut().enumerate() {
            for conv in unit.convs_mut() {
                let trainable = i >= k;
                conv.visit_params_mut(&mut |p| p.trainable = trainable);
            }
        }
    }

    pub fn is_fully_frozen(&self) -> bool {
        self.frozen == self.units.len()
    }

    pub fn forward_eval(&self, x: &Act) -> Act {
        let mut h = self.units[0].forward_eval(x);
        for unit in &self.units[1..] {
            h = unit.forward_eval(&h);
        }
        h
    }

    pub fn forward_train(&mut self, x: Act) -> Act {
        let frozen = self.frozen;
        let mut h = x;
        for (i, unit) in self.units.iter_mut().enumerate() {
            h = if i < frozen {
                unit.forward_eval(&h)
            } else {
                unit.forward_train(h)
            };
        }
        h
    }

    /// Back-propagates through the trainable units; nothing flows into the
    /// frozen prefix or the input images.
    pub fn backward(&mut self, dy: Act) {
        let first_trainable = self.frozen;
        let mut g = Some(dy);
        for i in (first_trainable..self.units.len()).rev() {
            let need_dx = i > first_trainable;
            g = self.units[i].backward(g.expect("gradient flows"), need_dx);
        }
    }

    pub fn clear_cache(&mut self) {
        for unit in &mut self.units {
            for conv in unit.convs_mut() {
                conv.clear_cache();
            }
        }
    }

    /// Multiply-accumulates for one `d x d` frame.
    pub fn macs(&self, d: usize) -> u64 {
        let (mut h, mut w) = (d, d);
        let mut total = 0;
        for unit in &self.units {
            for conv in unit.convs() {
                total += conv.macs(h, w);
                (h, w) = conv.out_hw(h, w);
            }
        }
        total
    }
}

impl Parameters for Backbone {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for unit in &self.units {
            match unit {
                Unit::Conv(c) => c.visit_params(f),
                Unit::Block(b) => {
                    for c in b.convs() {
                        c.visit_params(f);
                    }
                }
            }
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for unit in &mut self.units {
            for c in unit.convs_mut() {
                c.visit_params_mut(f);
            }
        }
    }
    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Buffer)) {
        for unit in &self.units {
            match unit {
                Unit::Conv(c) => c.visit_buffers(f),
                Unit::Block(b) => {
                    for c in b.convs() {
                        c.visit_buffers(f);
                    }
                }
            }
        }
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        for unit in &mut self.units {
            for c in unit.convs_mut() {
                c.visit_buffers_mut(f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_has_nineteen_units_and_known_size() {
        let b = Backbone::new(1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b.units.len(), NUM_UNITS);
        assert_eq!(b.feature_dim, 1280);
        let mut n = 0;
        b.visit_params(&mut |p| n += p.numel());
        assert_eq!(n, 2_223_872);
    }

    #[test]
    fn torch_style_names() {
        let b = Backbone::new(1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut names = Vec::new();
        b.visit_params(&mut |p| names.push(p.name.clone()));
        for expect in [
            "features.0.0.weight",
            "features.0.1.bias",
            "features.1.conv.0.0.weight",
            "features.1.conv.1.weight",
            "features.1.conv.2.weight",
            "features.2.conv.0.0.weight",
            "features.2.conv.1.0.weight",
            "features.2.conv.2.weight",
            "features.2.conv.3.bias",
            "features.18.0.weight",
            "features.18.1.weight",
        ] {
            assert!(names.iter().any(|n| n == expect), "missing {expect}");
        }
    }

    #[test]
    fn output_grid_at_common_sizes() {
        let b = Backbone::new(1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Act::zeros(3, 1, 64, 64);
        let y = b.forward_eval(&x);
        assert_eq!((y.c, y.h, y.w), (1280, 2, 2));
    }

    #[test]
    fn divisible_rounding() {
        assert_eq!(make_divisible(32.0, 8), 32);
        assert_eq!(make_divisible(32.0 * 0.35, 8), 16);
        assert_eq!(make_divisible(24.0 * 0.75, 8), 24);
    }
}
