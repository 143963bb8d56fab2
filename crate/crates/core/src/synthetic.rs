//! Procedurally rendered stick-figure swings with exactly known event frames.
//!
//! The figure is a shoulder-anchored arm plus a club shaft. Angles are in
//! degrees from straight down; the shaft turns `SHAFT_GAIN` times as far as
//! the arm, so the shaft reaches horizontal well before the arm does:
//!
//! * Toe-up: first backswing frame with the shaft at or past horizontal
//! * Mid-backswing: first backswing frame with the arm at or past horizontal
//! * Top: the turning point of the angle profile
//! * Mid-downswing: first downswing frame with the arm back below horizontal
//! * Impact: the shaft is vertical again (no ball is simulated)
//! * Mid-follow-through: first frame with the shaft horizontal on the far side
//! * Finish: first frame of the final hold

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, Club, Sex, SwingAnnotation, View, DEFAULT_FPS, NUM_EVENTS};
use crate::error::{Error, Result};
use crate::preprocess::{derive_rng, FrameSequence, RgbImage};

/// Shaft angle divided by arm angle.
pub const SHAFT_GAIN: f64 = 1.6;
/// Arm angle at the top of the backswing.
pub const TOP_ANGLE: f64 = 150.0;
/// Arm angle held at the finish (shaft at `-TOP_ANGLE`).
pub const FINISH_ANGLE: f64 = -TOP_ANGLE / SHAFT_GAIN;

const MIN_DOWNSWING: usize = 3;
const MIN_PHASE: usize = 2;
const TEMPO_SLACK: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handedness {
    Right,
    Left,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSwingConfig {
    pub num_frames: usize,
    /// Backswing over downswing duration.
    pub tempo: f64,
    /// Background frames before Address.
    pub lead_in: usize,
    /// Background frames after Finish.
    pub lead_out: usize,
    pub image_size: usize,
    pub handedness: Handedness,
    /// Standard deviation of the static background noise, in 8-bit levels.
    pub jitter: f64,
    pub seed: u64,
    /// Follow-through over downswing duration.
    pub follow_through_ratio: f64,
}

impl Default for SyntheticSwingConfig {
    fn default() -> Self {
        SyntheticSwingConfig {
            num_frames: 80,
            tempo: 3.0,
            lead_in: 10,
            lead_out: 10,
            image_size: 96,
            handedness: Handedness::Right,
            jitter: 8.0,
            seed: 0,
            follow_through_ratio: 1.5,
        }
    }
}

/// Frame counts of the three moving phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phases {
    pub address: usize,
    pub backswing: usize,
    pub downswing: usize,
    pub follow_through: usize,
}

impl Phases {
    pub fn top(&self) -> usize {
        self.address + self.backswing
    }

    pub fn impact(&self) -> usize {
        self.top() + self.downswing
    }

    pub fn finish(&self) -> usize {
        self.impact() + self.follow_through
    }
}

impl SyntheticSwingConfig {
    /// Configuration whose clip has exactly `backswing` frames from Address
    /// to Top and `round(backswing / tempo)` frames from Top to Impact.
    pub fn with_backswing(backswing: usize, tempo: f64, lead_in: usize, lead_out: usize) -> Self {
        let base = SyntheticSwingConfig::default();
        let downswing = (backswing as f64 / tempo).round() as usize;
        let follow = (base.follow_through_ratio * downswing as f64).round() as usize;
        SyntheticSwingConfig {
            num_frames: lead_in + lead_out + 1 + backswing + downswing + follow,
            tempo,
            lead_in,
            lead_out,
            ..base
        }
    }

    /// Splits the moving part of the clip into backswing, downswing and
    /// follow-through so that their ratios match `tempo` and
    /// `follow_through_ratio` as closely as whole frames allow.
    pub fn phases(&self) -> Result<Phases> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tempo > 0.0 && self.tempo.is_finite()) {
            return bad(format!("tempo must be positive, got {}", self.tempo));
        }
        if !(self.follow_through_ratio > 0.0 && self.follow_through_ratio.is_finite()) {
            return bad(format!("follow-through ratio must be positive, got {}", self.follow_through_ratio));
        }
        if self.num_frames < self.lead_in + self.lead_out + NUM_EVENTS {
            return bad(format!(
                "{} frames cannot hold lead-in {} + lead-out {} + {NUM_EVENTS} events",
                self.num_frames, self.lead_in, self.lead_out
            ));
        }
        let moving = self.num_frames - self.lead_in - self.lead_out - 1;
        let downswing = (moving as f64 / (self.tempo + 1.0 + self.follow_through_ratio)).round() as usize;
        let backswing = (self.tempo * downswing as f64).round() as usize;
        if downswing < MIN_DOWNSWING || backswing < MIN_PHASE || backswing + downswing + MIN_PHASE > moving {
            return bad(format!(
                "{moving} moving frames cannot realize tempo {} with follow-through ratio {}",
                self.tempo, self.follow_through_ratio
            ));
        }
        let realized = backswing as f64 / downswing as f64;
        if (realized - self.tempo).abs() > TEMPO_SLACK * self.tempo {
            return bad(format!(
                "tempo {} realized only as {realized:.3} in {moving} moving frames",
                self.tempo
            ));
        }
        Ok(Phases {
            address: self.lead_in,
            backswing,
            downswing,
            follow_through: moving - backswing - downswing,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} is too small", self.image_size)));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        let p = self.phases()?;
        let ev = analytic_events(&p);
        if ev.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("phases {p:?} give non-increasing events {ev:?}")));
        }
        Ok(())
    }
}

/// Arm angle per frame.
pub fn arm_profile(p: &Phases, num_frames: usize) -> Vec<f64> {
    use std::f64::consts::FRAC_PI_2;
    (0..num_frames)
        .map(|t| {
            if t <= p.address {
                0.0
            } else if t <= p.top() {
                let u = (t - p.address) as f64 / p.backswing as f64;
                TOP_ANGLE * (FRAC_PI_2 * u).sin()
            } else if t < p.impact() {
                let u = (t - p.top()) as f64 / p.downswing as f64;
                TOP_ANGLE * (FRAC_PI_2 * u).cos()
            } else if t == p.impact() {
                0.0
            } else if t <= p.finish() {
                let v = (t - p.impact()) as f64 / p.follow_through as f64;
                FINISH_ANGLE * (1.5 * v - 0.5 * v * v)
            } else {
                FINISH_ANGLE
            }
        })
        .collect()
}

/// Event frames derived in closed form from the phase lengths.
pub fn analytic_events(p: &Phases) -> [usize; NUM_EVENTS] {
    use std::f64::consts::FRAC_2_PI;
    let shaft_level = 90.0 / SHAFT_GAIN;
    let after = |start: usize, frac: f64, len: usize| start + (frac * len as f64).ceil() as usize;
    let toe_up = FRAC_2_PI * (shaft_level / TOP_ANGLE).asin();
    let mid_back = FRAC_2_PI * (90.0 / TOP_ANGLE).asin();
    let mid_down = FRAC_2_PI * (90.0 / TOP_ANGLE).acos();
    // solve 1.5 v - 0.5 v^2 = r for the follow-through parameter
    let r = shaft_level / -FINISH_ANGLE;
    let mid_follow = (3.0 - (9.0 - 8.0 * r).sqrt()) / 2.0;
    [
        p.address,
        after(p.address, toe_up, p.backswing),
        after(p.address, mid_back, p.backswing),
        p.top(),
        after(p.top(), mid_down, p.downswing),
        p.impact(),
        after(p.impact(), mid_follow, p.follow_through),
        p.finish(),
    ]
}

/// Event frames found by scanning the angle profile frame by frame.
pub fn scanned_events(p: &Phases, arm: &[f64]) -> [Option<usize>; NUM_EVENTS] {
    let first = |range: std::ops::RangeInclusive<usize>, pred: &dyn Fn(f64) -> bool| {
        range.into_iter().find(|&t| pred(arm[t]))
    };
    let address = (1..arm.len()).find(|&t| arm[t] != 0.0).map(|t| t - 1);
    let top = (1..arm.len() - 1).find(|&t| arm[t] > arm[t - 1] && arm[t + 1] < arm[t]);
    let impact = top.and_then(|top| (top + 1..arm.len()).find(|&t| arm[t] <= 0.0));
    let finish = (1..arm.len()).find(|&t| arm[t] == FINISH_ANGLE && arm[t - 1] != FINISH_ANGLE);
    [
        address,
        first(p.address + 1..=p.top(), &|a| SHAFT_GAIN * a >= 90.0),
        first(p.address + 1..=p.top(), &|a| a >= 90.0),
        top,
        first(p.top() + 1..=p.impact(), &|a| a <= 90.0),
        impact,
        first(p.impact() + 1..=p.finish(), &|a| SHAFT_GAIN * a <= -90.0),
        finish,
    ]
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    width: f64,
    color: [f64; 3],
}

impl Segment {
    /// Distance beyond which a pixel centre receives no coverage.
    fn reach(&self) -> f64 {
        self.width / 2.0 + 0.5
    }

    fn extent(&self) -> (f64, f64, f64, f64) {
        let r = self.reach();
        (
            self.x0.min(self.x1) - r,
            self.x0.max(self.x1) + r,
            self.y0.min(self.y1) - r,
            self.y0.max(self.y1) + r,
        )
    }

    fn draw(&self, img: &mut [f64], size: usize) {
        let (ex0, ex1, ey0, ey1) = self.extent();
        let lo = |v: f64| v.floor().max(0.0) as usize;
        let hi = |v: f64| (v.ceil().max(0.0) as usize).min(size - 1);
        let (dx, dy) = (self.x1 - self.x0, self.y1 - self.y0);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for y in lo(ey0)..=hi(ey1) {
            for x in lo(ex0)..=hi(ex1) {
                let (px, py) = (x as f64, y as f64);
                let u = (((px - self.x0) * dx + (py - self.y0) * dy) / len2).clamp(0.0, 1.0);
                let dist = (px - (self.x0 + u * dx)).hypot(py - (self.y0 + u * dy));
                let alpha = (self.reach() - dist).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let k = 3 * (y * size + x);
                    for c in 0..3 {
                        img[k + c] = img[k + c] * (1.0 - alpha) + self.color[c] * alpha;
                    }
                }
            }
        }
    }
}

fn figure(arm_deg: f64, size: usize) -> [Segment; 4] {
    let s = size as f64;
    let (sx, sy) = (0.5 * s, 0.42 * s);
    let (arm_len, shaft_len) = (0.2 * s, 0.24 * s);
    let th = arm_deg.to_radians();
    let ts = (SHAFT_GAIN * arm_deg).to_radians();
    let (hx, hy) = (sx + arm_len * th.sin(), sy + arm_len * th.cos());
    let (cx, cy) = (hx + shaft_len * ts.sin(), hy + shaft_len * ts.cos());
    let seg = |x0, y0, x1, y1, w: f64, color| Segment {
        x0,
        y0,
        x1,
        y1,
        width: w * s,
        color,
    };
    [
        seg(sx, sy, sx, sy + 0.35 * s, 0.08, [40.0, 40.0, 160.0]),
        seg(sx, sy, hx, hy, 0.05, [230.0, 180.0, 140.0]),
        seg(hx, hy, cx, cy, 0.02, [220.0, 220.0, 230.0]),
        seg(
            cx - 0.02 * s * ts.cos(),
            cy + 0.02 * s * ts.sin(),
            cx + 0.03 * s * ts.cos(),
            cy - 0.03 * s * ts.sin(),
            0.04,
            [20.0, 20.0, 20.0],
        ),
    ]
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` that contains every pixel the
/// figure touches in any frame (right-handed orientation).
fn figure_pixel_box(arm: &[f64], size: usize) -> (usize, usize, usize, usize) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &a in arm {
        for seg in figure(a, size) {
            let (a0, a1, b0, b1) = seg.extent();
            x0 = x0.min(a0);
            x1 = x1.max(a1);
            y0 = y0.min(b0);
            y1 = y1.max(b1);
        }
    }
    let clamp = |v: f64| v.clamp(0.0, size as f64) as usize;
    (clamp(x0.floor()), clamp(x1.floor() + 1.0), clamp(y0.floor()), clamp(y1.floor() + 1.0))
}

/// Renders one clip and its annotation. Clip and source ids default to
/// `synth-<seed>`.
pub fn generate_swing_clip(cfg: &SyntheticSwingConfig) -> Result<(FrameSequence, SwingAnnotation)> {
    cfg.validate()?;
    let phases = cfg.phases()?;
    let events = analytic_events(&phases);
    let arm = arm_profile(&phases, cfg.num_frames);
    let size = cfg.image_size;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = [60.0, 120.0, 60.0];
    let noise = Normal::new(0.0, cfg.jitter).map_err(|e| Error::Config(format!("jitter: {e}")))?;
    let background: Vec<f64> = (0..size * size * 3)
        .map(|i| base[i % 3] + noise.sample(&mut rng))
        .collect();
    let flicker = cfg.jitter / 4.0;

    let mut frames = Vec::with_capacity(cfg.num_frames);
    for &a in &arm {
        let mut img = background.clone();
        if flicker > 0.0 {
            for v in img.iter_mut() {
                *v += rng.random_range(-flicker..=flicker);
            }
        }
        for seg in figure(a, size) {
            seg.draw(&mut img, size);
        }
        let data = img.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        let frame = RgbImage::from_raw(size, size, data).expect("buffer matches size");
        frames.push(match cfg.handedness {
            Handedness::Right => frame,
            Handedness::Left => frame.mirrored(),
        });
    }

    let (px0, px1, py0, py1) = figure_pixel_box(&arm, size);
    let (px0, px1) = match cfg.handedness {
        Handedness::Right => (px0, px1),
        Handedness::Left => (size - px1, size - px0),
    };
    let s = size as f64;
    let bbox = BBox::new(
        px0 as f64 / s,
        py0 as f64 / s,
        (px1 - px0) as f64 / s,
        (py1 - py0) as f64 / s,
    );
    let id = format!("synth-{}", cfg.seed);
    let ann = SwingAnnotation {
        sample_id: id.clone(),
        source_video_id: id,
        num_frames: cfg.num_frames as i64,
        event_frames: events.map(|e| e as i64),
        start_frame: 0,
        end_frame: cfg.num_frames as i64 - 1,
        bbox,
        slow_motion: false,
        club: Club::Driver,
        view: View::FaceOn,
        player_name: "synthetic".into(),
        sex: Sex::Male,
        fps: DEFAULT_FPS,
    };
    Ok((FrameSequence::new(frames, DEFAULT_FPS)?, ann))
}

/// Ranges from which each clip's settings are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n: usize,
    pub n_sources: usize,
    pub image_size: usize,
    pub tempo: (f64, f64),
    pub backswing: (usize, usize),
    pub follow_through_ratio: (f64, f64),
    pub lead_in: (usize, usize),
    pub lead_out: (usize, usize),
    pub jitter: (f64, f64),
    pub left_handed_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            n: 40,
            n_sources: 10,
            image_size: 96,
            tempo: (2.5, 3.5),
            backswing: (18, 35),
            follow_through_ratio: (1.2, 2.0),
            lead_in: (4, 24),
            lead_out: (4, 24),
            jitter: (4.0, 10.0),
            left_handed_prob: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n == 0 {
            return bad("corpus needs at least one clip");
        }
        if self.n_sources == 0 || self.n_sources > self.n {
            return bad("source count must be between 1 and the clip count");
        }
        let ordered = self.tempo.0 <= self.tempo.1
            && self.backswing.0 <= self.backswing.1
            && self.follow_through_ratio.0 <= self.follow_through_ratio.1
            && self.lead_in.0 <= self.lead_in.1
            && self.lead_out.0 <= self.lead_out.1
            && self.jitter.0 <= self.jitter.1;
        if !ordered {
            return bad("every range must be (low, high) with low <= high");
        }
        if self.tempo.0 <= 0.0 || self.follow_through_ratio.0 <= 0.0 || self.jitter.0 < 0.0 {
            return bad("tempo and follow-through ratio must be positive, jitter non-negative");
        }
        if !(0.0..=1.0).contains(&self.left_handed_prob) {
            return bad("left-handed probability must lie in [0, 1]");
        }
        Ok(())
    }

    /// Settings for clip `index`, drawn from a generator derived from the
    /// corpus seed and the index alone.
    pub fn clip_config(&self, index: usize) -> SyntheticSwingConfig {
        let mut rng = derive_rng(self.seed, &[b"clip", &(index as u64).to_le_bytes()]);
        let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        };
        let tempo = uniform(&mut rng, self.tempo);
        let ratio = uniform(&mut rng, self.follow_through_ratio);
        let backswing = rng.random_range(self.backswing.0..=self.backswing.1);
        let lead_in = rng.random_range(self.lead_in.0..=self.lead_in.1);
        let lead_out = rng.random_range(self.lead_out.0..=self.lead_out.1);
        let jitter = uniform(&mut rng, self.jitter);
        let left = rng.random_bool(self.left_handed_prob);
        let downswing = (backswing as f64 / tempo).round().max(MIN_DOWNSWING as f64);
        let follow = (ratio * downswing).round().max(MIN_PHASE as f64) as usize;
        SyntheticSwingConfig {
            num_frames: lead_in + lead_out + 1 + backswing + downswing as usize + follow,
            tempo,
            lead_in,
            lead_out,
            image_size: self.image_size,
            handedness: if left { Handedness::Left } else { Handedness::Right },
            jitter,
            seed: rng.next_u64(),
            follow_through_ratio: ratio,
        }
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, options: &[T]) -> T {
    options[rng.random_range(0..options.len())]
}

/// Clip `index` of the corpus, with its corpus-level ids and metadata.
pub fn generate_corpus_clip(spec: &SyntheticCorpusSpec, index: usize) -> Result<(FrameSequence, SwingAnnotation)> {
    let cfg = spec.clip_config(index);
    let (frames, mut ann) =
        generate_swing_clip(&cfg).map_err(|e| Error::Config(format!("clip {index}: {e}")))?;
    let source = index % spec.n_sources;
    let mut meta = derive_rng(spec.seed, &[b"source", &(source as u64).to_le_bytes()]);
    ann.sample_id = format!("clip-{index:04}");
    ann.source_video_id = format!("source-{source:03}");
    ann.player_name = format!("player-{source:03}");
    ann.sex = pick(&mut meta, &[Sex::Male, Sex::Female]);
    ann.view = pick(&mut meta, &[View::FaceOn, View::DownTheLine]);
    ann.club = pick(&mut meta, &[Club::Driver, Club::Wood, Club::Iron, Club::Wedge]);
    Ok((frames, ann))
}

/// Renders the whole corpus in memory.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<(FrameSequence, SwingAnnotation)>> {
    spec.validate()?;
    (0..spec.n).map(|i| generate_corpus_clip(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{tempo, validate_annotation};

    #[test]
    fn constructed_tempo() {
        let cfg = SyntheticSwingConfig::with_backswing(30, 3.0, 6, 6);
        let (frames, ann) = generate_swing_clip(&cfg).unwrap();
        assert_eq!(frames.len(), cfg.num_frames);
        let e = ann.event_frames;
        assert_eq!(e[3] - e[0], 30);
        assert_eq!(e[5] - e[3], 10);
        assert_eq!(tempo(&ann).unwrap(), 3.0);
        assert!(validate_annotation(&ann).is_empty());
    }

    #[test]
    fn analytic_matches_scan() {
        for backswing in 4..60 {
            for tempo in [1.5, 2.5, 3.0, 3.7, 5.0] {
                for lead in [0, 1, 7] {
                    let cfg = SyntheticSwingConfig::with_backswing(backswing, tempo, lead, 3);
                    let Ok(p) = cfg.phases() else { continue };
                    let arm = arm_profile(&p, cfg.num_frames);
                    let scanned = scanned_events(&p, &arm);
                    let analytic = analytic_events(&p);
                    for e in 0..NUM_EVENTS {
                        assert_eq!(scanned[e], Some(analytic[e]), "{cfg:?} event {e}");
                    }
                }
            }
        }
    }

    #[test]
    fn mirrored_handedness() {
        let right = SyntheticSwingConfig {
            seed: 9,
            ..SyntheticSwingConfig::default()
        };
        let left = SyntheticSwingConfig {
            handedness: Handedness::Left,
            ..right.clone()
        };
        let (fr, ar) = generate_swing_clip(&right).unwrap();
        let (fl, al) = generate_swing_clip(&left).unwrap();
        assert_eq!(ar.event_frames, al.event_frames);
        for (a, b) in fr.frames().iter().zip(fl.frames()) {
            assert_eq!(&a.mirrored(), b);
        }
        assert!((al.bbox.x - (1.0 - ar.bbox.x - ar.bbox.w)).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SyntheticSwingConfig::default();
        assert_eq!(generate_swing_clip(&cfg).unwrap(), generate_swing_clip(&cfg).unwrap());
    }

    #[test]
    fn impossible_tempo_rejected() {
        let cfg = SyntheticSwingConfig {
            num_frames: 20,
            lead_in: 2,
            lead_out: 2,
            tempo: 40.0,
            ..SyntheticSwingConfig::default()
        };
        assert!(matches!(generate_swing_clip(&cfg), Err(Error::Config(_))));
    }
}
