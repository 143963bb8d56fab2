//! Annotation schema, corpus validation, source-grouped cross-validation
//! splits and corpus statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Number of swing events in a sequence (background class excluded).
pub const NUM_EVENTS: usize = 8;
/// Number of per-frame classes: the eight events plus `NoEvent`.
pub const NUM_CLASSES: usize = 9;
/// Storage frame rate assumed when a record omits it.
pub const DEFAULT_FPS: f64 = 30.0;

/// Per-frame class, in swing order. `NoEvent` is the background class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventLabel {
    Address,
    ToeUp,
    MidBackswing,
    Top,
    MidDownswing,
    Impact,
    MidFollowThrough,
    Finish,
    NoEvent,
}

impl EventLabel {
    pub const EVENTS: [EventLabel; NUM_EVENTS] = [
        EventLabel::Address,
        EventLabel::ToeUp,
        EventLabel::MidBackswing,
        EventLabel::Top,
        EventLabel::MidDownswing,
        EventLabel::Impact,
        EventLabel::MidFollowThrough,
        EventLabel::Finish,
    ];

    pub const ALL: [EventLabel; NUM_CLASSES] = [
        EventLabel::Address,
        EventLabel::ToeUp,
        EventLabel::MidBackswing,
        EventLabel::Top,
        EventLabel::MidDownswing,
        EventLabel::Impact,
        EventLabel::MidFollowThrough,
        EventLabel::Finish,
        EventLabel::NoEvent,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Short column tag used in CSV headers (`A`, `TU`, ..., `none`).
    pub fn abbrev(self) -> &'static str {
        match self {
            EventLabel::Address => "A",
            EventLabel::ToeUp => "TU",
            EventLabel::MidBackswing => "MB",
            EventLabel::Top => "T",
            EventLabel::MidDownswing => "MD",
            EventLabel::Impact => "I",
            EventLabel::MidFollowThrough => "MFT",
            EventLabel::Finish => "F",
            EventLabel::NoEvent => "none",
        }
    }
}

impl fmt::Display for EventLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            EventLabel::Address => "Address",
            EventLabel::ToeUp => "Toe-up",
            EventLabel::MidBackswing => "Mid-backswing",
            EventLabel::Top => "Top",
            EventLabel::MidDownswing => "Mid-downswing",
            EventLabel::Impact => "Impact",
            EventLabel::MidFollowThrough => "Mid-follow-through",
            EventLabel::Finish => "Finish",
            EventLabel::NoEvent => "No-event",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Club {
    Driver,
    Wood,
    Iron,
    Wedge,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum View {
    FaceOn,
    DownTheLine,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

/// Axis-aligned box in normalized frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const FULL: BBox = BBox {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };

    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

/// Labels for one trimmed swing clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwingAnnotation {
    pub sample_id: String,
    pub source_video_id: String,
    pub num_frames: i64,
    /// Frame index of each event, in [`EventLabel::EVENTS`] order.
    pub event_frames: [i64; NUM_EVENTS],
    #[serde(default)]
    pub start_frame: i64,
    pub end_frame: i64,
    pub bbox: BBox,
    pub slow_motion: bool,
    pub club: Club,
    pub view: View,
    pub player_name: String,
    pub sex: Sex,
    #[serde(default = "default_fps")]
    pub fps: f64,
}

impl SwingAnnotation {
    pub fn event_frame(&self, event: EventLabel) -> Option<i64> {
        self.event_frames.get(event.index()).copied()
    }

    /// Re-bases a clip annotated inside a longer video so that it starts at
    /// frame 0. Frames before `Address` stay in the clip as background.
    pub fn trimmed(mut self) -> Self {
        let offset = self.start_frame;
        if offset != 0 {
            for f in self.event_frames.iter_mut() {
                *f -= offset;
            }
            self.end_frame -= offset;
            self.start_frame = 0;
        }
        self.num_frames = self.end_frame + 1;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Ordering,
    EventOutOfRange,
    TooFewFrames,
    StartFrame,
    EndFrame,
    BboxOutOfRange,
    BboxExceedsFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub kind: ViolationKind,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

const BBOX_EPS: f64 = 1e-9;

/// Lists every schema invariant `ann` breaks. An empty list means valid.
pub fn validate_annotation(ann: &SwingAnnotation) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: &str, kind, reason: String| {
        out.push(Violation {
            field: field.to_string(),
            kind,
            reason,
        })
    };

    if ann.num_frames < NUM_CLASSES as i64 {
        push(
            "num_frames",
            ViolationKind::TooFewFrames,
            format!("{} frames, at least {NUM_CLASSES} required", ann.num_frames),
        );
    }
    if ann.start_frame != 0 {
        push(
            "start_frame",
            ViolationKind::StartFrame,
            format!("clips are stored trimmed, expected 0, got {}", ann.start_frame),
        );
    }
    if ann.end_frame != ann.num_frames - 1 {
        push(
            "end_frame",
            ViolationKind::EndFrame,
            format!(
                "expected num_frames - 1 = {}, got {}",
                ann.num_frames - 1,
                ann.end_frame
            ),
        );
    }

    for (i, pair) in ann.event_frames.windows(2).enumerate() {
        if pair[1] <= pair[0] {
            let (a, b) = (EventLabel::EVENTS[i], EventLabel::EVENTS[i + 1]);
            push(
                "event_frames",
                ViolationKind::Ordering,
                format!("{b} (frame {}) not after {a} (frame {})", pair[1], pair[0]),
            );
        }
    }
    let first = ann.event_frames[0];
    let last = ann.event_frames[NUM_EVENTS - 1];
    if first < 0 {
        push(
            "event_frames",
            ViolationKind::EventOutOfRange,
            format!("Address at negative frame {first}"),
        );
    }
    if last > ann.end_frame {
        push(
            "event_frames",
            ViolationKind::EventOutOfRange,
            format!("Finish at frame {last} beyond end frame {}", ann.end_frame),
        );
    }

    let b = ann.bbox;
    let components = [("x", b.x), ("y", b.y), ("w", b.w), ("h", b.h)];
    let bad: Vec<_> = components
        .iter()
        .filter(|(_, v)| !(0.0..=1.0).contains(v))
        .map(|(n, v)| format!("{n}={v}"))
        .collect();
    if !bad.is_empty() {
        push(
            "bbox",
            ViolationKind::BboxOutOfRange,
            format!("components outside [0, 1]: {}", bad.join(", ")),
        );
    }
    if b.x + b.w > 1.0 + BBOX_EPS || b.y + b.h > 1.0 + BBOX_EPS {
        push(
            "bbox",
            ViolationKind::BboxExceedsFrame,
            format!(
                "bbox exceeds frame: x+w={:.4}, y+h={:.4}",
                b.x + b.w,
                b.y + b.h
            ),
        );
    }
    out
}

/// Fold index per sample for k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub n_folds: usize,
    pub seed: u64,
    pub fold_of_sample: BTreeMap<String, usize>,
}

impl SplitAssignment {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.fold_of_sample.get(sample_id).copied()
    }

    /// Samples per fold.
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.fold_of_sample.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Partitions `samples` into (training, held-out) for validation fold `fold`.
    pub fn partition<'a>(
        &self,
        samples: &'a [SwingAnnotation],
        fold: usize,
    ) -> (Vec<&'a SwingAnnotation>, Vec<&'a SwingAnnotation>) {
        samples
            .iter()
            .partition(|a| self.fold_of(&a.sample_id) != Some(fold))
    }
}

/// Assigns every source video (and thus all of its samples) to one fold.
///
/// Groups are shuffled with a seeded generator and then placed greedily into
/// whichever fold currently holds the fewest samples (lowest index on ties),
/// so fold sizes differ by at most one group.
pub fn generate_splits(
    samples: &[SwingAnnotation],
    n_folds: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in samples {
        groups
            .entry(s.source_video_id.as_str())
            .or_default()
            .push(s.sample_id.as_str());
    }
    if groups.len() < n_folds {
        return Err(Error::Config(format!(
            "{} source videos cannot fill {n_folds} folds",
            groups.len()
        )));
    }

    let mut order: Vec<Vec<&str>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut sizes = vec![0usize; n_folds];
    let mut fold_of_sample = BTreeMap::new();
    for group in order {
        let (fold, _) = sizes
            .iter()
            .enumerate()
            .min_by_key(|&(i, &n)| (n, i))
            .expect("n_folds >= 2");
        sizes[fold] += group.len();
        for id in group {
            fold_of_sample.insert(id.to_string(), fold);
        }
    }
    Ok(SplitAssignment {
        n_folds,
        seed,
        fold_of_sample,
    })
}

/// Backswing over downswing duration, in frames: `(Top - Address) / (Impact - Top)`.
pub fn tempo(ann: &SwingAnnotation) -> Result<f64> {
    let address = ann.event_frames[EventLabel::Address.index()];
    let top = ann.event_frames[EventLabel::Top.index()];
    let impact = ann.event_frames[EventLabel::Impact.index()];
    if impact <= top {
        return Err(Error::Degenerate(format!(
            "{}: Impact (frame {impact}) must come after Top (frame {top})",
            ann.sample_id
        )));
    }
    Ok((top - address) as f64 / (impact - top) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_samples: usize,
    pub by_club: BTreeMap<Club, usize>,
    pub by_view: BTreeMap<View, usize>,
    pub by_sex: BTreeMap<Sex, usize>,
    /// Keyed by `slow_motion`.
    pub by_slow_motion: BTreeMap<bool, usize>,
    pub total_frames: u64,
    /// Events per frame over the whole corpus.
    pub events_per_frame: f64,
    pub events_per_frame_real_time: Option<f64>,
    pub events_per_frame_slow_motion: Option<f64>,
    /// Mean tempo over samples with a well-defined tempo.
    pub mean_tempo: Option<f64>,
}

fn density(samples: impl Iterator<Item = i64>) -> Option<f64> {
    let (n, frames) = samples.fold((0u64, 0i64), |(n, f), x| (n + 1, f + x));
    (frames > 0).then(|| (NUM_EVENTS as u64 * n) as f64 / frames as f64)
}

pub fn corpus_stats(samples: &[SwingAnnotation]) -> Result<CorpusStats> {
    if samples.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    let mut by_club = BTreeMap::new();
    let mut by_view = BTreeMap::new();
    let mut by_sex = BTreeMap::new();
    let mut by_slow_motion = BTreeMap::new();
    for s in samples {
        *by_club.entry(s.club).or_insert(0) += 1;
        *by_view.entry(s.view).or_insert(0) += 1;
        *by_sex.entry(s.sex).or_insert(0) += 1;
        *by_slow_motion.entry(s.slow_motion).or_insert(0) += 1;
    }
    let total_frames: i64 = samples.iter().map(|s| s.num_frames).sum();
    if total_frames <= 0 {
        return Err(Error::Input("corpus has no frames".into()));
    }
    let tempos: Vec<f64> = samples.iter().filter_map(|s| tempo(s).ok()).collect();
    let mean_tempo = (!tempos.is_empty()).then(|| tempos.iter().sum::<f64>() / tempos.len() as f64);

    Ok(CorpusStats {
        num_samples: samples.len(),
        by_club,
        by_view,
        by_sex,
        by_slow_motion,
        total_frames: total_frames as u64,
        events_per_frame: (NUM_EVENTS * samples.len()) as f64 / total_frames as f64,
        events_per_frame_real_time: density(
            samples.iter().filter(|s| !s.slow_motion).map(|s| s.num_frames),
        ),
        events_per_frame_slow_motion: density(
            samples.iter().filter(|s| s.slow_motion).map(|s| s.num_frames),
        ),
        mean_tempo,
    })
}

pub fn load_corpus(path: &Path) -> Result<Vec<SwingAnnotation>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let records: Vec<SwingAnnotation> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    Ok(records.into_iter().map(SwingAnnotation::trimmed).collect())
}

pub fn save_corpus(path: &Path, samples: &[SwingAnnotation]) -> Result<()> {
    let text = serde_json::to_string_pretty(samples)
        .map_err(|e| Error::json("serializing corpus", e))?;
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample(id: &str, source: &str, num_frames: i64) -> SwingAnnotation {
        let events = [10, 20, 25, 40, 45, 50, 55, 60];
        SwingAnnotation {
            sample_id: id.into(),
            source_video_id: source.into(),
            num_frames,
            event_frames: events,
            start_frame: 0,
            end_frame: num_frames - 1,
            bbox: BBox::new(0.1, 0.1, 0.5, 0.6),
            slow_motion: false,
            club: Club::Driver,
            view: View::FaceOn,
            player_name: "player".into(),
            sex: Sex::Female,
            fps: DEFAULT_FPS,
        }
    }

    #[test]
    fn well_formed_annotation_is_valid() {
        assert!(validate_annotation(&sample("a", "v", 80)).is_empty());
    }

    #[test]
    fn out_of_order_events_give_one_ordering_violation() {
        let mut a = sample("a", "v", 80);
        a.event_frames = [5, 4, 25, 40, 45, 50, 55, 60];
        let v = validate_annotation(&a);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::Ordering);
    }

    #[test]
    fn bbox_past_right_edge_is_flagged() {
        let mut a = sample("a", "v", 80);
        a.bbox = BBox::new(0.9, 0.1, 0.2, 0.3);
        let v = validate_annotation(&a);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::BboxExceedsFrame);
    }

    #[test]
    fn finish_beyond_end_and_short_clip() {
        let mut a = sample("a", "v", 8);
        a.event_frames = [1, 2, 3, 4, 5, 6, 7, 8];
        let kinds: Vec<_> = validate_annotation(&a).into_iter().map(|v| v.kind).collect();
        assert_eq!(
            kinds,
            vec![ViolationKind::TooFewFrames, ViolationKind::EventOutOfRange]
        );
    }

    #[test]
    fn tempo_examples() {
        let mut a = sample("a", "v", 80);
        a.event_frames = [10, 15, 20, 40, 45, 50, 60, 70];
        assert_eq!(tempo(&a).unwrap(), 3.0);
        a.event_frames = [0, 5, 10, 15, 20, 30, 40, 50];
        assert_eq!(tempo(&a).unwrap(), 1.0);
        a.event_frames[5] = a.event_frames[3];
        assert!(matches!(tempo(&a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn density_examples() {
        let s = corpus_stats(&[sample("a", "v", 260)]).unwrap();
        assert!((s.events_per_frame - 8.0 / 260.0).abs() < 1e-15);
        let s = corpus_stats(&[sample("a", "v", 100), sample("b", "w", 300)]).unwrap();
        assert_eq!(s.events_per_frame, 0.04);
        assert_eq!(s.by_club[&Club::Driver], 2);
        assert!(corpus_stats(&[]).is_err());
    }

    #[test]
    fn split_keeps_sources_together() {
        let sources = ["s0", "s0", "s1", "s1", "s1", "s2", "s2", "s0"];
        let samples: Vec<_> = sources
            .iter()
            .enumerate()
            .map(|(i, s)| sample(&format!("c{i}"), s, 80))
            .collect();
        let split = generate_splits(&samples, 2, 7).unwrap();
        for a in &samples {
            for b in &samples {
                if a.source_video_id == b.source_video_id {
                    assert_eq!(split.fold_of(&a.sample_id), split.fold_of(&b.sample_id));
                }
            }
        }
        assert_eq!(split, generate_splits(&samples, 2, 7).unwrap());
    }

    #[test]
    fn singleton_sources_balance_exactly() {
        let samples: Vec<_> = (0..100)
            .map(|i| sample(&format!("c{i}"), &format!("v{i}"), 80))
            .collect();
        let split = generate_splits(&samples, 4, 3).unwrap();
        assert_eq!(split.fold_sizes(), vec![25, 25, 25, 25]);
    }

    #[test]
    fn too_few_sources_is_config_error() {
        let samples = vec![sample("a", "v", 80), sample("b", "v", 80)];
        assert!(matches!(generate_splits(&samples, 2, 0), Err(Error::Config(_))));
        assert!(matches!(generate_splits(&samples, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn json_field_names_round_trip() {
        let a = sample("a", "v", 80);
        let v = serde_json::to_value(&a).unwrap();
        for key in [
            "sample_id",
            "source_video_id",
            "num_frames",
            "event_frames",
            "start_frame",
            "end_frame",
            "bbox",
            "slow_motion",
            "club",
            "view",
            "player_name",
            "sex",
            "fps",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["view"], "face-on");
        let back: SwingAnnotation = serde_json::from_value(v).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn trimming_rebases_frames() {
        let mut a = sample("a", "v", 80);
        a.start_frame = 5;
        a.end_frame = 84;
        let t = a.trimmed();
        assert_eq!(t.start_frame, 0);
        assert_eq!(t.end_frame, 79);
        assert_eq!(t.num_frames, 80);
        assert_eq!(t.event_frames[0], 5);
    }
}
