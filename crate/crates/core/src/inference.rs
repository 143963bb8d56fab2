//! Full-clip event detection with non-overlapping sliding windows.

use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, EventLabel, NUM_CLASSES, NUM_EVENTS};
use crate::error::{Error, Result};
use crate::model::SwingNet;
use crate::preprocess::{center_square_bbox, FrameSequence, PreparedClip};

/// One window of a sliding-window pass: frames `[start, end)` followed by
/// `pad_count` repeats of frame `end - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub pad_count: usize,
}

/// Partitions `num_frames` into consecutive windows of length `t`.
pub fn sliding_windows(num_frames: usize, t: usize) -> Vec<Window> {
    assert!(t >= 1, "window length must be at least 1");
    (0..num_frames)
        .step_by(t)
        .map(|start| {
            let end = (start + t).min(num_frames);
            Window {
                start,
                end,
                pad_count: t - (end - start),
            }
        })
        .collect()
}

/// Per-frame class probabilities for a whole clip, `num_frames x 9`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTimeline {
    pub probs: Vec<f32>,
}

impl ProbabilityTimeline {
    pub fn from_rows(rows: Vec<[f32; NUM_CLASSES]>) -> Self {
        ProbabilityTimeline {
            probs: rows.into_iter().flatten().collect(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.probs.len() / NUM_CLASSES
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.probs[frame * NUM_CLASSES..(frame + 1) * NUM_CLASSES]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.probs.chunks_exact(NUM_CLASSES)
    }

    /// CSV with one row per frame: `frame,p_A,...,p_F,p_none`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame");
        for label in EventLabel::ALL {
            out.push_str(",p_");
            out.push_str(label.abbrev());
        }
        out.push('\n');
        for (i, row) in self.rows().enumerate() {
            out.push_str(&i.to_string());
            for p in row {
                out.push_str(&format!(",{p:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `model` over a prepared clip in windows of `t` frames. Padded
/// positions are discarded, so the timeline has exactly one row per frame.
pub fn infer_timeline(model: &SwingNet, clip: &PreparedClip, t: usize) -> Result<ProbabilityTimeline> {
    let d = model.config().d;
    if clip.d != d {
        return Err(Error::Input(format!(
            "{}: clip prepared at {}px but the model expects {d}px",
            clip.sample_id, clip.d
        )));
    }
    if clip.is_empty() {
        return Err(Error::Input(format!("{}: clip has no frames", clip.sample_id)));
    }
    if t == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let mut probs = Vec::with_capacity(clip.len() * NUM_CLASSES);
    let mut batch = Vec::with_capacity(t * 3 * d * d);
    for w in sliding_windows(clip.len(), t) {
        batch.clear();
        for i in w.start..w.end {
            batch.extend_from_slice(clip.frame(i));
        }
        for _ in 0..w.pad_count {
            batch.extend_from_slice(clip.frame(w.end - 1));
        }
        let out = model.forward(&batch, 1, t)?;
        probs.extend_from_slice(&out[0].probs[..(w.end - w.start) * NUM_CLASSES]);
    }
    Ok(ProbabilityTimeline { probs })
}

/// Prepares raw frames (annotated box, or the centre square when `bbox` is
/// `None`) and runs [`infer_timeline`].
pub fn infer_frames(
    model: &SwingNet,
    sample_id: &str,
    frames: &FrameSequence,
    bbox: Option<BBox>,
    t: usize,
) -> Result<ProbabilityTimeline> {
    let bbox = bbox.unwrap_or_else(|| center_square_bbox(frames.width(), frames.height()));
    let clip = PreparedClip::with_bbox(sample_id, frames, bbox, model.config().d)?;
    infer_timeline(model, &clip, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub sample_id: String,
    pub predicted_frames: [i64; NUM_EVENTS],
    pub confidences: [f64; NUM_EVENTS],
}

/// Strategy for turning a timeline into one frame per event.
pub trait EventSelector {
    fn select(&self, timeline: &ProbabilityTimeline) -> ([i64; NUM_EVENTS], [f64; NUM_EVENTS]);
}

/// Independent per-class argmax; ties go to the earliest frame and no
/// ordering between events is enforced.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxConfidence;

impl EventSelector for MaxConfidence {
    fn select(&self, timeline: &ProbabilityTimeline) -> ([i64; NUM_EVENTS], [f64; NUM_EVENTS]) {
        let mut frames = [0i64; NUM_EVENTS];
        let mut conf = [f64::NEG_INFINITY; NUM_EVENTS];
        for (i, row) in timeline.rows().enumerate() {
            for e in 0..NUM_EVENTS {
                let p = row[e] as f64;
                if p > conf[e] {
                    conf[e] = p;
                    frames[e] = i as i64;
                }
            }
        }
        (frames, conf)
    }
}

pub fn detect_events(sample_id: &str, timeline: &ProbabilityTimeline) -> DetectionResult {
    detect_events_with(sample_id, timeline, &MaxConfidence)
}

pub fn detect_events_with(
    sample_id: &str,
    timeline: &ProbabilityTimeline,
    selector: &dyn EventSelector,
) -> DetectionResult {
    assert!(timeline.num_frames() > 0, "cannot detect events in an empty timeline");
    let (predicted_frames, confidences) = selector.select(timeline);
    DetectionResult {
        sample_id: sample_id.to_string(),
        predicted_frames,
        confidences,
    }
}
