//! On-disk corpus layout: `<root>/corpus.json` next to `<root>/frames/<sample_id>/`,
//! one numbered PNG per frame.

use std::path::{Path, PathBuf};

use crate::dataset::{load_corpus, save_corpus, SwingAnnotation};
use crate::error::{Error, Result};
use crate::io::{read_frame_dir, write_frame_dir};
use crate::preprocess::{FrameSequence, PreparedClip};
use crate::synthetic::{generate_corpus_clip, SyntheticCorpusSpec};

pub const CORPUS_FILE: &str = "corpus.json";
pub const FRAMES_DIR: &str = "frames";

/// Frame directory of `sample_id` for a corpus file at `corpus_path`.
pub fn clip_dir(corpus_path: &Path, sample_id: &str) -> PathBuf {
    corpus_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(FRAMES_DIR)
        .join(sample_id)
}

pub fn load_clip_frames(corpus_path: &Path, ann: &SwingAnnotation) -> Result<FrameSequence> {
    read_frame_dir(&clip_dir(corpus_path, &ann.sample_id), ann.fps)
}

/// Loads and prepares every listed clip at input size `d`.
pub fn load_prepared(corpus_path: &Path, anns: &[SwingAnnotation], d: usize) -> Result<Vec<PreparedClip>> {
    anns.iter()
        .map(|ann| {
            let frames = load_clip_frames(corpus_path, ann)?;
            PreparedClip::new(ann, &frames, d)
        })
        .collect()
}

/// Renders a synthetic corpus into `dir` and returns its annotations.
pub fn write_synthetic_corpus(dir: &Path, spec: &SyntheticCorpusSpec) -> Result<Vec<SwingAnnotation>> {
    spec.validate()?;
    let corpus_path = dir.join(CORPUS_FILE);
    let mut anns = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let (frames, ann) = generate_corpus_clip(spec, i)?;
        write_frame_dir(&clip_dir(&corpus_path, &ann.sample_id), &frames).map_err(|e| {
            Error::Input(format!("writing frames of {}: {e}", ann.sample_id))
        })?;
        log::debug!("wrote {} ({} frames)", ann.sample_id, ann.num_frames);
        anns.push(ann);
    }
    save_corpus(&corpus_path, &anns)?;
    Ok(anns)
}

/// Reads a corpus file and fails on any annotation that is not valid.
pub fn load_valid_corpus(corpus_path: &Path) -> Result<Vec<SwingAnnotation>> {
    let anns = load_corpus(corpus_path)?;
    let mut problems = Vec::new();
    for a in &anns {
        for v in crate::dataset::validate_annotation(a) {
            problems.push(format!("{}: {v}", a.sample_id));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Input(format!("invalid annotations: {}", problems.join("; "))));
    }
    Ok(anns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticCorpusSpec {
            n: 3,
            n_sources: 2,
            image_size: 32,
            ..SyntheticCorpusSpec::default()
        };
        let anns = write_synthetic_corpus(dir.path(), &spec).unwrap();
        let corpus = dir.path().join(CORPUS_FILE);
        assert_eq!(load_valid_corpus(&corpus).unwrap(), anns);
        let clips = load_prepared(&corpus, &anns, 32).unwrap();
        for (c, a) in clips.iter().zip(&anns) {
            assert_eq!(c.len() as i64, a.num_frames);
            assert_eq!(c.labels.iter().filter(|&&l| l != 8).count(), 8);
        }
    }
}
