#![allow(dead_code)]

use swingseq::dataset::{BBox, Club, Sex, SwingAnnotation, View, NUM_EVENTS};

/// A valid annotation with the given event frames and clip length.
pub fn annotation(id: &str, source: &str, num_frames: i64, events: [i64; NUM_EVENTS]) -> SwingAnnotation {
    SwingAnnotation {
        sample_id: id.to_string(),
        source_video_id: source.to_string(),
        num_frames,
        event_frames: events,
        start_frame: 0,
        end_frame: num_frames - 1,
        bbox: BBox::new(0.1, 0.1, 0.8, 0.8),
        slow_motion: false,
        club: Club::Driver,
        view: View::FaceOn,
        player_name: "player".into(),
        sex: Sex::Female,
        fps: 30.0,
    }
}
