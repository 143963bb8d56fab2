//! Trains a small model on a synthetic corpus and reports held-out PCE.
//!
//! `cargo run --release -p swingseq --example synthetic_learnability -- [iterations] [batch]`

use swingseq::dataset::generate_splits;
use swingseq::model::{ModelConfig, SwingNet};
use swingseq::preprocess::{AugmentParams, PreparedClip};
use swingseq::synthetic::{generate_corpus, SyntheticCorpusSpec};
use swingseq::training::{evaluate_clips, smoothed, train_with_progress, TrainConfig};

fn main() -> swingseq::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let iterations = args.first().copied().unwrap_or(800);
    let batch = args.get(1).copied().unwrap_or(2);

    let spec = SyntheticCorpusSpec {
        n: 60,
        n_sources: 20,
        seed: 7,
        ..SyntheticCorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    let anns: Vec<_> = corpus.iter().map(|(_, a)| a.clone()).collect();
    let split = generate_splits(&anns, 4, 7)?;

    let cfg = ModelConfig {
        d: 96,
        seq_len: 32,
        lstm_layers: 1,
        lstm_hidden: 64,
        bidirectional: true,
        freeze_k: 0,
        pretrained: false,
        ..ModelConfig::default()
    };
    let (mut train_clips, mut val_clips, mut val_anns) = (Vec::new(), Vec::new(), Vec::new());
    for (frames, ann) in &corpus {
        let clip = PreparedClip::new(ann, frames, cfg.d)?;
        if split.fold_of(&ann.sample_id) == Some(0) {
            val_clips.push(clip);
            val_anns.push(ann.clone());
        } else {
            train_clips.push(clip);
        }
    }
    println!("{} training clips, {} held out", train_clips.len(), val_clips.len());

    let mut model = SwingNet::new(cfg, 7)?;
    let tc = TrainConfig {
        batch_size: batch,
        iterations,
        lr_drop_iteration: None,
        augment: AugmentParams::default(),
        seed: 7,
        ..TrainConfig::default()
    };
    let started = std::time::Instant::now();
    let report = train_with_progress(&mut model, &train_clips, &tc, &mut |it, loss| {
        if it % 25 == 0 {
            println!("iter {it:5} loss {loss:.4} ({:.1}s)", started.elapsed().as_secs_f64());
        }
    })?;
    let curve = smoothed(&report.loss_curve, 50);
    println!("smoothed loss: first {:.4}, last {:.4}", curve[0], curve[curve.len() - 1]);
    let pce = evaluate_clips(&model, &val_clips, &val_anns, cfg.seq_len)?;
    println!("held-out PCE {:.1}% (per event {:?})", pce.overall_pce, pce.per_event_pce);
    Ok(())
}
