//! Sample-dependent tolerance, PCE and cross-validation aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{EventLabel, SwingAnnotation, NUM_EVENTS};
use crate::error::{Error, Result};
use crate::inference::DetectionResult;

/// Nearest integer with halves rounded up.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Tolerance in frames: `max(round(n / f), 1)` where `n` is the number of
/// frames from Address to Impact. Only ground truth enters the computation.
pub fn tolerance(ann: &SwingAnnotation, f: f64) -> i64 {
    debug_assert!(f > 0.0);
    let n = ann.event_frames[EventLabel::Impact.index()] - ann.event_frames[EventLabel::Address.index()];
    round_half_up(n as f64 / f).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// PCE restricted to a subset of samples (e.g. slow-motion only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub name: String,
    pub n_samples: usize,
    pub per_event_pce: [f64; NUM_EVENTS],
    pub overall_pce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceReport {
    pub per_event_pce: [f64; NUM_EVENTS],
    pub overall_pce: f64,
    /// Mean over the six events between Address and Finish.
    pub pce_without_address_finish: f64,
    pub strata: Vec<StratumRow>,
    pub n_samples: usize,
    pub tolerance_stats: ToleranceStats,
}

/// Pairs detections with annotations by `sample_id`; every annotation must
/// have exactly one detection and vice versa.
pub fn pair_by_id<'a>(
    detections: &'a [DetectionResult],
    truths: &'a [SwingAnnotation],
) -> Result<Vec<(&'a DetectionResult, &'a SwingAnnotation)>> {
    let mut by_id: BTreeMap<&str, &DetectionResult> = BTreeMap::new();
    let mut problems = Vec::new();
    for d in detections {
        if by_id.insert(&d.sample_id, d).is_some() {
            problems.push(format!("duplicate detection for {}", d.sample_id));
        }
    }
    let mut pairs = Vec::with_capacity(truths.len());
    let mut seen = BTreeMap::new();
    for t in truths {
        if seen.insert(t.sample_id.as_str(), ()).is_some() {
            problems.push(format!("duplicate annotation for {}", t.sample_id));
            continue;
        }
        match by_id.remove(t.sample_id.as_str()) {
            Some(d) => pairs.push((d, t)),
            None => problems.push(format!("no detection for {}", t.sample_id)),
        }
    }
    for id in by_id.keys() {
        problems.push(format!("detection {id} has no annotation"));
    }
    if !problems.is_empty() {
        return Err(Error::Input(format!("cannot pair detections with annotations: {}", problems.join("; "))));
    }
    Ok(pairs)
}

fn percentages(correct: &[usize; NUM_EVENTS], n: usize) -> ([f64; NUM_EVENTS], f64) {
    let per_event = correct.map(|c| 100.0 * c as f64 / n as f64);
    let total: usize = correct.iter().sum();
    (per_event, 100.0 * total as f64 / (NUM_EVENTS * n) as f64)
}

/// PCE using each annotation's own `fps`, or `f` for every sample when given.
pub fn pce(detections: &[DetectionResult], truths: &[SwingAnnotation], f: Option<f64>) -> Result<PceReport> {
    if let Some(f) = f {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::Config(format!("frame rate must be positive, got {f}")));
        }
    }
    pce_with(detections, truths, |ann| tolerance(ann, f.unwrap_or(ann.fps)))
}

/// PCE with an arbitrary per-sample tolerance.
pub fn pce_with(
    detections: &[DetectionResult],
    truths: &[SwingAnnotation],
    delta: impl Fn(&SwingAnnotation) -> i64,
) -> Result<PceReport> {
    let pairs = pair_by_id(detections, truths)?;
    if pairs.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let mut strata: BTreeMap<&str, (usize, [usize; NUM_EVENTS])> = BTreeMap::new();
    let mut correct = [0usize; NUM_EVENTS];
    let (mut dmin, mut dmax, mut dsum) = (i64::MAX, i64::MIN, 0i64);
    for (det, ann) in &pairs {
        let delta = delta(ann);
        dmin = dmin.min(delta);
        dmax = dmax.max(delta);
        dsum += delta;
        let stratum = strata
            .entry(if ann.slow_motion { "slow-motion" } else { "real-time" })
            .or_insert((0, [0; NUM_EVENTS]));
        stratum.0 += 1;
        for e in 0..NUM_EVENTS {
            if (det.predicted_frames[e] - ann.event_frames[e]).abs() <= delta {
                correct[e] += 1;
                stratum.1[e] += 1;
            }
        }
    }
    let n = pairs.len();
    let (per_event_pce, overall_pce) = percentages(&correct, n);
    let inner: usize = correct[1..NUM_EVENTS - 1].iter().sum();
    Ok(PceReport {
        per_event_pce,
        overall_pce,
        pce_without_address_finish: 100.0 * inner as f64 / ((NUM_EVENTS - 2) * n) as f64,
        strata: strata
            .into_iter()
            .map(|(name, (k, c))| {
                let (per_event_pce, overall_pce) = percentages(&c, k);
                StratumRow {
                    name: name.to_string(),
                    n_samples: k,
                    per_event_pce,
                    overall_pce,
                }
            })
            .collect(),
        n_samples: n,
        tolerance_stats: ToleranceStats {
            min: dmin as f64,
            mean: dsum as f64 / n as f64,
            max: dmax as f64,
        },
    })
}

/// Unweighted mean of per-fold reports. Strata are averaged over the folds
/// in which they occur.
pub fn cross_validate(reports: &[PceReport], n_folds: usize) -> Result<PceReport> {
    if reports.len() != n_folds || n_folds == 0 {
        return Err(Error::Input(format!(
            "expected {n_folds} fold reports, got {}",
            reports.len()
        )));
    }
    let k = n_folds as f64;
    let mean = |f: &dyn Fn(&PceReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let per_event_pce = std::array::from_fn(|e| mean(&|r| r.per_event_pce[e]));

    let mut strata: BTreeMap<String, Vec<&StratumRow>> = BTreeMap::new();
    for r in reports {
        for s in &r.strata {
            strata.entry(s.name.clone()).or_default().push(s);
        }
    }
    let strata = strata
        .into_iter()
        .map(|(name, rows)| {
            let m = rows.len() as f64;
            StratumRow {
                name,
                n_samples: rows.iter().map(|s| s.n_samples).sum(),
                per_event_pce: std::array::from_fn(|e| rows.iter().map(|s| s.per_event_pce[e]).sum::<f64>() / m),
                overall_pce: rows.iter().map(|s| s.overall_pce).sum::<f64>() / m,
            }
        })
        .collect();

    let n_samples = reports.iter().map(|r| r.n_samples).sum::<usize>();
    Ok(PceReport {
        per_event_pce,
        overall_pce: mean(&|r| r.overall_pce),
        pce_without_address_finish: mean(&|r| r.pce_without_address_finish),
        strata,
        n_samples,
        tolerance_stats: ToleranceStats {
            min: reports.iter().map(|r| r.tolerance_stats.min).fold(f64::INFINITY, f64::min),
            mean: reports
                .iter()
                .map(|r| r.tolerance_stats.mean * r.n_samples as f64)
                .sum::<f64>()
                / n_samples as f64,
            max: reports.iter().map(|r| r.tolerance_stats.max).fold(f64::NEG_INFINITY, f64::max),
        },
    })
}

/// CSV in the usual results-table layout: one row per labelled report.
pub fn pce_table_csv(rows: &[(String, &PceReport)]) -> String {
    let mut out = String::from("name");
    for e in EventLabel::EVENTS {
        out.push(',');
        out.push_str(e.abbrev());
    }
    out.push_str(",PCE\n");
    for (name, r) in rows {
        out.push_str(name);
        for v in r.per_event_pce {
            out.push_str(&format!(",{v:.1}"));
        }
        out.push_str(&format!(",{:.1}\n", r.overall_pce));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::sample;

    fn with_span(n: i64) -> SwingAnnotation {
        let mut a = sample("a", "v", 400);
        a.event_frames = [10, 11, 12, 13, 14, 10 + n, 300, 301];
        a
    }

    #[test]
    fn tolerance_examples() {
        assert_eq!(tolerance(&with_span(30), 30.0), 1);
        assert_eq!(tolerance(&with_span(100), 30.0), 3);
        assert_eq!(tolerance(&with_span(4), 30.0), 1);
        // half rounds up
        assert_eq!(tolerance(&with_span(45), 30.0), 2);
    }

    fn exact(a: &SwingAnnotation) -> DetectionResult {
        DetectionResult {
            sample_id: a.sample_id.clone(),
            predicted_frames: a.event_frames,
            confidences: [1.0; NUM_EVENTS],
        }
    }

    #[test]
    fn perfect_and_partial() {
        let truths = vec![sample("a", "v", 80), sample("b", "v", 80)];
        let dets: Vec<_> = truths.iter().map(exact).collect();
        let r = pce(&dets, &truths, Some(30.0)).unwrap();
        assert_eq!(r.overall_pce, 100.0);
        assert_eq!(r.pce_without_address_finish, 100.0);

        let mut d = exact(&truths[0]);
        d.predicted_frames[0] += 5;
        d.predicted_frames[7] -= 5;
        let r = pce(&[d], &truths[..1], Some(30.0)).unwrap();
        assert_eq!(r.overall_pce, 75.0);
        assert_eq!(r.pce_without_address_finish, 100.0);
        assert_eq!(r.strata.len(), 1);
        assert_eq!(r.strata[0].name, "real-time");
    }

    #[test]
    fn mismatched_ids_rejected() {
        let truths = vec![sample("a", "v", 80)];
        let mut d = exact(&truths[0]);
        d.sample_id = "zzz".into();
        let err = pce(&[d], &truths, None).unwrap_err();
        assert!(matches!(err, Error::Input(ref m) if m.contains("no detection for a")));
    }

    #[test]
    fn cross_validation_mean() {
        let truths = vec![sample("a", "v", 80)];
        let base = pce(&[exact(&truths[0])], &truths, None).unwrap();
        let reports: Vec<_> = [70.0, 72.0, 78.0, 80.0]
            .iter()
            .map(|&v| PceReport {
                overall_pce: v,
                ..base.clone()
            })
            .collect();
        assert_eq!(cross_validate(&reports, 4).unwrap().overall_pce, 75.0);
        let same = cross_validate(&vec![base.clone(); 4], 4).unwrap();
        assert_eq!(same.per_event_pce, base.per_event_pce);
        assert_eq!(same.overall_pce, base.overall_pce);
        assert!(cross_validate(&reports[..3], 4).is_err());
    }

    #[test]
    fn table_csv_layout() {
        let truths = vec![sample("a", "v", 80)];
        let r = pce(&[exact(&truths[0])], &truths, None).unwrap();
        let csv = pce_table_csv(&[("avg".into(), &r)]);
        assert!(csv.starts_with("name,A,TU,MB,T,MD,I,MFT,F,PCE\navg,100.0,"));
    }
}
