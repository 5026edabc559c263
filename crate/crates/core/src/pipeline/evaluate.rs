//! Success criteria and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use super::detect::DetectionResult;
use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Radius multiples of the per-threshold breakdown.
pub const RADIUS_MULTIPLES: [f64; 5] = [0.125, 0.25, 0.5, 1.0, 2.0];
const RADIUS_LABELS: [&str; 5] = ["R/8", "R/4", "R/2", "R", "2R"];

/// Thresholds of the normalized-error accuracy curve.
pub fn error_thresholds() -> Vec<f64> {
    (0..=25).map(|i| i as f64 / 100.0).collect()
}

/// `max(d_left, d_right) / w` with `w` the ground-truth inter-target distance.
pub fn normalized_error(d_left: f64, d_right: f64, w: f64) -> f64 {
    d_left.max(d_right) / w
}

/// All comparisons are inclusive (`≤`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Criterion {
    /// Every target within `c·R`.
    Radius(f64),
    /// Normalized error at most the threshold (two-target records only).
    NormalizedError(f64),
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Radius(c) => write!(f, "distance <= {c}R"),
            Self::NormalizedError(e) => write!(f, "normalized error <= {e}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageOutcome {
    pub image_id: String,
    pub detector: String,
    pub fold: usize,
    /// Distance per target in original pixels; infinite when the detector
    /// was not trained.
    pub distances: Vec<f64>,
    /// Worst distance relative to `R`.
    pub relative: f64,
    pub normalized_error: Option<f64>,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorScore {
    pub detector: String,
    pub n: usize,
    pub successes: usize,
    pub fails: usize,
    /// Detections missing because a template failed to train.
    pub untrained: usize,
    pub fold_rates: Vec<f64>,
    /// Mean and sample standard deviation of the fold rates.
    pub mean: f64,
    pub std: f64,
    /// Success fraction at each of [`RADIUS_MULTIPLES`].
    pub by_radius: [f64; 5],
    /// Sorted normalized errors (two-target tasks).
    pub normalized_errors: Vec<f64>,
}

impl DetectorScore {
    /// Pooled success rate.
    pub fn rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.successes as f64 / self.n as f64
        }
    }

    /// Fraction with normalized error `≤ t` at each threshold.
    pub fn accuracy_curve(&self, thresholds: &[f64]) -> Vec<f64> {
        let n = self.normalized_errors.len().max(1) as f64;
        thresholds
            .iter()
            .map(|t| self.normalized_errors.iter().filter(|e| **e <= *t).count() as f64 / n)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub criterion: Criterion,
    pub folds: usize,
    pub seed: Option<u64>,
    pub scores: Vec<DetectorScore>,
    pub outcomes: Vec<ImageOutcome>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Score detections against the manifest. `fold_of` assigns records to
/// folds (all in fold 0 when `None`). Every detector must cover every
/// record.
pub fn evaluate(
    detections: &[DetectionResult],
    manifest: &DatasetManifest,
    criterion: Criterion,
    fold_of: Option<&BTreeMap<String, usize>>,
) -> Result<EvaluationReport> {
    let mut detectors: Vec<&str> = Vec::new();
    let mut index: BTreeMap<(&str, &str), &DetectionResult> = BTreeMap::new();
    for d in detections {
        if !detectors.contains(&d.detector.as_str()) {
            detectors.push(&d.detector);
        }
        index.insert((d.detector.as_str(), d.image_id.as_str()), d);
    }
    if let Criterion::NormalizedError(_) = criterion {
        if manifest.num_targets() != 2 {
            return Err(Error::InvalidParameter("normalized error needs two targets per record".into()));
        }
    }
    let folds = fold_of.map_or(1, |m| m.values().max().map_or(1, |f| f + 1));
    let mut outcomes = Vec::new();
    let mut scores = Vec::new();
    for det in &detectors {
        let mut fold_n = vec![0usize; folds];
        let mut fold_ok = vec![0usize; folds];
        let mut within = [0usize; 5];
        let mut errors = Vec::new();
        let (mut successes, mut untrained) = (0, 0);
        for rec in &manifest.records {
            let d = index
                .get(&(*det, rec.id.as_str()))
                .ok_or_else(|| Error::MissingDetection(format!("{} ({det})", rec.id)))?;
            let truth = rec.targets();
            let distances: Vec<f64> = truth
                .iter()
                .enumerate()
                .map(|(t, &(x, y))| match d.targets.get(t).copied().flatten() {
                    Some(h) => (h.x - x).hypot(h.y - y),
                    None => f64::INFINITY,
                })
                .collect();
            if distances.iter().any(|d| d.is_infinite()) {
                untrained += 1;
            }
            let worst = distances.iter().fold(0.0f64, |m, d| m.max(*d));
            let relative = worst / rec.radius;
            let nerr = (truth.len() == 2).then(|| {
                let w = (truth[0].0 - truth[1].0).hypot(truth[0].1 - truth[1].1);
                normalized_error(distances[0], distances[1], w)
            });
            let success = match criterion {
                Criterion::Radius(c) => worst <= c * rec.radius,
                Criterion::NormalizedError(t) => nerr.is_some_and(|e| e <= t),
            };
            for (k, c) in RADIUS_MULTIPLES.iter().enumerate() {
                if worst <= c * rec.radius {
                    within[k] += 1;
                }
            }
            if let Some(e) = nerr {
                errors.push(e);
            }
            let fold = fold_of.and_then(|m| m.get(&rec.id).copied()).unwrap_or(0);
            fold_n[fold] += 1;
            if success {
                fold_ok[fold] += 1;
                successes += 1;
            }
            outcomes.push(ImageOutcome {
                image_id: rec.id.clone(),
                detector: det.to_string(),
                fold,
                distances,
                relative,
                normalized_error: nerr,
                success,
            });
        }
        let n = manifest.len();
        let fold_rates: Vec<f64> = fold_n
            .iter()
            .zip(&fold_ok)
            .filter(|(n, _)| **n > 0)
            .map(|(n, k)| *k as f64 / *n as f64)
            .collect();
        let (mean, std) = mean_std(&fold_rates);
        errors.sort_by(f64::total_cmp);
        scores.push(DetectorScore {
            detector: det.to_string(),
            n,
            successes,
            fails: n - successes,
            untrained,
            fold_rates,
            mean,
            std,
            by_radius: within.map(|k| if n == 0 { 0.0 } else { k as f64 / n as f64 }),
            normalized_errors: errors,
        });
    }
    Ok(EvaluationReport {
        criterion,
        folds,
        seed: None,
        scores,
        outcomes,
    })
}

impl EvaluationReport {
    pub fn score(&self, detector: &str) -> Option<&DetectorScore> {
        self.scores.iter().find(|s| s.detector == detector)
    }

    /// Highest pooled rate among detectors whose name satisfies `filter`.
    pub fn best<F: Fn(&str) -> bool>(&self, filter: F) -> Option<&DetectorScore> {
        self.scores
            .iter()
            .filter(|s| filter(&s.detector))
            .max_by(|a, b| a.rate().total_cmp(&b.rate()).then(b.fails.cmp(&a.fails)))
    }

    /// One row per detector.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["detector", "n", "rate", "mean", "std", "fails", "untrained"]
            .map(String::from)
            .to_vec();
        header.extend(RADIUS_LABELS.iter().map(|l| format!("within_{l}")));
        header.extend((0..self.folds).map(|f| format!("fold_{f}")));
        wtr.write_record(&header)?;
        for s in &self.scores {
            let mut row = vec![
                s.detector.clone(),
                s.n.to_string(),
                format!("{:.6}", s.rate()),
                format!("{:.6}", s.mean),
                format!("{:.6}", s.std),
                s.fails.to_string(),
                s.untrained.to_string(),
            ];
            row.extend(s.by_radius.iter().map(|v| format!("{v:.6}")));
            let mut rates = s.fold_rates.iter();
            row.extend((0..self.folds).map(|_| rates.next().map_or(String::new(), |r| format!("{r:.6}"))));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Per-image outcomes.
    pub fn write_outcomes_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["image_id", "detector", "fold", "distances", "relative", "normalized_error", "success"])?;
        for o in &self.outcomes {
            let d: Vec<String> = o.distances.iter().map(|d| format!("{d:.3}")).collect();
            wtr.write_record([
                o.image_id.clone(),
                o.detector.clone(),
                o.fold.to_string(),
                d.join(";"),
                format!("{:.4}", o.relative),
                o.normalized_error.map_or(String::new(), |e| format!("{e:.4}")),
                (o.success as u8).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Success-rate table with the per-radius breakdown, and the
    /// normalized-error accuracy curve for two-target tasks.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "criterion: {}", self.criterion);
        let _ = writeln!(s, "folds: {}", self.folds);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed: {seed}");
        }
        let width = self.scores.iter().map(|s| s.detector.len()).max().unwrap_or(8).max(8);
        let _ = write!(s, "\n{:<width$}  {:>17}  {:>5}", "detector", "success", "fails");
        for l in RADIUS_LABELS {
            let _ = write!(s, "  {l:>7}");
        }
        s.push('\n');
        for sc in &self.scores {
            let _ = write!(
                s,
                "{:<width$}  {:>7.2}% ± {:>6.2}%  {:>5}",
                sc.detector,
                100.0 * sc.rate(),
                100.0 * sc.std,
                sc.fails
            );
            for v in sc.by_radius {
                let _ = write!(s, "  {:>6.2}%", 100.0 * v);
            }
            if sc.untrained > 0 {
                let _ = write!(s, "  ({} untrained)", sc.untrained);
            }
            s.push('\n');
        }
        if self.scores.iter().any(|s| !s.normalized_errors.is_empty()) {
            let th = error_thresholds();
            let _ = write!(s, "\naccuracy vs normalized error\n{:<width$}", "e <=");
            for t in th.iter().step_by(5) {
                let _ = write!(s, "  {t:>6.2}");
            }
            s.push('\n');
            for sc in &self.scores {
                let curve = sc.accuracy_curve(&th);
                let _ = write!(s, "{:<width$}", sc.detector);
                for v in curve.iter().step_by(5) {
                    let _ = write!(s, "  {:>5.1}%", 100.0 * v);
                }
                s.push('\n');
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::detect::TargetHit;
    use crate::pipeline::manifest::ManifestRecord;
    use std::path::PathBuf;

    fn record(id: &str, second: Option<(f64, f64)>) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            path: PathBuf::from(id),
            x: 10.0,
            y: 10.0,
            radius: 4.0,
            second,
            roi: None,
            um_per_pixel: None,
        }
    }

    fn hit(x: f64, y: f64) -> Option<TargetHit> {
        Some(TargetHit { x, y, value: 0.0 })
    }

    #[test]
    fn error_formula() {
        assert_eq!(normalized_error(0.0, 0.0, 60.0), 0.0);
        assert!(normalized_error(3.0, 6.0, 60.0) <= 0.1);
    }

    #[test]
    fn radius_boundary_is_inclusive() {
        let m = DatasetManifest {
            records: vec![record("a", None), record("b", None)],
        };
        let dets = vec![
            DetectionResult {
                image_id: "a".into(),
                detector: "A_r2".into(),
                targets: vec![hit(14.0, 10.0)],
            },
            DetectionResult {
                image_id: "b".into(),
                detector: "A_r2".into(),
                targets: vec![hit(14.5, 10.0)],
            },
        ];
        let r = evaluate(&dets, &m, Criterion::Radius(1.0), None).unwrap();
        let s = &r.scores[0];
        assert_eq!((s.successes, s.fails), (1, 1));
        assert_eq!(s.by_radius, [0.0, 0.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn missing_detection_is_an_error() {
        let m = DatasetManifest {
            records: vec![record("a", None), record("b", None)],
        };
        let dets = vec![DetectionResult {
            image_id: "a".into(),
            detector: "A_r2".into(),
            targets: vec![hit(10.0, 10.0)],
        }];
        assert!(matches!(
            evaluate(&dets, &m, Criterion::Radius(1.0), None),
            Err(Error::MissingDetection(_))
        ));
    }

    #[test]
    fn two_target_error_and_untrained() {
        let m = DatasetManifest {
            records: vec![record("a", Some((70.0, 10.0)))],
        };
        let dets = vec![
            DetectionResult {
                image_id: "a".into(),
                detector: "C_lin_r2".into(),
                targets: vec![hit(13.0, 10.0), hit(70.0, 16.0)],
            },
            DetectionResult {
                image_id: "a".into(),
                detector: "B_lin_r2".into(),
                targets: vec![None, None],
            },
        ];
        let r = evaluate(&dets, &m, Criterion::NormalizedError(0.1), None).unwrap();
        let c = r.score("C_lin_r2").unwrap();
        assert_eq!(c.successes, 1);
        assert!((c.normalized_errors[0] - 0.1).abs() < 1e-12);
        let b = r.score("B_lin_r2").unwrap();
        assert_eq!((b.fails, b.untrained), (1, 1));
        assert!(r.to_table().contains("untrained"));
    }

    #[test]
    fn fold_statistics() {
        let (m, s) = mean_std(&[1.0, 0.5]);
        assert_eq!(m, 0.75);
        assert!((s - 0.125f64.sqrt()).abs() < 1e-12);
    }
}
