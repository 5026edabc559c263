//! k-fold cross-validation and its output files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::PipelineConfig;
use super::detect::{detector_specs, match_image, train_models, write_detections_csv, DetectionResult, Model, Regularizers};
use super::evaluate::{evaluate, Criterion, EvaluationReport};
use super::imageio::Channel;
use super::manifest::DatasetManifest;
use super::patches::{PreparedImage, Preparer};
use super::timing::{write_timings_csv, StageTimings};
use crate::error::{Error, Result};

/// Fold of every id: ids are sorted, shuffled with `seed` and dealt
/// round-robin, so the input order does not matter.
pub fn partition(ids: &[String], k: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k-fold needs k >= 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::InvalidParameter(format!("{} records cannot fill {k} folds", ids.len())));
    }
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    Ok(sorted.into_iter().enumerate().map(|(i, id)| (id.clone(), i % k)).collect())
}

/// Success criterion used for a manifest: the normalized error for
/// two-target tasks, the radius criterion otherwise.
pub fn criterion_for(manifest: &DatasetManifest, cfg: &PipelineConfig) -> Criterion {
    if manifest.num_targets() == 2 {
        Criterion::NormalizedError(cfg.normalized_error)
    } else {
        Criterion::Radius(cfg.radius_multiple)
    }
}

/// Load and run stages 1–4 on every record, in record order.
pub fn prepare_all(manifest: &DatasetManifest, cfg: &PipelineConfig, channel: Option<Channel>) -> Result<Vec<PreparedImage>> {
    let preparer = Preparer::new(cfg)?;
    manifest
        .records
        .par_iter()
        .map(|r| preparer.load(r, cfg, channel))
        .collect()
}

fn patch_rng(cfg: &PipelineConfig, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    rng
}

/// Train on every image of a manifest.
pub fn train_all(manifest: &DatasetManifest, cfg: &PipelineConfig, channel: Option<Channel>) -> Result<Vec<Model>> {
    cfg.validate()?;
    manifest.validate()?;
    let mut images = prepare_all(manifest, cfg, channel)?;
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let refs: Vec<&PreparedImage> = images.iter().collect();
    let regs = Regularizers::new(cfg)?;
    let (models, _) = train_models(&refs, cfg, &regs, &mut patch_rng(cfg, 0))?;
    Ok(models)
}

#[derive(Clone, Debug)]
pub struct FoldRun {
    pub fold: usize,
    pub test_ids: Vec<String>,
    /// Image ids of every training patch, for hygiene checks.
    pub training_ids: BTreeSet<String>,
    pub models: Vec<Model>,
}

#[derive(Clone, Debug)]
pub struct KfoldOutcome {
    pub report: EvaluationReport,
    /// Sorted by image id, then detector.
    pub detections: Vec<DetectionResult>,
    pub timings: Vec<(String, StageTimings)>,
    pub folds: BTreeMap<String, usize>,
    pub runs: Vec<FoldRun>,
}

impl KfoldOutcome {
    /// `(fold, target, template, reason)` for every template that failed.
    pub fn failures(&self) -> Vec<(usize, usize, String, String)> {
        let mut out = Vec::new();
        for run in &self.runs {
            for m in &run.models {
                for f in &m.failures {
                    out.push((run.fold, m.target, f.name.clone(), f.reason.clone()));
                }
            }
        }
        out
    }
}

pub fn run_kfold(manifest: &DatasetManifest, cfg: &PipelineConfig, channel: Option<Channel>) -> Result<KfoldOutcome> {
    cfg.validate()?;
    manifest.validate()?;
    let mut sorted = manifest.clone();
    sorted.records.sort_by(|a, b| a.id.cmp(&b.id));
    let ids: Vec<String> = sorted.records.iter().map(|r| r.id.clone()).collect();
    let folds = partition(&ids, cfg.folds, cfg.seed)?;
    let specs = detector_specs(cfg)?;
    let range = cfg.invariance()?;

    let t = Instant::now();
    let images = prepare_all(&sorted, cfg, channel)?;
    info!("prepared {} images in {:.1} s", images.len(), t.elapsed().as_secs_f64());
    let regs = Regularizers::new(cfg)?;

    type FoldOutput = (FoldRun, Vec<(DetectionResult, usize)>, Vec<(String, StageTimings)>);
    let runs: Vec<FoldOutput> = (0..cfg.folds)
        .into_par_iter()
        .map(|fold| -> Result<_> {
            let t = Instant::now();
            let train: Vec<&PreparedImage> = images.iter().filter(|i| folds[&i.id] != fold).collect();
            let test: Vec<&PreparedImage> = images.iter().filter(|i| folds[&i.id] == fold).collect();
            let (models, data) = train_models(&train, cfg, &regs, &mut patch_rng(cfg, fold as u64 + 1))?;
            info!("fold {fold}: trained on {} images in {:.1} s", train.len(), t.elapsed().as_secs_f64());
            let training_ids = data
                .iter()
                .flat_map(|d| d.records.iter().map(|r| r.image_id.clone()))
                .collect();
            let mut dets = Vec::new();
            let mut timings = Vec::new();
            for img in &test {
                let (d, matching, _) = match_image(img, &models, &specs, &range, false)?;
                let mut tm = img.timings;
                tm.matching = matching;
                tm.total += matching;
                timings.push((img.id.clone(), tm));
                dets.extend(d.into_iter().enumerate().map(|(i, d)| (d, i)));
            }
            Ok((
                FoldRun {
                    fold,
                    test_ids: test.iter().map(|i| i.id.clone()).collect(),
                    training_ids,
                    models,
                },
                dets,
                timings,
            ))
        })
        .collect::<Result<_>>()?;

    let mut detections: Vec<(DetectionResult, usize)> = Vec::new();
    let mut timings = Vec::new();
    let mut fold_runs = Vec::new();
    for (run, d, t) in runs {
        detections.extend(d);
        timings.extend(t);
        fold_runs.push(run);
    }
    detections.sort_by(|a, b| a.0.image_id.cmp(&b.0.image_id).then(a.1.cmp(&b.1)));
    let detections: Vec<DetectionResult> = detections.into_iter().map(|(d, _)| d).collect();
    timings.sort_by(|a, b| a.0.cmp(&b.0));

    let mut report = evaluate(&detections, &sorted, criterion_for(&sorted, cfg), Some(&folds))?;
    report.seed = Some(cfg.seed);
    Ok(KfoldOutcome {
        report,
        detections,
        timings,
        folds,
        runs: fold_runs,
    })
}

fn create(dir: &Path, name: &str) -> Result<fs::File> {
    Ok(fs::File::create(dir.join(name))?)
}

/// Write `report.txt`, `report.csv`, `outcomes.csv`, `detections.csv`,
/// `folds.csv`, `failures.csv`, `config.txt` and `timings.csv`. Everything
/// but the timings is a deterministic function of the inputs.
pub fn write_outputs(dir: &Path, out: &KfoldOutcome, cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let failures = out.failures();
    let mut table = out.report.to_table();
    if !failures.is_empty() {
        table.push_str(&format!("\n{} template trainings failed (see failures.csv)\n", failures.len()));
    }
    create(dir, "report.txt")?.write_all(table.as_bytes())?;
    out.report.write_csv(create(dir, "report.csv")?)?;
    out.report.write_outcomes_csv(create(dir, "outcomes.csv")?)?;
    write_detections_csv(create(dir, "detections.csv")?, &out.detections)?;
    write_timings_csv(create(dir, "timings.csv")?, &out.timings)?;

    let mut w = csv::Writer::from_writer(create(dir, "folds.csv")?);
    w.write_record(["image_id", "fold"])?;
    for (id, f) in &out.folds {
        w.write_record([id.as_str(), &f.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(dir, "failures.csv")?);
    w.write_record(["fold", "target", "template", "reason"])?;
    for (fold, target, name, reason) in &failures {
        w.write_record([fold.to_string(), target.to_string(), name.clone(), reason.clone()])?;
    }
    w.flush()?;

    create(dir, "config.txt")?.write_all(cfg.to_text().as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_ignores_input_order() {
        let ids: Vec<String> = (0..11).map(|i| format!("img{i:02}")).collect();
        let a = partition(&ids, 5, 3).unwrap();
        let mut rev = ids.clone();
        rev.reverse();
        assert_eq!(a, partition(&rev, 5, 3).unwrap());
        let mut sizes = [0; 5];
        for f in a.values() {
            sizes[*f] += 1;
        }
        assert!(sizes.iter().all(|s| *s == 2 || *s == 3), "{sizes:?}");
        assert!(partition(&ids, 1, 0).is_err());
        assert!(partition(&ids[..3], 5, 0).is_err());
    }
}
