//! Template training per target and detection (stage 5).

use std::collections::BTreeMap;
use std::time::Instant;

use log::warn;
use ndarray::Array2;
use rand::Rng;

use super::config::PipelineConfig;
use super::patches::{build_training_sets, PreparedImage, TrainingData};
use crate::bspline::{Domain, Loss, SplineTemplate};
use crate::error::{Error, Result};
use crate::matching::{combine_potentials, detect, invariant_potential, potential_r2, potential_se2, InvarianceRange, Mode, PotentialMap};
use crate::regression::{train_templates, TemplateType, TrainedTemplate};
use crate::regularizers::{build_regularizer, RegularizerMatrix};

/// `A_r2`, `C_lin_se2`, …
pub fn template_name(kind: TemplateType, loss: Loss, domain: Domain) -> String {
    let d = domain.to_string().to_ascii_lowercase();
    if kind == TemplateType::A {
        format!("A_{d}")
    } else {
        let l = match loss {
            Loss::Logistic => "log",
            _ => "lin",
        };
        format!("{kind}_{l}_{d}")
    }
}

/// One template to train.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedTemplate {
    pub name: String,
    pub kind: TemplateType,
    pub loss: Loss,
    pub domain: Domain,
}

/// All templates of a configuration in canonical order: ℝ² before SE(2),
/// types A–E, linear before logistic.
pub fn planned_templates(cfg: &PipelineConfig) -> Vec<PlannedTemplate> {
    let mut kinds = cfg.templates.clone();
    kinds.sort();
    kinds.dedup();
    let mut losses = cfg.losses.clone();
    losses.sort_by_key(|l| l.tag());
    losses.dedup();
    let mut out = Vec::new();
    for domain in [Domain::R2, Domain::Se2] {
        if !cfg.domains.contains(&domain) {
            continue;
        }
        for &kind in &kinds {
            let ls = if kind == TemplateType::A { vec![Loss::Average] } else { losses.clone() };
            for loss in ls {
                out.push(PlannedTemplate {
                    name: template_name(kind, loss, domain),
                    kind,
                    loss,
                    domain,
                });
            }
        }
    }
    out
}

/// A detector is a single template or a sum of template potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorSpec {
    pub name: String,
    pub parts: Vec<String>,
}

pub fn detector_specs(cfg: &PipelineConfig) -> Result<Vec<DetectorSpec>> {
    let planned = planned_templates(cfg);
    let mut out: Vec<DetectorSpec> = planned
        .iter()
        .map(|p| DetectorSpec {
            name: p.name.clone(),
            parts: vec![p.name.clone()],
        })
        .collect();
    for combo in &cfg.combinations {
        let parts: Vec<String> = combo.split('+').map(|s| s.trim().to_string()).collect();
        if let Some(bad) = parts.iter().find(|p| !planned.iter().any(|t| &t.name == *p)) {
            return Err(Error::Config(format!("combination '{combo}' uses unknown template '{bad}'")));
        }
        out.push(DetectorSpec {
            name: parts.join("+"),
            parts,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct NamedTemplate {
    pub name: String,
    pub trained: TrainedTemplate,
}

impl NamedTemplate {
    pub fn template(&self) -> &SplineTemplate {
        &self.trained.template
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingFailure {
    pub name: String,
    pub reason: String,
}

/// Templates for one target.
#[derive(Clone, Debug, Default)]
pub struct Model {
    pub target: usize,
    pub templates: Vec<NamedTemplate>,
    pub failures: Vec<TrainingFailure>,
}

impl Model {
    pub fn get(&self, name: &str) -> Option<&NamedTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }
}

/// Regularizers for both domains, built once per run.
#[derive(Clone, Debug)]
pub struct Regularizers {
    pub r2: Option<RegularizerMatrix>,
    pub se2: Option<RegularizerMatrix>,
}

impl Regularizers {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let build = |d: Domain| -> Result<Option<RegularizerMatrix>> {
            if cfg.domains.contains(&d) {
                Ok(Some(build_regularizer(&cfg.grid(d)?, cfg.diffusion)?))
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            r2: build(Domain::R2)?,
            se2: build(Domain::Se2)?,
        })
    }

    pub fn get(&self, d: Domain) -> Option<&RegularizerMatrix> {
        match d {
            Domain::R2 => self.r2.as_ref(),
            Domain::Se2 => self.se2.as_ref(),
        }
    }
}

/// Train every planned template on one training set. Failures are kept
/// instead of aborting.
pub fn train_model(data: &TrainingData, target: usize, cfg: &PipelineConfig, regs: &Regularizers) -> Result<Model> {
    let opts = cfg.train_options();
    let planned = planned_templates(cfg);
    let mut model = Model {
        target,
        ..Default::default()
    };
    for domain in [Domain::R2, Domain::Se2] {
        let group: Vec<&PlannedTemplate> = planned.iter().filter(|p| p.domain == domain).collect();
        if group.is_empty() {
            continue;
        }
        let ts = data.set(domain).ok_or_else(|| Error::Degenerate(format!("no {domain} training set")))?;
        let grid = cfg.grid(domain)?;
        let r = regs.get(domain).ok_or_else(|| Error::Degenerate(format!("no {domain} regularizer")))?;
        let mut losses: Vec<Loss> = Vec::new();
        for p in &group {
            if !losses.contains(&p.loss) {
                losses.push(p.loss);
            }
        }
        for loss in losses {
            let kinds: Vec<TemplateType> = group.iter().filter(|p| p.loss == loss).map(|p| p.kind).collect();
            let results = train_templates(&kinds, if loss == Loss::Average { Loss::Linear } else { loss }, ts, &grid, r, &opts);
            for (kind, res) in kinds.iter().zip(results) {
                let name = template_name(*kind, loss, domain);
                match res {
                    Ok(trained) => model.templates.push(NamedTemplate { name, trained }),
                    Err(e) => {
                        warn!("template {name} failed to train: {e}");
                        model.failures.push(TrainingFailure {
                            name,
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    Ok(model)
}

/// Sample patches and train one model per target.
pub fn train_models<R: Rng>(
    images: &[&PreparedImage],
    cfg: &PipelineConfig,
    regs: &Regularizers,
    rng: &mut R,
) -> Result<(Vec<Model>, Vec<TrainingData>)> {
    let n_targets = images.first().map_or(1, |i| i.targets.len());
    let mut models = Vec::new();
    let mut data = Vec::new();
    for target in 0..n_targets {
        let d = build_training_sets(images, target, cfg, rng)?;
        models.push(train_model(&d, target, cfg, regs)?);
        data.push(d);
    }
    Ok((models, data))
}

pub fn mode_for(loss: Loss) -> Mode {
    match loss {
        Loss::Logistic => Mode::Log,
        _ => Mode::Lin,
    }
}

/// Potential of one template on a prepared image.
pub fn template_potential(t: &SplineTemplate, img: &PreparedImage, range: &InvarianceRange) -> Result<PotentialMap> {
    let mode = mode_for(t.loss);
    let identity = range.scales == [1.0] && range.rotations == [0.0];
    match t.domain() {
        Domain::R2 => {
            let f = img.processed.image.view();
            if identity {
                potential_r2(t, &f, mode)
            } else {
                invariant_potential(t, &f.into_dyn(), mode, range)
            }
        }
        Domain::Se2 => {
            let u = img
                .lifted
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter(format!("{}: SE2 template needs a lifted image", img.id)))?
                .view();
            if identity {
                potential_se2(t, &u, mode)
            } else {
                invariant_potential(t, &u.into_dyn(), mode, range)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetHit {
    /// Original-image coordinates.
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub image_id: String,
    pub detector: String,
    /// One entry per target; `None` when a template of the detector failed
    /// to train.
    pub targets: Vec<Option<TargetHit>>,
}

/// Potential maps keyed by `(target, detector)`.
pub type MapsByDetector = BTreeMap<(usize, String), Array2<f64>>;

/// Run every detector on one image. Returns detections in detector order
/// and, when requested, the potential maps by `(target, detector)`.
pub fn match_image(
    img: &PreparedImage,
    models: &[Model],
    specs: &[DetectorSpec],
    range: &InvarianceRange,
    keep_maps: bool,
) -> Result<(Vec<DetectionResult>, f64, MapsByDetector)> {
    let t0 = Instant::now();
    let mut per_target: Vec<BTreeMap<String, PotentialMap>> = Vec::new();
    for model in models {
        let mut maps = BTreeMap::new();
        for nt in &model.templates {
            if specs.iter().any(|s| s.parts.contains(&nt.name)) {
                maps.insert(nt.name.clone(), template_potential(nt.template(), img, range)?);
            }
        }
        per_target.push(maps);
    }
    let mut out = Vec::new();
    let mut kept = BTreeMap::new();
    for spec in specs {
        let mut targets = Vec::new();
        for (t, maps) in per_target.iter().enumerate() {
            let parts: Option<Vec<PotentialMap>> = spec.parts.iter().map(|p| maps.get(p).cloned()).collect();
            let hit = match parts {
                None => None,
                Some(parts) => {
                    let p = if parts.len() == 1 {
                        parts.into_iter().next().expect("one part")
                    } else {
                        combine_potentials(&parts)?
                    };
                    let d = detect(&p, img.processed.roi.as_ref())?;
                    if keep_maps {
                        kept.insert((t, spec.name.clone()), p.values);
                    }
                    let (x, y) = img.processed.geometry.to_original(d.x as f64, d.y as f64);
                    Some(TargetHit { x, y, value: d.value })
                }
            };
            targets.push(hit);
        }
        out.push(DetectionResult {
            image_id: img.id.clone(),
            detector: spec.name.clone(),
            targets,
        });
    }
    Ok((out, t0.elapsed().as_secs_f64() * 1e3, kept))
}

/// `image_id,detector,target,x,y,value`; failed detectors leave x, y and
/// value empty.
pub fn write_detections_csv<W: std::io::Write>(w: W, dets: &[DetectionResult]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["image_id", "detector", "target", "x", "y", "value"])?;
    for d in dets {
        for (t, hit) in d.targets.iter().enumerate() {
            let (x, y, v) = match hit {
                Some(h) => (format!("{:.3}", h.x), format!("{:.3}", h.y), format!("{:.9e}", h.value)),
                None => Default::default(),
            };
            wtr.write_record([d.image_id.as_str(), d.detector.as_str(), &t.to_string(), &x, &y, &v])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_detections_csv<R: std::io::Read>(r: R) -> Result<Vec<DetectionResult>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out: Vec<DetectionResult> = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let (id, det) = (get(0), get(1));
        let t: usize = get(2)
            .parse()
            .map_err(|_| Error::Config(format!("detections: bad target index '{}'", get(2))))?;
        let num = |i: usize| -> Result<Option<f64>> {
            let s = get(i);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| Error::Config(format!("detections: bad number '{s}'")))
        };
        let hit = match (num(3)?, num(4)?, num(5)?) {
            (Some(x), Some(y), v) => Some(TargetHit {
                x,
                y,
                value: v.unwrap_or(f64::NAN),
            }),
            _ => None,
        };
        let idx = match out.iter().position(|d| d.image_id == id && d.detector == det) {
            Some(i) => i,
            None => {
                out.push(DetectionResult {
                    image_id: id,
                    detector: det,
                    targets: Vec::new(),
                });
                out.len() - 1
            }
        };
        let targets = &mut out[idx].targets;
        if targets.len() <= t {
            targets.resize(t + 1, None);
        }
        targets[t] = hit;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_order() {
        let cfg = PipelineConfig { templates: vec![TemplateType::C, TemplateType::A], ..Default::default() };
        let names: Vec<String> = planned_templates(&cfg).into_iter().map(|p| p.name).collect();
        assert_eq!(names, ["A_r2", "C_lin_r2", "C_log_r2", "A_se2", "C_lin_se2", "C_log_se2"]);
    }

    #[test]
    fn combinations_must_name_planned_templates() {
        let mut cfg = PipelineConfig { combinations: vec!["A_r2+C_log_se2".into()], ..Default::default() };
        let specs = detector_specs(&cfg).unwrap();
        assert_eq!(specs.last().unwrap().parts, ["A_r2", "C_log_se2"]);
        cfg.combinations = vec!["A_r2+Z_se2".into()];
        assert!(detector_specs(&cfg).is_err());
    }

    #[test]
    fn detections_csv_round_trip() {
        let dets = vec![
            DetectionResult {
                image_id: "a.png".into(),
                detector: "A_r2".into(),
                targets: vec![Some(TargetHit { x: 1.5, y: 2.0, value: 0.25 })],
            },
            DetectionResult {
                image_id: "a.png".into(),
                detector: "B_lin_r2".into(),
                targets: vec![None],
            },
        ];
        let mut buf = Vec::new();
        write_detections_csv(&mut buf, &dets).unwrap();
        let back = read_detections_csv(buf.as_slice()).unwrap();
        assert_eq!(back, dets);
    }
}
