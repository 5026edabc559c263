//! Per-image preparation (stages 1–4) and training-patch extraction.

use std::time::Instant;

use log::warn;
use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3};
use rand::Rng;

use super::config::PipelineConfig;
use super::imageio::{load_gray, load_mask, Channel};
use super::manifest::ManifestRecord;
use super::preprocess::{r2_stage, rescale_stage, Preprocessed};
use super::timing::StageTimings;
use crate::bspline::Domain;
use crate::error::Result;
use crate::lifting::{duplicate_to_full_circle, modulus_score, orientation_score_transform, CakeWaveletBank};
use crate::matching::Window;
use crate::regression::{PatchRecord, TrainingSet};

/// A processed image with its ground truth in working coordinates.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub id: String,
    pub processed: Preprocessed,
    /// Modulus score on `2·N_θ` layers over `[0, 2π)`.
    pub lifted: Option<Array3<f64>>,
    pub targets: Vec<(f64, f64)>,
    pub radius: f64,
    pub timings: StageTimings,
}

impl PreparedImage {
    pub fn dim(&self) -> (usize, usize) {
        self.processed.image.dim()
    }
}

/// Rescale factor of a record: resolution ratio when both the record and
/// the config specify one, else the configured factor.
pub fn scale_factor(record: &ManifestRecord, cfg: &PipelineConfig) -> f64 {
    match (record.um_per_pixel, cfg.working_resolution) {
        (Some(res), Some(target)) => res / target,
        _ => cfg.scale,
    }
}

/// Shared, immutable per-run resources.
#[derive(Clone, Debug)]
pub struct Preparer {
    pub window: Window,
    pub bank: Option<CakeWaveletBank>,
}

impl Preparer {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let bank = if cfg.needs_lifting() {
            Some(CakeWaveletBank::new(cfg.wavelet_size, cfg.n_theta, cfg.cake)?)
        } else {
            None
        };
        Ok(Self {
            window: cfg.normalize_window()?,
            bank,
        })
    }

    /// Load a manifest record and run stages 1–4.
    pub fn load(&self, record: &ManifestRecord, cfg: &PipelineConfig, channel: Option<Channel>) -> Result<PreparedImage> {
        let f = load_gray(&record.path, channel)?;
        let roi = record.roi.as_deref().map(load_mask).transpose()?;
        self.prepare(&record.id, &f.view(), roi.as_ref(), record, cfg)
    }

    pub fn prepare(
        &self,
        id: &str,
        f: &ArrayView2<f64>,
        roi: Option<&crate::matching::RoiMask>,
        record: &ManifestRecord,
        cfg: &PipelineConfig,
    ) -> Result<PreparedImage> {
        let mut timings = StageTimings::default();
        let start = Instant::now();
        let t = Instant::now();
        let mut processed = rescale_stage(f, roi, scale_factor(record, cfg), cfg.crop_zero_borders)?;
        timings.rescale = t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        r2_stage(&mut processed, &self.window, cfg.erf_gain)?;
        timings.r2 = t.elapsed().as_secs_f64() * 1e3;

        let lifted = match &self.bank {
            Some(bank) => {
                let t = Instant::now();
                let score = orientation_score_transform(&processed.image.view(), bank)?;
                timings.transform = t.elapsed().as_secs_f64() * 1e3;
                let t = Instant::now();
                let lifted = duplicate_to_full_circle(&modulus_score(&score));
                timings.se2 = t.elapsed().as_secs_f64() * 1e3;
                Some(lifted)
            }
            None => None,
        };
        timings.total = start.elapsed().as_secs_f64() * 1e3;
        let g = processed.geometry;
        Ok(PreparedImage {
            id: id.to_string(),
            targets: record.targets().iter().map(|&(x, y)| g.to_working(x, y)).collect(),
            radius: g.length_to_working(record.radius),
            processed,
            lifted,
            timings,
        })
    }
}

/// Patch of `size` whose index `size/2` sits on `center`; zeros outside
/// the image.
pub fn cut_patch(f: &ArrayView2<f64>, center: (usize, usize), size: (usize, usize)) -> Array2<f64> {
    let (w, h) = f.dim();
    let (ox, oy) = (center.0 as i64 - (size.0 / 2) as i64, center.1 as i64 - (size.1 / 2) as i64);
    Array2::from_shape_fn(size, |(i, j)| {
        let (x, y) = (ox + i as i64, oy + j as i64);
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            f[[x as usize, y as usize]]
        }
    })
}

pub fn cut_patch3(u: &ArrayView3<f64>, center: (usize, usize), size: (usize, usize)) -> Array3<f64> {
    let (w, h, nt) = u.dim();
    let (ox, oy) = (center.0 as i64 - (size.0 / 2) as i64, center.1 as i64 - (size.1 / 2) as i64);
    Array3::from_shape_fn((size.0, size.1, nt), |(i, j, t)| {
        let (x, y) = (ox + i as i64, oy + j as i64);
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            u[[x as usize, y as usize, t]]
        }
    })
}

const MAX_NEGATIVE_DRAWS: usize = 10_000;

/// One positive at the target and one uniformly drawn negative farther
/// than the object radius from it, per image. Images smaller than the
/// patch are skipped.
pub fn sample_locations<R: Rng>(
    images: &[&PreparedImage],
    target: usize,
    patch: (usize, usize),
    rng: &mut R,
) -> (Vec<(usize, PatchRecord)>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, img) in images.iter().enumerate() {
        let (w, h) = img.dim();
        if w < patch.0 || h < patch.1 {
            skipped += 1;
            continue;
        }
        let (tx, ty) = img.targets[target];
        let pos = (
            tx.round().clamp(0.0, (w - 1) as f64) as usize,
            ty.round().clamp(0.0, (h - 1) as f64) as usize,
        );
        let mut neg = None;
        for _ in 0..MAX_NEGATIVE_DRAWS {
            let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
            if (x as f64 - tx).hypot(y as f64 - ty) > img.radius {
                neg = Some((x, y));
                break;
            }
        }
        let Some(neg) = neg else {
            skipped += 1;
            continue;
        };
        for (center, positive) in [(pos, true), (neg, false)] {
            out.push((
                i,
                PatchRecord {
                    image_id: img.id.clone(),
                    center,
                    positive,
                },
            ));
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} images too small for {}x{} patches", patch.0, patch.1);
    }
    (out, skipped)
}

/// Training sets for each requested domain, sampled at the same locations.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub r2: Option<TrainingSet>,
    pub se2: Option<TrainingSet>,
    pub records: Vec<PatchRecord>,
    pub skipped: usize,
}

impl TrainingData {
    pub fn set(&self, domain: Domain) -> Option<&TrainingSet> {
        match domain {
            Domain::R2 => self.r2.as_ref(),
            Domain::Se2 => self.se2.as_ref(),
        }
    }
}

pub fn build_training_sets<R: Rng>(
    images: &[&PreparedImage],
    target: usize,
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<TrainingData> {
    let patch = (cfg.patch_x, cfg.patch_y);
    let (locs, skipped) = sample_locations(images, target, patch, rng);
    let records: Vec<PatchRecord> = locs.iter().map(|(_, r)| r.clone()).collect();
    let mut data = TrainingData {
        r2: None,
        se2: None,
        records: records.clone(),
        skipped,
    };
    for &domain in &cfg.domains {
        let grid = cfg.grid(domain)?;
        let patches: Vec<ArrayD<f64>> = locs
            .iter()
            .map(|(i, r)| match domain {
                Domain::R2 => cut_patch(&images[*i].processed.image.view(), r.center, patch).into_dyn(),
                Domain::Se2 => {
                    let u = images[*i].lifted.as_ref().expect("lifted when SE(2) is requested");
                    cut_patch3(&u.view(), r.center, patch).into_dyn()
                }
            })
            .collect();
        let ts = TrainingSet::new(&grid, patches, records.clone())?;
        match domain {
            Domain::R2 => data.r2 = Some(ts),
            Domain::Se2 => data.se2 = Some(ts),
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_is_centred() {
        let f = Array2::from_shape_fn((9, 7), |(x, y)| (10 * x + y) as f64);
        let p = cut_patch(&f.view(), (4, 3), (3, 3));
        assert_eq!(p[[1, 1]], 43.0);
        assert_eq!(p[[0, 0]], 32.0);
        let edge = cut_patch(&f.view(), (0, 0), (3, 3));
        assert_eq!(edge[[0, 0]], 0.0);
        assert_eq!(edge[[1, 1]], 0.0 + 0.0);
        assert_eq!(edge[[2, 2]], 11.0);
    }
}
