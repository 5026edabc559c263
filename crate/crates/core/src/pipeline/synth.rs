//! Synthetic datasets with known ground truth.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::imageio::save_gray16;
use super::manifest::{DatasetManifest, ManifestRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Bright disk on black.
    Disk,
    /// Three vessel-like rays meeting at the target, with distractor lines.
    VesselCross,
    /// Dark blob on a shaded background with distractor lines.
    FoveaLike,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "disk" => Ok(Self::Disk),
            "vessel_cross" => Ok(Self::VesselCross),
            "fovea_like" => Ok(Self::FoveaLike),
            _ => Err(Error::InvalidParameter(format!(
                "unknown dataset kind '{s}' (expected disk, vessel_cross or fovea_like)"
            ))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Disk => "disk",
            Self::VesselCross => "vessel_cross",
            Self::FoveaLike => "fovea_like",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub kind: SynthKind,
    pub n: usize,
    pub size: (usize, usize),
    /// Object radius `R` written to the manifest.
    pub radius: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub contrast: f64,
    pub distractors: usize,
    /// Blank out the structure within `R/2` of the target.
    pub occlude: bool,
    /// Flip the contrast of each image with probability ½.
    pub random_polarity: bool,
    /// Rotations (degrees) applied to the target pattern, one drawn per
    /// image; empty for none.
    pub rotations: Vec<f64>,
    /// Add a second target (`x2, y2`) of the same kind.
    pub second_target: bool,
    pub seed: u64,
}

impl SynthParams {
    pub fn new(kind: SynthKind, n: usize) -> Self {
        let (noise, distractors, occlude, random_polarity) = match kind {
            SynthKind::Disk => (0.0, 0, false, false),
            SynthKind::VesselCross => (0.05, 4, true, true),
            SynthKind::FoveaLike => (0.05, 4, false, false),
        };
        Self {
            kind,
            n,
            size: (128, 128),
            radius: 10.0,
            noise,
            contrast: 0.3,
            distractors,
            occlude,
            random_polarity,
            rotations: Vec::new(),
            second_target: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub image: Array2<f64>,
    pub targets: Vec<(f64, f64)>,
    /// Rotation (degrees) applied to the pattern.
    pub rotation: f64,
}

/// Arm directions (radians) of the junction; deliberately asymmetric.
const ARMS: [f64; 3] = [0.0, 100.0 * PI / 180.0, 220.0 * PI / 180.0];
const ARM_LENGTH: f64 = 45.0;
const LINE_WIDTH: f64 = 1.5;

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

fn draw_segment(img: &mut Array2<f64>, a: (f64, f64), b: (f64, f64), amplitude: f64) {
    let reach = 4.0 * LINE_WIDTH;
    let (w, h) = img.dim();
    let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(w);
    let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(h);
    for x in x0..x1 {
        for y in y0..y1 {
            let d = segment_distance((x as f64, y as f64), a, b);
            if d < reach {
                img[[x, y]] += amplitude * (-0.5 * (d / LINE_WIDTH).powi(2)).exp();
            }
        }
    }
}

fn draw_blob(img: &mut Array2<f64>, c: (f64, f64), radius: f64, amplitude: f64, hard: bool) {
    for ((x, y), v) in img.indexed_iter_mut() {
        let r = (x as f64 - c.0).hypot(y as f64 - c.1);
        *v += if hard {
            if r <= radius {
                amplitude
            } else {
                0.0
            }
        } else {
            amplitude * (-0.5 * (r / radius).powi(2)).exp()
        };
    }
}

fn random_segment<R: Rng>(rng: &mut R, size: (usize, usize)) -> ((f64, f64), (f64, f64)) {
    let c = (rng.random_range(0.0..size.0 as f64), rng.random_range(0.0..size.1 as f64));
    let a = rng.random_range(0.0..PI);
    let half = rng.random_range(15.0..35.0);
    let (dx, dy) = (half * a.cos(), half * a.sin());
    ((c.0 - dx, c.1 - dy), (c.0 + dx, c.1 + dy))
}

fn render<R: Rng>(p: &SynthParams, rng: &mut R) -> Result<SynthImage> {
    let (w, h) = p.size;
    let margin = (2.0 * p.radius).min(0.25 * w.min(h) as f64);
    let draw_pos = |rng: &mut R| {
        (
            rng.random_range(margin..w as f64 - margin),
            rng.random_range(margin..h as f64 - margin),
        )
    };
    let mut targets = vec![draw_pos(rng)];
    if p.second_target {
        // Separated by at least 4R.
        loop {
            let q = draw_pos(rng);
            if (q.0 - targets[0].0).hypot(q.1 - targets[0].1) >= 4.0 * p.radius {
                targets.push(q);
                break;
            }
        }
    }
    let rotation = if p.rotations.is_empty() {
        0.0
    } else {
        p.rotations[rng.random_range(0..p.rotations.len())]
    };
    let alpha = rotation.to_radians();
    let mut img = Array2::<f64>::zeros((w, h));
    let background = match p.kind {
        SynthKind::Disk => 0.0,
        _ => 0.5,
    };
    match p.kind {
        SynthKind::Disk => {
            for &t in &targets {
                draw_blob(&mut img, t, p.radius, 1.0, true);
            }
        }
        SynthKind::VesselCross => {
            for _ in 0..p.distractors {
                let (a, b) = random_segment(rng, p.size);
                draw_segment(&mut img, a, b, p.contrast);
            }
            for &t in &targets {
                for arm in ARMS {
                    let d = (arm + alpha).sin_cos();
                    let end = (t.0 + ARM_LENGTH * d.1, t.1 + ARM_LENGTH * d.0);
                    draw_segment(&mut img, t, end, p.contrast);
                }
            }
            if p.occlude {
                for &t in &targets {
                    let r0 = 0.5 * p.radius;
                    for ((x, y), v) in img.indexed_iter_mut() {
                        let r = (x as f64 - t.0).hypot(y as f64 - t.1);
                        if r < r0 {
                            *v = 0.0;
                        } else if r < r0 + 2.0 {
                            *v *= (r - r0) / 2.0;
                        }
                    }
                }
            }
        }
        SynthKind::FoveaLike => {
            for _ in 0..p.distractors {
                let (a, b) = random_segment(rng, p.size);
                draw_segment(&mut img, a, b, p.contrast);
            }
            for &t in &targets {
                draw_blob(&mut img, t, p.radius / 2.0, -p.contrast, false);
            }
            // Slow illumination gradient.
            let g = rng.random_range(0.0..2.0 * PI);
            let (gs, gc) = g.sin_cos();
            for ((x, y), v) in img.indexed_iter_mut() {
                *v += 0.15 * ((x as f64 * gc + y as f64 * gs) / w.max(h) as f64);
            }
        }
    }
    if p.random_polarity && rng.random_bool(0.5) {
        img.mapv_inplace(|v| -v);
    }
    if p.noise > 0.0 {
        let normal = Normal::new(0.0, p.noise).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        img.mapv_inplace(|v| v + normal.sample(rng));
    }
    img.mapv_inplace(|v| (v + background).clamp(0.0, 1.0));
    Ok(SynthImage { image: img, targets, rotation })
}

pub fn generate(p: &SynthParams) -> Result<Vec<SynthImage>> {
    if p.n == 0 || p.size.0 < 8 || p.size.1 < 8 || !(p.radius > 0.0) {
        return Err(Error::InvalidParameter("synthetic dataset needs n > 0, size >= 8 and R > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    (0..p.n).map(|_| render(p, &mut rng)).collect()
}

/// Write `img_NNN.png` files and `manifest.csv` into `dir`.
pub fn write_dataset(dir: &Path, p: &SynthParams) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let images = generate(p)?;
    let mut records = Vec::new();
    for (i, s) in images.iter().enumerate() {
        let id = format!("img_{i:03}.png");
        let path = dir.join(&id);
        save_gray16(&path, &s.image)?;
        records.push(ManifestRecord {
            id,
            path,
            x: s.targets[0].0,
            y: s.targets[0].1,
            radius: p.radius,
            second: s.targets.get(1).copied(),
            roi: None,
            um_per_pixel: None,
        });
    }
    let manifest = DatasetManifest { records };
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_inside_bounds() {
        for kind in [SynthKind::Disk, SynthKind::VesselCross, SynthKind::FoveaLike] {
            let mut p = SynthParams::new(kind, 20);
            p.second_target = kind == SynthKind::FoveaLike;
            for s in generate(&p).unwrap() {
                for (x, y) in &s.targets {
                    assert!(*x >= 0.0 && *y >= 0.0 && *x < 128.0 && *y < 128.0);
                }
                assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn seeded() {
        let p = SynthParams::new(SynthKind::VesselCross, 3);
        let (a, b) = (generate(&p).unwrap(), generate(&p).unwrap());
        assert!(a.iter().zip(&b).all(|(a, b)| a.image == b.image && a.targets == b.targets));
    }

    #[test]
    fn occluded_centre_is_background() {
        let mut p = SynthParams::new(SynthKind::VesselCross, 1);
        p.noise = 0.0;
        p.distractors = 0;
        p.random_polarity = false;
        let s = &generate(&p).unwrap()[0];
        let (x, y) = s.targets[0];
        assert_eq!(s.image[[x.round() as usize, y.round() as usize]], 0.5);
    }

    #[test]
    fn kind_names() {
        assert_eq!("vessel-cross".parse::<SynthKind>().unwrap(), SynthKind::VesselCross);
        assert!("blob".parse::<SynthKind>().is_err());
    }
}
