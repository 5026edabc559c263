//! Rescaling, local normalization and soft binarization.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::matching::{local_normalize, RoiMask, Window};

/// Map between original and working pixel coordinates:
/// `working = (orig + ½)·scale − ½ − offset` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub scale: (f64, f64),
    pub offset: (usize, usize),
}

impl Geometry {
    pub const IDENTITY: Geometry = Geometry {
        scale: (1.0, 1.0),
        offset: (0, 0),
    };

    pub fn to_working(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x + 0.5) * self.scale.0 - 0.5 - self.offset.0 as f64,
            (y + 0.5) * self.scale.1 - 0.5 - self.offset.1 as f64,
        )
    }

    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x + self.offset.0 as f64 + 0.5) / self.scale.0 - 0.5,
            (y + self.offset.1 as f64 + 0.5) / self.scale.1 - 0.5,
        )
    }

    /// Lengths scale with the mean of the two axis factors.
    pub fn length_to_working(&self, r: f64) -> f64 {
        r * 0.5 * (self.scale.0 + self.scale.1)
    }
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub image: Array2<f64>,
    pub roi: Option<RoiMask>,
    pub geometry: Geometry,
}

/// Resample by `factor` with a triangle filter (`factor == 1` is a copy).
pub fn rescale(f: &ArrayView2<f64>, factor: f64) -> Result<(Array2<f64>, (f64, f64))> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidParameter(format!("rescale factor must be positive, got {factor}")));
    }
    let (w, h) = f.dim();
    if factor == 1.0 {
        return Ok((f.to_owned(), (1.0, 1.0)));
    }
    let (nw, nh) = (
        ((w as f64 * factor).round() as u32).max(1),
        ((h as f64 * factor).round() as u32).max(1),
    );
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([f[[x as usize, y as usize]] as f32]));
    let out = imageops::resize(&buf, nw, nh, FilterType::Triangle);
    let a = Array2::from_shape_fn((nw as usize, nh as usize), |(x, y)| out.get_pixel(x as u32, y as u32)[0] as f64);
    Ok((a, (nw as f64 / w as f64, nh as f64 / h as f64)))
}

fn rescale_mask(m: &RoiMask, size: (usize, usize)) -> RoiMask {
    let (w, h) = m.mask.dim();
    if (w, h) == size {
        return m.clone();
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([m.mask[[x as usize, y as usize]] as u8 * 255]));
    let out = imageops::resize(&buf, size.0 as u32, size.1 as u32, FilterType::Nearest);
    RoiMask {
        mask: Array2::from_shape_fn(size, |(x, y)| out.get_pixel(x as u32, y as u32)[0] > 127),
    }
}

/// Bounding box of pixels above `1e-3·max|f|`: `(x0, y0, x1, y1)`, exclusive.
pub fn content_bounds(f: &ArrayView2<f64>) -> Option<(usize, usize, usize, usize)> {
    let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return None;
    }
    let tol = 1e-3 * peak;
    let (w, h) = f.dim();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for ((x, y), v) in f.indexed_iter() {
        if v.abs() > tol {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    Some((x0, y0, x1, y1))
}

/// Stage 1: rescale and optionally crop zero borders.
pub fn rescale_stage(f: &ArrayView2<f64>, roi: Option<&RoiMask>, factor: f64, crop: bool) -> Result<Preprocessed> {
    if let Some(r) = roi {
        if r.mask.dim() != f.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![f.dim().0, f.dim().1],
                actual: vec![r.mask.dim().0, r.mask.dim().1],
            });
        }
    }
    let (image, scale) = rescale(f, factor)?;
    let mut roi = roi.map(|r| rescale_mask(r, image.dim()));
    let mut out = Preprocessed {
        image,
        roi: None,
        geometry: Geometry { scale, offset: (0, 0) },
    };
    if crop {
        if let Some((x0, y0, x1, y1)) = content_bounds(&out.image.view()) {
            out.image = out.image.slice(s![x0..x1, y0..y1]).to_owned();
            roi = roi.map(|r| RoiMask {
                mask: r.mask.slice(s![x0..x1, y0..y1]).to_owned(),
            });
            out.geometry.offset = (x0, y0);
        }
    }
    out.roi = roi;
    Ok(out)
}

/// `erf(gain·f)`.
pub fn soft_binarize(f: &Array2<f64>, gain: f64) -> Array2<f64> {
    f.mapv(|v| libm::erf(gain * v))
}

/// Stage 2: local normalization, then soft binarization.
pub fn r2_stage(p: &mut Preprocessed, window: &Window, gain: f64) -> Result<()> {
    let normalized = local_normalize(&p.image.view(), window, p.roi.as_ref())?;
    p.image = soft_binarize(&normalized, gain);
    Ok(())
}

/// Both stages.
pub fn preprocess(
    f: &ArrayView2<f64>,
    roi: Option<&RoiMask>,
    factor: f64,
    crop: bool,
    window: &Window,
    gain: f64,
) -> Result<Preprocessed> {
    let mut p = rescale_stage(f, roi, factor, crop)?;
    r2_stage(&mut p, window, gain)?;
    Ok(p)
}
