//! Grayscale image input and 16-bit PNG output. Arrays are indexed `[x, y]`
//! with `x` the column.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::matching::RoiMask;

/// Colour channel used for RGB inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r" | "red" => Ok(Self::R),
            "g" | "green" => Ok(Self::G),
            "b" | "blue" => Ok(Self::B),
            _ => Err(Error::InvalidParameter(format!("unknown channel '{s}' (expected r, g or b)"))),
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::R => "r",
            Self::G => "g",
            Self::B => "b",
        })
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn from_fn(w: u32, h: u32, f: impl Fn(u32, u32) -> f64) -> Array2<f64> {
    Array2::from_shape_fn((w as usize, h as usize), |(x, y)| f(x as u32, y as u32))
}

/// Load an 8- or 16-bit image as values in `[0, 1]`. Colour images need a
/// channel; an alpha channel is ignored.
pub fn load_gray(path: &Path, channel: Option<Channel>) -> Result<Array2<f64>> {
    let img = open(path)?;
    let (w, h) = (img.width(), img.height());
    let colour = |what: &str| {
        Error::InvalidParameter(format!(
            "{}: {what} image needs a channel selection (r, g or b)",
            path.display()
        ))
    };
    Ok(match img {
        DynamicImage::ImageLuma8(b) => from_fn(w, h, |x, y| b.get_pixel(x, y)[0] as f64 / 255.0),
        DynamicImage::ImageLumaA8(b) => from_fn(w, h, |x, y| b.get_pixel(x, y)[0] as f64 / 255.0),
        DynamicImage::ImageLuma16(b) => from_fn(w, h, |x, y| b.get_pixel(x, y)[0] as f64 / 65535.0),
        DynamicImage::ImageLumaA16(b) => from_fn(w, h, |x, y| b.get_pixel(x, y)[0] as f64 / 65535.0),
        DynamicImage::ImageRgb8(b) => {
            let c = channel.ok_or_else(|| colour("RGB"))?.index();
            from_fn(w, h, |x, y| b.get_pixel(x, y)[c] as f64 / 255.0)
        }
        DynamicImage::ImageRgba8(b) => {
            let c = channel.ok_or_else(|| colour("RGBA"))?.index();
            from_fn(w, h, |x, y| b.get_pixel(x, y)[c] as f64 / 255.0)
        }
        DynamicImage::ImageRgb16(b) => {
            let c = channel.ok_or_else(|| colour("RGB"))?.index();
            from_fn(w, h, |x, y| b.get_pixel(x, y)[c] as f64 / 65535.0)
        }
        DynamicImage::ImageRgba16(b) => {
            let c = channel.ok_or_else(|| colour("RGBA"))?.index();
            from_fn(w, h, |x, y| b.get_pixel(x, y)[c] as f64 / 65535.0)
        }
        other => {
            let c = channel.map_or(0, Channel::index);
            let b = other.to_rgb32f();
            from_fn(w, h, |x, y| b.get_pixel(x, y)[c] as f64)
        }
    })
}

/// Nonzero pixels of the first channel are inside the mask.
pub fn load_mask(path: &Path) -> Result<RoiMask> {
    let img = open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(RoiMask {
        mask: Array2::from_shape_fn((w as usize, h as usize), |(x, y)| img.get_pixel(x as u32, y as u32)[0] > 0),
    })
}

/// Write values in `[0, 1]` (clamped) as a 16-bit grayscale PNG.
pub fn save_gray16(path: &Path, a: &Array2<f64>) -> Result<()> {
    let (w, h) = a.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(a[[x as usize, y as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Min–max scaled 16-bit heatmap; non-finite values map to zero.
pub fn save_heatmap(path: &Path, a: &Array2<f64>) -> Result<()> {
    let finite = a.iter().cloned().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let scaled = a.mapv(|v| if v.is_finite() { (v - lo) / span } else { 0.0 });
    save_gray16(path, &scaled)
}

pub fn save_mask(path: &Path, m: &RoiMask) -> Result<()> {
    save_gray16(path, &m.mask.mapv(|b| if b { 1.0 } else { 0.0 }))
}
