//! Orientation scores via cake wavelets.
//!
//! Wavelets are built in the Fourier domain on the kernel grid: an angular
//! B-spline bump of width `s_θ = π/N_θ` centred on polar angle `θ_j + π/2`
//! (so `θ = 0` responds to horizontal lines) times a flat radial profile with
//! a raised-cosine taper to zero at Nyquist. The DC bin is zeroed, so every
//! kernel has zero mean. `N_θ` orientations cover `[0, π)`; the other half of
//! the circle follows from `U_{j+N_θ} = conj(U_j)` for real images.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::bspline::bspline_periodic;
use crate::error::{Error, Result};
use crate::fft::Correlator;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CakeParams {
    /// Order of the angular B-spline profile.
    pub angular_order: usize,
    /// Radius, as a fraction of Nyquist, where the radial taper begins.
    pub taper_start: f64,
}

impl Default for CakeParams {
    fn default() -> Self {
        Self {
            angular_order: 3,
            taper_start: 0.8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CakeWaveletBank {
    pub size: usize,
    pub n_theta: usize,
    pub params: CakeParams,
    /// Spatial kernels, centred, one per orientation in `[0, π)`.
    pub kernels: Vec<Array2<Complex64>>,
}

impl CakeWaveletBank {
    pub fn new(size: usize, n_theta: usize, params: CakeParams) -> Result<Self> {
        build_cake_wavelets(size, n_theta, params)
    }

    pub fn s_theta(&self) -> f64 {
        PI / self.n_theta as f64
    }

    pub fn orientation(&self, j: usize) -> f64 {
        j as f64 * self.s_theta()
    }

    /// Analytic Fourier transform of wavelet `j` (any of the `2N_θ`
    /// rotations) at angular frequency `(wx, wy)`, in radians per pixel.
    pub fn fourier(&self, j: usize, wx: f64, wy: f64) -> f64 {
        if wx == 0.0 && wy == 0.0 {
            return 0.0;
        }
        let rho = wx.hypot(wy) / PI;
        radial(rho, self.params.taper_start) * self.angular(j, wy.atan2(wx))
    }

    fn angular(&self, j: usize, phi: f64) -> f64 {
        let s = self.s_theta();
        let u = (phi - j as f64 * s - FRAC_PI_2) / s;
        bspline_periodic(self.params.angular_order, u, 2 * self.n_theta)
    }

    /// `Σ_j ψ̂_j(ω)` over all `2N_θ` rotations.
    pub fn coverage(&self, wx: f64, wy: f64) -> f64 {
        (0..2 * self.n_theta).map(|j| self.fourier(j, wx, wy)).sum()
    }

    /// Kernel of orientation `j ∈ [0, 2N_θ)`; the upper half are conjugates.
    pub fn kernel_full(&self, j: usize) -> Array2<Complex64> {
        let n = self.n_theta;
        if j < n {
            self.kernels[j].clone()
        } else {
            self.kernels[j - n].mapv(|z| z.conj())
        }
    }
}

fn radial(rho: f64, start: f64) -> f64 {
    if rho <= start {
        1.0
    } else if rho >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (PI * (rho - start) / (1.0 - start)).cos())
    }
}

pub fn build_cake_wavelets(size: usize, n_theta: usize, params: CakeParams) -> Result<CakeWaveletBank> {
    if size.is_multiple_of(2) || size == 0 {
        return Err(Error::InvalidParameter(format!("kernel size must be odd, got {size}")));
    }
    if n_theta < 2 {
        return Err(Error::InvalidParameter(format!("need at least two orientations, got {n_theta}")));
    }
    if !(0.0..1.0).contains(&params.taper_start) {
        return Err(Error::InvalidParameter("taper start must lie in [0, 1)".into()));
    }
    let mut bank = CakeWaveletBank {
        size,
        n_theta,
        params,
        kernels: Vec::new(),
    };
    let c = (size / 2) as i64;
    let sf = size as f64;
    // E[p, u] = exp(2πi·u·p / S) / S with both indices centred.
    let e = Array2::from_shape_fn((size, size), |(p, u)| {
        let ang = TAU * ((u as i64 - c) * (p as i64 - c)) as f64 / sf;
        Complex64::from_polar(1.0 / sf, ang)
    });
    let kernels = (0..n_theta)
        .map(|j| {
            let spec = Array2::from_shape_fn((size, size), |(a, b)| {
                let wx = TAU * (a as i64 - c) as f64 / sf;
                let wy = TAU * (b as i64 - c) as f64 / sf;
                Complex64::new(bank.fourier(j, wx, wy), 0.0)
            });
            e.dot(&spec).dot(&e.t())
        })
        .collect();
    bank.kernels = kernels;
    Ok(bank)
}

/// Complex orientation score, indexed `[x, y, θ]` with `N_θ` layers on `[0, π)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientationScore {
    pub data: Array3<Complex64>,
}

impl OrientationScore {
    pub fn n_theta(&self) -> usize {
        self.data.dim().2
    }

    pub fn image_shape(&self) -> (usize, usize) {
        let (x, y, _) = self.data.dim();
        (x, y)
    }

    /// Raw dump: three little-endian u32 dimensions, then interleaved
    /// real/imaginary doubles in `[x, y, θ]` order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let (nx, ny, nt) = self.data.dim();
        for d in [nx, ny, nt] {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for z in self.data.iter() {
            w.write_f64::<LittleEndian>(z.re)?;
            w.write_f64::<LittleEndian>(z.im)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let nx = r.read_u32::<LittleEndian>()? as usize;
        let ny = r.read_u32::<LittleEndian>()? as usize;
        let nt = r.read_u32::<LittleEndian>()? as usize;
        let mut raw = vec![0.0; 2 * nx * ny * nt];
        r.read_f64_into::<LittleEndian>(&mut raw)?;
        let v: Vec<Complex64> = raw.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
        let data = Array3::from_shape_vec((nx, ny, nt), v).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// `U_f(x, θ_j) = Σ_p conj(ψ_j(p)) f(x + p)`, zero padding outside the image.
pub fn orientation_score_transform(f: &ArrayView2<f64>, bank: &CakeWaveletBank) -> Result<OrientationScore> {
    let (nx, ny) = f.dim();
    if nx < bank.size || ny < bank.size {
        return Err(Error::TooSmall {
            image: vec![nx, ny],
            kernel: vec![bank.size, bank.size],
        });
    }
    let corr = Correlator::new((nx, ny), (bank.size, bank.size));
    let fs = corr.image_spectrum(f);
    let layers: Vec<Array2<Complex64>> = bank
        .kernels
        .par_iter()
        .map(|k| corr.correlate(&fs, &corr.kernel_spectrum(&k.view(), |z: Complex64| z.conj())))
        .collect();
    let mut data = Array3::zeros((nx, ny, bank.n_theta));
    for (j, l) in layers.iter().enumerate() {
        data.index_axis_mut(Axis(2), j).assign(l);
    }
    Ok(OrientationScore { data })
}

pub fn modulus_score(u: &OrientationScore) -> Array3<f64> {
    u.data.mapv(|z| z.norm())
}

/// Repeat the `N_θ` modulus layers on `[0, π)` to `2N_θ` layers on `[0, 2π)`.
pub fn duplicate_to_full_circle(modulus: &Array3<f64>) -> Array3<f64> {
    let (nx, ny, nt) = modulus.dim();
    Array3::from_shape_fn((nx, ny, 2 * nt), |(x, y, t)| modulus[[x, y, t % nt]])
}

/// Modulus score on the full circle, ready for SE(2) templates.
pub fn lift(f: &ArrayView2<f64>, bank: &CakeWaveletBank) -> Result<Array3<f64>> {
    Ok(duplicate_to_full_circle(&modulus_score(&orientation_score_transform(f, bank)?)))
}

/// Approximate inverse: the adjoint over all `2N_θ` orientations divided by
/// the coverage `Σ_j |ψ̂_j|²`, evaluated on the padded transform grid.
pub fn reconstruct_image(u: &OrientationScore, bank: &CakeWaveletBank) -> Result<Array2<f64>> {
    if u.n_theta() != bank.n_theta {
        return Err(Error::GridMismatch {
            template: bank.n_theta,
            score: u.n_theta(),
        });
    }
    let (nx, ny) = u.image_shape();
    let corr = Correlator::new((nx, ny), (bank.size, bank.size));
    let (p0, p1) = corr.padded_shape();
    let parts: Vec<(Array2<Complex64>, Array2<f64>)> = (0..2 * bank.n_theta)
        .into_par_iter()
        .map(|j| {
            let layer = u.data.index_axis(Axis(2), j % bank.n_theta);
            let layer = if j < bank.n_theta {
                layer.to_owned()
            } else {
                layer.mapv(|z| z.conj())
            };
            let us = corr.image_spectrum_complex(&layer.view());
            let k = bank.kernel_full(j);
            let ks = corr.kernel_spectrum(&k.view(), |z: Complex64| z.conj());
            let num = Array2::from_shape_fn((p0, p1), |ix| us[ix] * ks[ix].conj());
            let den = ks.mapv(|z| z.norm_sqr());
            (num, den)
        })
        .collect();
    let mut num = Array2::<Complex64>::zeros((p0, p1));
    let mut den = Array2::<f64>::zeros((p0, p1));
    for (n, d) in &parts {
        num += n;
        den += d;
    }
    let max = den.iter().cloned().fold(0.0, f64::max);
    let floor = 1e-6 * max;
    num.zip_mut_with(&den, |z, d| *z = if *d > floor { *z / *d } else { Complex64::default() });
    // The cropped score sits at offset `o` (the flipped kernel centre) in the
    // padded circular result; multiplying by the spectrum of a centred delta
    // kernel, e^{-iω·o}, undoes that shift.
    let mut delta = Array2::<f64>::zeros((bank.size, bank.size));
    delta[[bank.size / 2, bank.size / 2]] = 1.0;
    let ds = corr.kernel_spectrum(&delta.view(), |v| Complex64::new(v, 0.0));
    let full = corr.inverse(num * &ds);
    Ok(Array2::from_shape_fn((nx, ny), |ix| full[ix].re))
}

/// Bilinear sample of a complex kernel at fractional centred coordinates.
fn sample_bilinear(k: &ArrayView2<Complex64>, x: f64, y: f64) -> Complex64 {
    let (n0, n1) = k.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let get = |i: i64, j: i64| {
        if i < 0 || j < 0 || i as usize >= n0 || j as usize >= n1 {
            Complex64::default()
        } else {
            k[[i as usize, j as usize]]
        }
    };
    let (i, j) = (x0 as i64, y0 as i64);
    get(i, j) * (1.0 - fx) * (1.0 - fy)
        + get(i + 1, j) * fx * (1.0 - fy)
        + get(i, j + 1) * (1.0 - fx) * fy
        + get(i + 1, j + 1) * fx * fy
}

/// Rotate a centred kernel counter-clockwise by `theta` with bilinear
/// resampling.
pub fn rotate_kernel(k: &ArrayView2<Complex64>, theta: f64) -> Array2<Complex64> {
    let (n0, n1) = k.dim();
    let c0 = (n0 / 2) as f64;
    let c1 = (n1 / 2) as f64;
    let (s, c) = theta.sin_cos();
    Array2::from_shape_fn((n0, n1), |(i, j)| {
        let (x, y) = (i as f64 - c0, j as f64 - c1);
        // Pull back through the inverse rotation.
        let (sx, sy) = (c * x + s * y, -s * x + c * y);
        sample_bilinear(k, sx + c0, sy + c1)
    })
}
