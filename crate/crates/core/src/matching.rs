//! Matching potentials, windows, local normalization and detection.
//!
//! Images are indexed `[x, y]` and scores `[x, y, θ]`. A template of width
//! `N` is centred on pixel `N / 2`; potentials are "same"-size
//! correlations with zero padding.

use std::f64::consts::TAU;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3, ArrayViewD, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::bspline::{Domain, SplineTemplate};
use crate::error::{Error, Result};
use crate::fft::{correlate_real, Correlator};
use crate::geometry::rotate;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Lin,
    Log,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lin" | "linear" => Ok(Mode::Lin),
            "log" | "logistic" => Ok(Mode::Log),
            _ => Err(Error::InvalidParameter(format!("unknown mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Lin => "lin",
            Mode::Log => "log",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialMap {
    pub values: Array2<f64>,
    /// Pre-sigmoid response of log-mode maps; breaks ties where the sigmoid
    /// saturates.
    pub linear: Option<Array2<f64>>,
    pub mode: Mode,
    pub domain: Domain,
}

impl PotentialMap {
    fn finish(raw: Array2<f64>, mode: Mode, domain: Domain) -> Self {
        match mode {
            Mode::Lin => Self {
                values: raw,
                linear: None,
                mode,
                domain,
            },
            Mode::Log => Self {
                values: raw.mapv(sigmoid),
                linear: Some(raw),
                mode,
                domain,
            },
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Linear response: `linear` when present, else `values`.
    pub fn response(&self) -> &Array2<f64> {
        self.linear.as_ref().unwrap_or(&self.values)
    }
}

/// Smooth approximation of a disk indicator, normalized to unit mass.
#[derive(Clone, Debug)]
pub struct Window {
    pub radius: f64,
    pub order: usize,
    /// Centred samples, shape `(2h+1, 2h+1)`.
    pub values: Array2<f64>,
}

impl Window {
    pub fn half_size(&self) -> usize {
        self.values.dim().0 / 2
    }

    /// Unnormalized radial profile `e^{−u} Σ_{i≤n} u^i/i!` with `u = ρ²/s`.
    pub fn profile(radius: f64, order: usize, rho: f64) -> f64 {
        let s = 2.0 * radius * radius / (1.0 + 2.0 * order as f64);
        let u = rho * rho / s;
        let mut term = 1.0;
        let mut sum = 1.0;
        for i in 1..=order {
            term *= u / i as f64;
            sum += term;
        }
        (-u).exp() * sum
    }

    /// Window evaluated on a patch grid of `shape`, centred on `shape / 2`
    /// and normalized to unit sum over the patch.
    pub fn on_patch(&self, nx: usize, ny: usize) -> Array2<f64> {
        let (cx, cy) = ((nx / 2) as f64, (ny / 2) as f64);
        let mut w = Array2::from_shape_fn((nx, ny), |(i, j)| {
            Self::profile(self.radius, self.order, (i as f64 - cx).hypot(j as f64 - cy))
        });
        let s = w.sum();
        w /= s;
        w
    }
}

pub fn build_window(radius: f64, order: usize) -> Result<Window> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParameter(format!("window radius must be positive, got {radius}")));
    }
    let h = (3.0 * radius).ceil() as usize;
    let n = 2 * h + 1;
    let mut values = Array2::from_shape_fn((n, n), |(i, j)| {
        Window::profile(radius, order, (i as f64 - h as f64).hypot(j as f64 - h as f64))
    });
    let s = values.sum();
    values /= s;
    Ok(Window {
        radius,
        order,
        values,
    })
}

/// Binary region of interest.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    pub mask: Array2<bool>,
}

impl RoiMask {
    pub fn full(nx: usize, ny: usize) -> Self {
        Self {
            mask: Array2::from_elem((nx, ny), true),
        }
    }

    fn weights(&self) -> Array2<f64> {
        self.mask.mapv(|b| if b { 1.0 } else { 0.0 })
    }
}

/// Sampled rotations (radians) and scales; identity is always included.
#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceRange {
    pub scales: Vec<f64>,
    pub rotations: Vec<f64>,
}

impl InvarianceRange {
    pub fn new(mut scales: Vec<f64>, mut rotations: Vec<f64>) -> Result<Self> {
        if scales.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::InvalidParameter("scales must be positive".into()));
        }
        if !scales.contains(&1.0) {
            scales.insert(0, 1.0);
        }
        if !rotations.contains(&0.0) {
            rotations.insert(0, 0.0);
        }
        Ok(Self { scales, rotations })
    }

    pub fn identity() -> Self {
        Self {
            scales: vec![1.0],
            rotations: vec![0.0],
        }
    }

    /// `count` equally spaced rotations over the full circle.
    pub fn rotations(count: usize) -> Self {
        Self {
            scales: vec![1.0],
            rotations: (0..count.max(1)).map(|i| i as f64 * TAU / count.max(1) as f64).collect(),
        }
    }
}

fn check_template_fits(t: (usize, usize), f: (usize, usize)) -> Result<()> {
    if t.0 > f.0 || t.1 > f.1 {
        return Err(Error::TooSmall {
            image: vec![f.0, f.1],
            kernel: vec![t.0, t.1],
        });
    }
    Ok(())
}

/// `P(x) = Σ_i t[i] f(x + i − c)` for a rasterized ℝ² template.
pub fn potential_r2_raster(t: &ArrayView2<f64>, f: &ArrayView2<f64>, mode: Mode) -> Result<PotentialMap> {
    check_template_fits(t.dim(), f.dim())?;
    Ok(PotentialMap::finish(correlate_real(f, t), mode, Domain::R2))
}

pub fn potential_r2(t: &SplineTemplate, f: &ArrayView2<f64>, mode: Mode) -> Result<PotentialMap> {
    if t.domain() != Domain::R2 {
        return Err(Error::DomainMismatch {
            expected: Domain::R2,
            actual: t.domain(),
        });
    }
    potential_r2_raster(&t.rasterize2()?.view(), f, mode)
}

/// Sum over layers of 2D correlations, times the layer spacing `2π/N_θ`.
pub fn potential_se2_raster(t: &ArrayView3<f64>, u: &ArrayView3<f64>, mode: Mode) -> Result<PotentialMap> {
    let (tx, ty, tt) = t.dim();
    let (ux, uy, ut) = u.dim();
    if tt != ut {
        return Err(Error::GridMismatch {
            template: tt,
            score: ut,
        });
    }
    check_template_fits((tx, ty), (ux, uy))?;
    let corr = Correlator::new((ux, uy), (tx, ty));
    // Layer products are summed in a fixed order so results do not depend on
    // the thread count.
    let products: Vec<Array2<Complex64>> = (0..ut)
        .into_par_iter()
        .map(|j| {
            let fs = corr.image_spectrum(&u.index_axis(Axis(2), j));
            let ks = corr.kernel_spectrum(&t.index_axis(Axis(2), j), |v| Complex64::new(v, 0.0));
            fs * ks
        })
        .collect();
    let mut acc = Array2::<Complex64>::zeros(corr.padded_shape());
    for p in &products {
        acc += p;
    }
    let dt = TAU / ut as f64;
    let raw = corr.finish(acc).mapv(|z| z.re * dt);
    Ok(PotentialMap::finish(raw, mode, Domain::Se2))
}

pub fn potential_se2(t: &SplineTemplate, u: &ArrayView3<f64>, mode: Mode) -> Result<PotentialMap> {
    if t.domain() != Domain::Se2 {
        return Err(Error::DomainMismatch {
            expected: Domain::Se2,
            actual: t.domain(),
        });
    }
    if t.grid.n_theta != u.dim().2 {
        return Err(Error::GridMismatch {
            template: t.grid.n_theta,
            score: u.dim().2,
        });
    }
    potential_se2_raster(&t.rasterize3().view(), u, mode)
}

pub fn combine_potentials(ps: &[PotentialMap]) -> Result<PotentialMap> {
    let first = ps
        .first()
        .ok_or_else(|| Error::InvalidParameter("no potentials to combine".into()))?;
    let mut values = first.values.clone();
    let mut linear = first.response().clone();
    for p in &ps[1..] {
        if p.dim() != first.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![first.dim().0, first.dim().1],
                actual: vec![p.dim().0, p.dim().1],
            });
        }
        values += &p.values;
        linear += p.response();
    }
    let linear = ps.iter().any(|p| p.linear.is_some()).then_some(linear);
    Ok(PotentialMap {
        values,
        linear,
        mode: first.mode,
        domain: first.domain,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub x: usize,
    pub y: usize,
    pub value: f64,
}

/// Argmax over ROI positions. Equal values are ranked by the linear
/// response; remaining ties go to the first position in a scan with `y`
/// outer and `x` inner.
pub fn detect(p: &PotentialMap, roi: Option<&RoiMask>) -> Result<Detection> {
    let (nx, ny) = p.dim();
    if let Some(r) = roi {
        if r.mask.dim() != (nx, ny) {
            return Err(Error::ShapeMismatch {
                expected: vec![nx, ny],
                actual: vec![r.mask.dim().0, r.mask.dim().1],
            });
        }
    }
    let lin = p.response();
    let mut best: Option<(Detection, f64)> = None;
    for y in 0..ny {
        for x in 0..nx {
            if roi.is_some_and(|r| !r.mask[[x, y]]) {
                continue;
            }
            let (v, l) = (p.values[[x, y]], lin[[x, y]]);
            if v.is_nan() {
                continue;
            }
            if best.is_none_or(|(b, bl)| v > b.value || (v == b.value && l > bl)) {
                best = Some((Detection { x, y, value: v }, l));
            }
        }
    }
    best.map(|(d, _)| d).ok_or(Error::EmptyRoi)
}

/// Windowed weighted mean and variance `m⋆(f·w)/m⋆w`, `m⋆(f²·w)/m⋆w − mean²`.
fn windowed_stats(corr: &Correlator, win: &Array2<Complex64>, f: &Array2<f64>, w: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let conv = |a: &Array2<f64>| corr.correlate(&corr.image_spectrum(&a.view()), win).mapv(|z| z.re);
    let mw = conv(w);
    let mf = conv(&(f * w));
    let mff = conv(&(f * f * w));
    let mut mean = Array2::zeros(f.dim());
    let mut var = Array2::zeros(f.dim());
    Zip::from(&mut mean)
        .and(&mut var)
        .and(&mw)
        .and(&mf)
        .and(&mff)
        .for_each(|m, v, &a, &b, &c| {
            // Relative threshold guards positions with no support at all.
            if a > 1e-12 {
                *m = b / a;
                *v = c / a - (b / a) * (b / a);
            }
        });
    (mean, var)
}

/// Variance floor under the square root.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Two-pass local normalization to windowed zero mean and unit variance.
/// The second pass excludes pixels with first-pass `|f̂| > 1`.
pub fn local_normalize(f: &ArrayView2<f64>, w: &Window, roi: Option<&RoiMask>) -> Result<Array2<f64>> {
    let (nx, ny) = f.dim();
    let base = match roi {
        Some(r) => {
            if r.mask.dim() != (nx, ny) {
                return Err(Error::ShapeMismatch {
                    expected: vec![nx, ny],
                    actual: vec![r.mask.dim().0, r.mask.dim().1],
                });
            }
            r.weights()
        }
        None => Array2::ones((nx, ny)),
    };
    // Global centring and scaling are exact no-ops for the result and keep
    // flat images exactly zero.
    let gm = f.mean().unwrap_or(0.0);
    let centred = f.mapv(|v| v - gm);
    let gs = centred.mapv(|v| v * v).mean().unwrap_or(0.0).sqrt();
    if gs == 0.0 {
        return Ok(Array2::zeros((nx, ny)));
    }
    let g = centred / gs;
    let corr = Correlator::new((nx, ny), w.values.dim());
    let win = corr.kernel_spectrum(&w.values.view(), |v| Complex64::new(v, 0.0));
    let normalize = |mean: &Array2<f64>, var: &Array2<f64>| {
        let mut out = Array2::zeros((nx, ny));
        Zip::from(&mut out)
            .and(&g)
            .and(mean)
            .and(var)
            .for_each(|o, &x, &m, &v| *o = (x - m) / v.max(VARIANCE_FLOOR).sqrt());
        out
    };
    let (m1, v1) = windowed_stats(&corr, &win, &g, &base);
    let first = normalize(&m1, &v1);
    let w2 = Zip::from(&base).and(&first).map_collect(|&b, &x| if x.abs() <= 1.0 { b } else { 0.0 });
    let (m2, v2) = windowed_stats(&corr, &win, &g, &w2);
    Ok(normalize(&m2, &v2))
}

/// Windowed mean and standard deviation of a patch centred in the window;
/// SE(2) patches share the spatial window across layers.
pub fn windowed_moments(t: &ArrayViewD<f64>, w: &Window) -> Result<(f64, f64)> {
    let shape = t.shape();
    if shape.len() < 2 || shape.len() > 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0],
            actual: shape.to_vec(),
        });
    }
    let layers = if shape.len() == 3 { shape[2] } else { 1 };
    let m = w.on_patch(shape[0], shape[1]);
    let t3 = t
        .view()
        .into_shape_with_order((shape[0], shape[1], layers))
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    let mut mean = 0.0;
    for l in 0..layers {
        mean += (&t3.index_axis(Axis(2), l) * &m).sum();
    }
    mean /= layers as f64;
    let mut var = 0.0;
    for l in 0..layers {
        var += (t3.index_axis(Axis(2), l).mapv(|v| (v - mean).powi(2)) * &m).sum();
    }
    var /= layers as f64;
    Ok((mean, var.sqrt()))
}

/// Zero windowed mean, unit windowed standard deviation.
pub fn normalize_template(t: &ArrayViewD<f64>, w: &Window) -> Result<ArrayD<f64>> {
    let (mean, std) = windowed_moments(t, w)?;
    let scale = t.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(std > 1e-12 * scale.max(1e-300)) {
        return Err(Error::Degenerate("template has zero windowed variance".into()));
    }
    Ok(t.mapv(|v| (v - mean) / std))
}

/// Per-position normalization of a score: the windowed mean and variance of
/// each layer are averaged over θ and applied to every layer.
pub fn normalize_score_local(u: &ArrayView3<f64>, w: &Window) -> Array3<f64> {
    let (nx, ny, nt) = u.dim();
    let corr = Correlator::new((nx, ny), w.values.dim());
    let win = corr.kernel_spectrum(&w.values.view(), |v| Complex64::new(v, 0.0));
    let ones = Array2::ones((nx, ny));
    let stats: Vec<(Array2<f64>, Array2<f64>)> = (0..nt)
        .into_par_iter()
        .map(|j| {
            let layer = u.index_axis(Axis(2), j).to_owned();
            let (m, v) = windowed_stats(&corr, &win, &layer, &ones);
            // Second moment, so that averaging over θ is linear.
            let m2 = &v + &(&m * &m);
            (m, m2)
        })
        .collect();
    let mut mean = Array2::<f64>::zeros((nx, ny));
    let mut second = Array2::<f64>::zeros((nx, ny));
    for (m, m2) in &stats {
        mean += m;
        second += m2;
    }
    mean /= nt as f64;
    second /= nt as f64;
    let std = Zip::from(&second).and(&mean).map_collect(|&s, &m| (s - m * m).max(VARIANCE_FLOOR).sqrt());
    Array3::from_shape_fn((nx, ny, nt), |(x, y, t)| (u[[x, y, t]] - mean[[x, y]]) / std[[x, y]])
}

/// Bilinear sample with zeros outside.
fn bilinear(a: &ArrayView2<f64>, x: f64, y: f64) -> f64 {
    let (n0, n1) = a.dim();
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let get = |i: i64, j: i64| {
        if i < 0 || j < 0 || i as usize >= n0 || j as usize >= n1 {
            0.0
        } else {
            a[[i as usize, j as usize]]
        }
    };
    let (i, j) = (x0 as i64, y0 as i64);
    get(i, j) * (1.0 - fx) * (1.0 - fy) + get(i + 1, j) * fx * (1.0 - fy) + get(i, j + 1) * (1.0 - fx) * fy + get(i + 1, j + 1) * fx * fy
}

/// `(S_a R_α t)(x) = a⁻¹ t(R_α⁻¹ a x)` about the centre pixel, bilinear.
pub fn transform_raster_r2(t: &ArrayView2<f64>, scale: f64, alpha: f64) -> Array2<f64> {
    if scale == 1.0 && alpha == 0.0 {
        return t.to_owned();
    }
    let (n0, n1) = t.dim();
    let (c0, c1) = ((n0 / 2) as f64, (n1 / 2) as f64);
    Array2::from_shape_fn((n0, n1), |(i, j)| {
        let (x, y) = rotate(-alpha, scale * (i as f64 - c0), scale * (j as f64 - c1));
        bilinear(t, x + c0, y + c1) / scale
    })
}

/// `(S_a R_α T)(x, θ) = a⁻¹ T(R_α⁻¹ a x, θ − α)`; θ is shifted by whole
/// layers when α is a multiple of the spacing, else interpolated linearly.
pub fn transform_raster_se2(t: &ArrayView3<f64>, scale: f64, alpha: f64) -> Array3<f64> {
    let (n0, n1, nt) = t.dim();
    let spatial: Vec<Array2<f64>> = (0..nt)
        .map(|l| transform_raster_r2(&t.index_axis(Axis(2), l), scale, alpha))
        .collect();
    let shift = alpha / (TAU / nt as f64);
    let whole = shift.round();
    let exact = (shift - whole).abs() < 1e-9;
    Array3::from_shape_fn((n0, n1, nt), |(i, j, l)| {
        let src = l as f64 - if exact { whole } else { shift };
        let lo = src.floor();
        let frac = src - lo;
        let a = (lo as i64).rem_euclid(nt as i64) as usize;
        let b = (a + 1) % nt;
        if frac == 0.0 {
            spatial[a][[i, j]]
        } else {
            (1.0 - frac) * spatial[a][[i, j]] + frac * spatial[b][[i, j]]
        }
    })
}

/// Pointwise maximum of the lin potential over the sampled transformations;
/// log mode applies σ after the max.
pub fn invariant_potential_r2(t: &ArrayView2<f64>, f: &ArrayView2<f64>, mode: Mode, range: &InvarianceRange) -> Result<PotentialMap> {
    let pairs = pairs(range);
    let maps: Vec<Array2<f64>> = pairs
        .par_iter()
        .map(|&(a, al)| potential_r2_raster(&transform_raster_r2(t, a, al).view(), f, Mode::Lin).map(|p| p.values))
        .collect::<Result<_>>()?;
    Ok(PotentialMap::finish(pointwise_max(maps), mode, Domain::R2))
}

pub fn invariant_potential_se2(t: &ArrayView3<f64>, u: &ArrayView3<f64>, mode: Mode, range: &InvarianceRange) -> Result<PotentialMap> {
    let pairs = pairs(range);
    let maps: Vec<Array2<f64>> = pairs
        .iter()
        .map(|&(a, al)| potential_se2_raster(&transform_raster_se2(t, a, al).view(), u, Mode::Lin).map(|p| p.values))
        .collect::<Result<_>>()?;
    Ok(PotentialMap::finish(pointwise_max(maps), mode, Domain::Se2))
}

pub fn invariant_potential(t: &SplineTemplate, f: &ArrayViewD<f64>, mode: Mode, range: &InvarianceRange) -> Result<PotentialMap> {
    match t.domain() {
        Domain::R2 => {
            let f2: ArrayView2<f64> = f.view().into_dimensionality().map_err(|_| Error::DomainMismatch {
                expected: Domain::R2,
                actual: Domain::Se2,
            })?;
            invariant_potential_r2(&t.rasterize2()?.view(), &f2, mode, range)
        }
        Domain::Se2 => {
            let u3: ArrayView3<f64> = f.view().into_dimensionality().map_err(|_| Error::DomainMismatch {
                expected: Domain::Se2,
                actual: Domain::R2,
            })?;
            if t.grid.n_theta != u3.dim().2 {
                return Err(Error::GridMismatch {
                    template: t.grid.n_theta,
                    score: u3.dim().2,
                });
            }
            invariant_potential_se2(&t.rasterize3().view(), &u3, mode, range)
        }
    }
}

fn pairs(range: &InvarianceRange) -> Vec<(f64, f64)> {
    range
        .scales
        .iter()
        .flat_map(|&a| range.rotations.iter().map(move |&r| (a, r)))
        .collect()
}

fn pointwise_max(maps: Vec<Array2<f64>>) -> Array2<f64> {
    let mut it = maps.into_iter();
    let mut acc = it.next().expect("at least the identity transformation");
    for m in it {
        Zip::from(&mut acc).and(&m).for_each(|a, &b| *a = a.max(b));
    }
    acc
}

/// Normalized cross-correlation: the correlation of a normalized template
/// divided by the windowed local standard deviation of the image.
pub fn normalized_cross_correlation(t: &ArrayView2<f64>, f: &ArrayView2<f64>, w: &Window) -> Result<PotentialMap> {
    let tn: Array2<f64> = normalize_template(&t.view().into_dyn(), w)?
        .into_dimensionality()
        .expect("2D in, 2D out");
    let m = w.on_patch(t.dim().0, t.dim().1);
    let weighted = &tn * &m;
    check_template_fits(t.dim(), f.dim())?;
    let num = correlate_real(f, &weighted.view());
    let ones = Array2::ones(f.dim());
    let corr = Correlator::new(f.dim(), m.dim());
    let win = corr.kernel_spectrum(&m.view(), |v| Complex64::new(v, 0.0));
    let (_, var) = windowed_stats(&corr, &win, &f.to_owned(), &ones);
    let values = Zip::from(&num).and(&var).map_collect(|&n, &v| n / v.max(VARIANCE_FLOOR).sqrt());
    Ok(PotentialMap {
        values,
        linear: None,
        mode: Mode::Lin,
        domain: Domain::R2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{Loss, SplineGrid};
    use crate::fft::correlate_direct;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn window_properties() {
        let w = build_window(6.0, 8).unwrap();
        assert!((w.values.sum() - 1.0).abs() < 1e-10);
        let h = w.half_size();
        let max = w.values.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, w.values[[h, h]]);
        assert!(w.values.iter().all(|v| *v >= 0.0));
        let ratio = |n: usize| Window::profile(6.0, n, 3.0) / Window::profile(6.0, n, 9.0);
        assert!(ratio(2) < ratio(8) && ratio(8) < ratio(32), "{} {} {}", ratio(2), ratio(8), ratio(32));
        assert!(build_window(0.0, 8).is_err());
    }

    #[test]
    fn zero_template_potentials() {
        let grid = SplineGrid::r2(9, 9, 3, 3, 3).unwrap();
        let t = SplineTemplate::zeros(grid, Loss::Linear);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_array(&mut rng, (20, 20));
        let lin = potential_r2(&t, &f.view(), Mode::Lin).unwrap();
        assert!(lin.values.iter().all(|v| v.abs() < 1e-12));
        let log = potential_r2(&t, &f.view(), Mode::Log).unwrap();
        assert!(log.values.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn autocorrelation_peak_at_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = rand_array(&mut rng, (7, 7));
        let mut f = Array2::zeros((30, 30));
        let (x0, y0) = (12, 17);
        for i in 0..7 {
            for j in 0..7 {
                f[[x0 + i - 3, y0 + j - 3]] = t[[i, j]];
            }
        }
        let p = potential_r2_raster(&t.view(), &f.view(), Mode::Lin).unwrap();
        let d = detect(&p, None).unwrap();
        assert_eq!((d.x, d.y), (x0, y0));
    }

    #[test]
    fn fft_potential_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rand_array(&mut rng, (9, 7));
        let f = rand_array(&mut rng, (32, 32));
        let p = potential_r2_raster(&t.view(), &f.view(), Mode::Lin).unwrap();
        let q = correlate_direct(&f.view(), &t.view());
        for (a, b) in p.values.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn se2_potential_is_layer_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Array3::from_shape_fn((7, 7, 4), |_| rng.random_range(-1.0..1.0));
        let u = Array3::from_shape_fn((24, 20, 4), |_| rng.random_range(0.0..1.0));
        let p = potential_se2_raster(&t.view(), &u.view(), Mode::Lin).unwrap();
        let mut sum = Array2::<f64>::zeros((24, 20));
        for l in 0..4 {
            let mut masked = Array3::zeros((7, 7, 4));
            masked.index_axis_mut(Axis(2), l).assign(&t.index_axis(Axis(2), l));
            sum += &potential_se2_raster(&masked.view(), &u.view(), Mode::Lin).unwrap().values;
        }
        for (a, b) in p.values.iter().zip(sum.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let bad = Array3::zeros((24, 20, 6));
        assert!(matches!(
            potential_se2_raster(&t.view(), &bad.view(), Mode::Lin),
            Err(Error::GridMismatch { template: 4, score: 6 })
        ));
    }

    #[test]
    fn domain_mismatch_is_reported() {
        let grid = SplineGrid::se2(5, 5, 4, 2, 2, 4, 3).unwrap();
        let t = SplineTemplate::zeros(grid, Loss::Linear);
        let f = Array2::zeros((10, 10));
        assert!(matches!(potential_r2(&t, &f.view(), Mode::Lin), Err(Error::DomainMismatch { .. })));
    }

    #[test]
    fn detection_rules() {
        let mut v = Array2::zeros((5, 4));
        let flat = PotentialMap {
            values: v.clone(),
            linear: None,
            mode: Mode::Lin,
            domain: Domain::R2,
        };
        let d = detect(&flat, None).unwrap();
        assert_eq!((d.x, d.y), (0, 0));
        v[[3, 2]] = 5.0;
        v[[1, 1]] = 4.0;
        let p = PotentialMap {
            values: v,
            linear: None,
            mode: Mode::Lin,
            domain: Domain::R2,
        };
        assert_eq!(detect(&p, None).unwrap().x, 3);
        let mut roi = RoiMask::full(5, 4);
        roi.mask[[3, 2]] = false;
        let d = detect(&p, Some(&roi)).unwrap();
        assert_eq!((d.x, d.y, d.value), (1, 1, 4.0));
        let empty = RoiMask {
            mask: Array2::from_elem((5, 4), false),
        };
        assert!(matches!(detect(&p, Some(&empty)), Err(Error::EmptyRoi)));
        // Row-major tie-break: y outer, x inner.
        let mut tie = Array2::zeros((3, 3));
        tie[[2, 0]] = 1.0;
        tie[[0, 1]] = 1.0;
        let pt = PotentialMap {
            values: tie,
            linear: None,
            mode: Mode::Lin,
            domain: Domain::R2,
        };
        let d = detect(&pt, None).unwrap();
        assert_eq!((d.x, d.y), (2, 0));
        // Saturated sigmoid: the linear response decides.
        let mut raw = Array2::zeros((3, 3));
        raw[[1, 0]] = 800.0;
        raw[[2, 2]] = 900.0;
        let sat = PotentialMap::finish(raw, Mode::Log, Domain::R2);
        assert_eq!(sat.values[[1, 0]], sat.values[[2, 2]]);
        let d = detect(&sat, None).unwrap();
        assert_eq!((d.x, d.y), (2, 2));
    }

    #[test]
    fn combine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = PotentialMap {
            values: rand_array(&mut rng, (6, 6)),
            linear: None,
            mode: Mode::Lin,
            domain: Domain::R2,
        };
        assert_eq!(combine_potentials(std::slice::from_ref(&p)).unwrap(), p);
        let z = PotentialMap {
            values: Array2::zeros((6, 6)),
            ..p.clone()
        };
        assert_eq!(combine_potentials(&[p.clone(), z]).unwrap().values, p.values);
        let two = combine_potentials(&[p.clone(), p.clone()]).unwrap();
        let a = detect(&two, None).unwrap();
        let b = detect(&p, None).unwrap();
        assert_eq!((a.x, a.y), (b.x, b.y));
        let wrong = PotentialMap {
            values: Array2::zeros((5, 6)),
            ..p.clone()
        };
        assert!(combine_potentials(&[p, wrong]).is_err());
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        let w = build_window(4.0, 8).unwrap();
        let f = Array2::from_elem((30, 30), 7.5);
        let n = local_normalize(&f.view(), &w, None).unwrap();
        assert!(n.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn full_roi_matches_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = rand_array(&mut rng, (30, 26));
        let w = build_window(4.0, 8).unwrap();
        let a = local_normalize(&f.view(), &w, None).unwrap();
        let b = local_normalize(&f.view(), &w, Some(&RoiMask::full(30, 26))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn affine_illumination_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = rand_array(&mut rng, (40, 40));
        let g = f.mapv(|v| 3.0 * v + 11.0);
        let w = build_window(4.0, 8).unwrap();
        let a = local_normalize(&f.view(), &w, None).unwrap();
        let b = local_normalize(&g.view(), &w, None).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn template_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = rand_array(&mut rng, (11, 11)).into_dyn();
        let w = build_window(5.0, 8).unwrap();
        let n = normalize_template(&t.view(), &w).unwrap();
        let (m, s) = windowed_moments(&n.view(), &w).unwrap();
        assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
        let again = normalize_template(&n.view(), &w).unwrap();
        assert!(again.iter().zip(n.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
        let affine = t.mapv(|v| 2.5 * v - 4.0);
        let na = normalize_template(&affine.view(), &w).unwrap();
        assert!(na.iter().zip(n.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
        let flat = ArrayD::from_elem(vec![11, 11], 3.0);
        assert!(matches!(normalize_template(&flat.view(), &w), Err(Error::Degenerate(_))));
    }

    #[test]
    fn identity_range_equals_base_potential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = rand_array(&mut rng, (9, 9));
        let f = rand_array(&mut rng, (25, 25));
        let base = potential_r2_raster(&t.view(), &f.view(), Mode::Log).unwrap();
        let inv = invariant_potential_r2(&t.view(), &f.view(), Mode::Log, &InvarianceRange::identity()).unwrap();
        assert_eq!(base, inv);
        let range = InvarianceRange::new(vec![0.9, 1.1], vec![0.3, 1.0]).unwrap();
        let lin = potential_r2_raster(&t.view(), &f.view(), Mode::Lin).unwrap();
        let inv = invariant_potential_r2(&t.view(), &f.view(), Mode::Lin, &range).unwrap();
        assert!(inv.values.iter().zip(lin.values.iter()).all(|(a, b)| a >= b));
    }

    #[test]
    fn se2_transform_shifts_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = Array3::from_shape_fn((9, 9, 8), |_| rng.random_range(-1.0..1.0));
        // A half turn maps pixels exactly and shifts θ by four layers.
        let r = transform_raster_se2(&t.view(), 1.0, std::f64::consts::PI);
        for i in 0..9 {
            for j in 0..9 {
                for l in 0..8 {
                    let e = t[[8 - i, 8 - j, (l + 4) % 8]];
                    assert!((r[[i, j, l]] - e).abs() < 1e-12);
                }
            }
        }
    }
}
