//! Cardinal B-splines and spline templates on ℝ² and SE(2) grids.
//!
//! Pixel coordinates are zero-based in the API. Knot `k` (one-based) sits at
//! one-based pixel `k·s_k`, i.e. zero-based position `k·s_k − 1`; orientation
//! knot `m` sits at angle `m·s_m` and the θ axis is 2π-periodic.

use std::f64::consts::TAU;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3, ArrayViewD, Axis, Ix2, Ix3};
use rayon::prelude::*;

use crate::error::{check_shape, Error, Result};

/// Sampling matrix `S`: one row per training patch, one column per coefficient.
pub type SamplingMatrix = DMatrix<f64>;

/// Centered cardinal B-spline `B^n(x)`, the `n`-fold self-convolution of the
/// indicator of `[-1/2, 1/2)`.
pub fn bspline_eval(n: usize, x: f64) -> f64 {
    let half = (n + 1) as f64 / 2.0;
    let t = x + half;
    if !(0.0..(n + 1) as f64).contains(&t) {
        return 0.0;
    }
    let i = t.floor() as usize;
    // v[j] holds M_k(t − j); start from the indicator M_1.
    let mut v = vec![0.0; n + 2];
    v[i] = 1.0;
    for k in 2..=n + 1 {
        let kf = k as f64;
        for j in 0..=n {
            let tj = t - j as f64;
            v[j] = (tj * v[j] + (kf - tj) * v[j + 1]) / (kf - 1.0);
        }
    }
    v[0]
}

/// `d`-th derivative of `B^n` at `x`, as a finite difference of lower-order
/// splines. Rejects `d > n`.
pub fn bspline_derivative(n: usize, d: usize, x: f64) -> Result<f64> {
    if d > n {
        return Err(Error::InvalidParameter(format!(
            "derivative order {d} exceeds spline order {n}"
        )));
    }
    let shift = d as f64 / 2.0;
    let mut sum = 0.0;
    let mut binom = 1.0;
    for i in 0..=d {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * binom * bspline_eval(n - d, x + shift - i as f64);
        binom = binom * (d - i) as f64 / (i + 1) as f64;
    }
    Ok(sum)
}

/// Periodized spline `Σ_j B^n(u + j·period)`.
pub fn bspline_periodic(n: usize, u: f64, period: usize) -> f64 {
    let p = period as f64;
    let u = u.rem_euclid(p);
    let half = (n + 1) as f64 / 2.0;
    let reach = (half / p).ceil() as i64 + 1;
    (-reach..=reach)
        .map(|j| bspline_eval(n, u + j as f64 * p))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    R2,
    Se2,
}

impl Domain {
    pub fn tag(self) -> u8 {
        match self {
            Domain::R2 => 0,
            Domain::Se2 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Domain::R2),
            1 => Ok(Domain::Se2),
            t => Err(Error::Format(format!("unknown domain tag {t}"))),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::R2 => "R2",
            Domain::Se2 => "SE2",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r2" => Ok(Domain::R2),
            "se2" => Ok(Domain::Se2),
            _ => Err(Error::InvalidParameter(format!("unknown domain '{s}'"))),
        }
    }
}

/// Loss a template was trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Loss {
    Linear,
    Logistic,
    Average,
}

impl Loss {
    pub fn tag(self) -> u8 {
        match self {
            Loss::Linear => 0,
            Loss::Logistic => 1,
            Loss::Average => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Loss::Linear),
            1 => Ok(Loss::Logistic),
            2 => Ok(Loss::Average),
            t => Err(Error::Format(format!("unknown loss tag {t}"))),
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Linear => "linear",
            Loss::Logistic => "logistic",
            Loss::Average => "average",
        })
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "lin" => Ok(Loss::Linear),
            "logistic" | "log" => Ok(Loss::Logistic),
            "average" | "avg" => Ok(Loss::Average),
            _ => Err(Error::InvalidParameter(format!("unknown loss '{s}'"))),
        }
    }
}

/// Uniform tensor-product knot grid over a patch (and orientation circle).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplineGrid {
    pub domain: Domain,
    pub order: usize,
    pub n_k: usize,
    pub n_l: usize,
    /// One for ℝ² grids.
    pub n_m: usize,
    pub n_x: usize,
    pub n_y: usize,
    /// One for ℝ² grids.
    pub n_theta: usize,
}

impl SplineGrid {
    pub fn r2(n_x: usize, n_y: usize, n_k: usize, n_l: usize, order: usize) -> Result<Self> {
        let g = Self {
            domain: Domain::R2,
            order,
            n_k,
            n_l,
            n_m: 1,
            n_x,
            n_y,
            n_theta: 1,
        };
        g.validate()?;
        Ok(g)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn se2(
        n_x: usize,
        n_y: usize,
        n_theta: usize,
        n_k: usize,
        n_l: usize,
        n_m: usize,
        order: usize,
    ) -> Result<Self> {
        let g = Self {
            domain: Domain::Se2,
            order,
            n_k,
            n_l,
            n_m,
            n_x,
            n_y,
            n_theta,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let counts = [self.n_k, self.n_l, self.n_m, self.n_x, self.n_y, self.n_theta];
        if counts.contains(&0) {
            return Err(Error::InvalidParameter(format!("grid counts must be positive: {counts:?}")));
        }
        if self.domain == Domain::R2 && (self.n_m != 1 || self.n_theta != 1) {
            return Err(Error::InvalidParameter("R2 grids have a single orientation".into()));
        }
        if self.order > 15 {
            return Err(Error::InvalidParameter(format!("spline order {} too large", self.order)));
        }
        Ok(())
    }

    pub fn s_k(&self) -> f64 {
        self.n_x as f64 / self.n_k as f64
    }

    pub fn s_l(&self) -> f64 {
        self.n_y as f64 / self.n_l as f64
    }

    pub fn s_m(&self) -> f64 {
        TAU / self.n_m as f64
    }

    /// Spacing of the orientation samples of the pixel grid.
    pub fn theta_step(&self) -> f64 {
        TAU / self.n_theta as f64
    }

    /// Quadrature weight of one sample: 1 per pixel, Δθ per orientation layer.
    pub fn sample_weight(&self) -> f64 {
        match self.domain {
            Domain::R2 => 1.0,
            Domain::Se2 => self.theta_step(),
        }
    }

    pub fn num_coefficients(&self) -> usize {
        self.n_k * self.n_l * self.n_m
    }

    /// Flat index of zero-based coefficient `(k, l, m)`, `m` fastest.
    pub fn index(&self, k: usize, l: usize, m: usize) -> usize {
        (k * self.n_l + l) * self.n_m + m
    }

    pub fn pixel_shape(&self) -> Vec<usize> {
        match self.domain {
            Domain::R2 => vec![self.n_x, self.n_y],
            Domain::Se2 => vec![self.n_x, self.n_y, self.n_theta],
        }
    }

    /// Zero-based pixel position of zero-based knot `k`.
    pub fn knot_x(&self, k: usize) -> f64 {
        (k + 1) as f64 * self.s_k() - 1.0
    }

    pub fn knot_y(&self, l: usize) -> f64 {
        (l + 1) as f64 * self.s_l() - 1.0
    }

    pub fn knot_theta(&self, m: usize) -> f64 {
        (m + 1) as f64 * self.s_m()
    }

    /// Basis factor along x at pixel coordinate `x` for knot `k`.
    pub fn basis_x(&self, k: usize, x: f64) -> f64 {
        bspline_eval(self.order, (x - self.knot_x(k)) / self.s_k())
    }

    pub fn basis_y(&self, l: usize, y: f64) -> f64 {
        bspline_eval(self.order, (y - self.knot_y(l)) / self.s_l())
    }

    /// Periodic basis factor along θ; constant one on ℝ² grids.
    pub fn basis_theta(&self, m: usize, theta: f64) -> f64 {
        match self.domain {
            Domain::R2 => 1.0,
            Domain::Se2 => bspline_periodic(self.order, theta / self.s_m() - (m + 1) as f64, self.n_m),
        }
    }
}

/// Per-axis basis matrices of a grid, `B[i, k]` = basis `k` at sample `i`.
#[derive(Clone, Debug)]
pub struct SamplingBasis {
    pub grid: SplineGrid,
    pub bx: Array2<f64>,
    pub by: Array2<f64>,
    pub bt: Array2<f64>,
}

impl SamplingBasis {
    pub fn new(grid: &SplineGrid) -> Self {
        let bx = Array2::from_shape_fn((grid.n_x, grid.n_k), |(i, k)| grid.basis_x(k, i as f64));
        let by = Array2::from_shape_fn((grid.n_y, grid.n_l), |(j, l)| grid.basis_y(l, j as f64));
        let dt = grid.theta_step();
        let bt = Array2::from_shape_fn((grid.n_theta, grid.n_m), |(t, m)| grid.basis_theta(m, t as f64 * dt));
        Self {
            grid: grid.clone(),
            bx,
            by,
            bt,
        }
    }

    fn as_3d<'a>(&self, patch: &'a ArrayViewD<'a, f64>) -> Result<ArrayView3<'a, f64>> {
        check_shape(&self.grid.pixel_shape(), patch.shape())?;
        let g = &self.grid;
        Ok(patch
            .view()
            .into_shape_with_order((g.n_x, g.n_y, g.n_theta))
            .expect("shape checked above"))
    }

    /// Row of `S` for one patch: entry `(k, l, m)` is the weighted sum over
    /// samples of basis `(k, l, m)` times the patch.
    pub fn row(&self, patch: &ArrayViewD<f64>) -> Result<Vec<f64>> {
        let f = self.as_3d(patch)?;
        let g = &self.grid;
        let w = g.sample_weight();
        let mut out = vec![0.0; g.num_coefficients()];
        for t in 0..g.n_theta {
            let ft = f.index_axis(Axis(2), t);
            let gt = self.bx.t().dot(&ft).dot(&self.by);
            for m in 0..g.n_m {
                let b = self.bt[[t, m]] * w;
                if b == 0.0 {
                    continue;
                }
                for k in 0..g.n_k {
                    for l in 0..g.n_l {
                        out[g.index(k, l, m)] += b * gt[[k, l]];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Template sampled on the pixel (and orientation) grid, shape
    /// `(N_x, N_y, N_θ)` with `N_θ = 1` on ℝ².
    pub fn rasterize3(&self, coefficients: &[f64]) -> Result<Array3<f64>> {
        let g = &self.grid;
        check_shape(&[g.num_coefficients()], &[coefficients.len()])?;
        let mut out = Array3::zeros((g.n_x, g.n_y, g.n_theta));
        for t in 0..g.n_theta {
            let ct = Array2::from_shape_fn((g.n_k, g.n_l), |(k, l)| {
                (0..g.n_m)
                    .map(|m| coefficients[g.index(k, l, m)] * self.bt[[t, m]])
                    .sum::<f64>()
            });
            let slab = self.bx.dot(&ct).dot(&self.by.t());
            out.index_axis_mut(Axis(2), t).assign(&slab);
        }
        Ok(out)
    }
}

/// Row of `S` for one patch on `grid`.
pub fn build_sampling_row(patch: &ArrayViewD<f64>, grid: &SplineGrid) -> Result<Vec<f64>> {
    SamplingBasis::new(grid).row(patch)
}

/// Stack the rows of all patches into `S`.
pub fn build_sampling_matrix(patches: &[ArrayD<f64>], grid: &SplineGrid) -> Result<SamplingMatrix> {
    let basis = SamplingBasis::new(grid);
    let rows: Vec<Vec<f64>> = patches
        .par_iter()
        .map(|p| basis.row(&p.view()))
        .collect::<Result<_>>()?;
    let p = grid.num_coefficients();
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

const MAGIC: &[u8; 4] = b"SE2T";
const VERSION: u16 = 1;

/// B-spline template: a grid plus its coefficients, `m` fastest, `k` slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineTemplate {
    pub grid: SplineGrid,
    pub loss: Loss,
    pub coefficients: Vec<f64>,
}

impl SplineTemplate {
    pub fn new(grid: SplineGrid, loss: Loss, coefficients: Vec<f64>) -> Result<Self> {
        check_shape(&[grid.num_coefficients()], &[coefficients.len()])?;
        Ok(Self {
            grid,
            loss,
            coefficients,
        })
    }

    pub fn zeros(grid: SplineGrid, loss: Loss) -> Self {
        let n = grid.num_coefficients();
        Self {
            grid,
            loss,
            coefficients: vec![0.0; n],
        }
    }

    pub fn domain(&self) -> Domain {
        self.grid.domain
    }

    /// Evaluate the spline at `(x, y)` or `(x, y, θ)` by direct summation.
    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        let g = &self.grid;
        let expected = match g.domain {
            Domain::R2 => 2,
            Domain::Se2 => 3,
        };
        check_shape(&[expected], &[point.len()])?;
        let theta = if expected == 3 { point[2] } else { 0.0 };
        let bt: Vec<f64> = (0..g.n_m).map(|m| g.basis_theta(m, theta)).collect();
        let mut sum = 0.0;
        for k in 0..g.n_k {
            let bx = g.basis_x(k, point[0]);
            if bx == 0.0 {
                continue;
            }
            for l in 0..g.n_l {
                let by = g.basis_y(l, point[1]);
                if by == 0.0 {
                    continue;
                }
                for (m, b) in bt.iter().enumerate() {
                    sum += self.coefficients[g.index(k, l, m)] * bx * by * b;
                }
            }
        }
        Ok(sum)
    }

    /// Template on the integer pixel grid, shape `(N_x, N_y[, N_θ])`.
    pub fn rasterize(&self) -> ArrayD<f64> {
        let r = self.rasterize3();
        match self.grid.domain {
            Domain::R2 => r.index_axis_move(Axis(2), 0).into_dyn(),
            Domain::Se2 => r.into_dyn(),
        }
    }

    pub fn rasterize3(&self) -> Array3<f64> {
        SamplingBasis::new(&self.grid)
            .rasterize3(&self.coefficients)
            .expect("coefficient length validated on construction")
    }

    pub fn rasterize2(&self) -> Result<Array2<f64>> {
        self.rasterize()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::DomainMismatch {
                expected: Domain::R2,
                actual: self.grid.domain,
            })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let g = &self.grid;
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;
        w.write_u8(g.domain.tag())?;
        w.write_u8(self.loss.tag())?;
        w.write_u16::<LittleEndian>(g.order as u16)?;
        for v in [g.n_k, g.n_l, g.n_m, g.n_x, g.n_y, g.n_theta] {
            w.write_u32::<LittleEndian>(to_u32(v)?)?;
        }
        for c in &self.coefficients {
            w.write_f64::<LittleEndian>(*c)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let domain = Domain::from_tag(r.read_u8()?)?;
        let loss = Loss::from_tag(r.read_u8()?)?;
        let order = r.read_u16::<LittleEndian>()? as usize;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let [n_k, n_l, n_m, n_x, n_y, n_theta] = dims;
        let grid = SplineGrid {
            domain,
            order,
            n_k,
            n_l,
            n_m,
            n_x,
            n_y,
            n_theta,
        };
        grid.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut coefficients = vec![0.0; grid.num_coefficients()];
        r.read_f64_into::<LittleEndian>(&mut coefficients)?;
        Ok(Self {
            grid,
            loss,
            coefficients,
        })
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

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))
}

/// View a dynamic patch as 2D, for callers that know the domain.
pub fn as_2d<'a>(a: &'a ArrayViewD<'a, f64>) -> Result<ArrayView2<'a, f64>> {
    a.view().into_dimensionality::<Ix2>().map_err(|_| Error::ShapeMismatch {
        expected: vec![0, 0],
        actual: a.shape().to_vec(),
    })
}

pub fn as_3d<'a>(a: &'a ArrayViewD<'a, f64>) -> Result<ArrayView3<'a, f64>> {
    a.view().into_dimensionality::<Ix3>().map_err(|_| Error::ShapeMismatch {
        expected: vec![0, 0, 0],
        actual: a.shape().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate_piecewise;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn indicator(x: f64) -> f64 {
        if (-0.5..0.5).contains(&x) {
            1.0
        } else {
            0.0
        }
    }

    // Repeated numeric self-convolution of the indicator, by Riemann sums on
    // a fine lattice. Independent from the recursion in `bspline_eval`.
    fn numeric_bspline(n: usize, x: f64) -> f64 {
        let h = 1e-3;
        let width = (n + 2) as f64;
        let len = (2.0 * width / h) as usize + 1;
        let grid: Vec<f64> = (0..len).map(|i| -width + i as f64 * h).collect();
        let mut cur: Vec<f64> = grid.iter().map(|&t| indicator(t + 0.5 * h)).collect();
        let box_: Vec<f64> = cur.clone();
        for _ in 0..n {
            let mut next = vec![0.0; len];
            let c = len / 2;
            for (i, nx) in next.iter_mut().enumerate() {
                let mut s = 0.0;
                for (j, b) in box_.iter().enumerate() {
                    if *b == 0.0 {
                        continue;
                    }
                    let idx = i as i64 + c as i64 - j as i64;
                    if idx >= 0 && (idx as usize) < len {
                        s += cur[idx as usize] * b;
                    }
                }
                *nx = s * h;
            }
            cur = next;
        }
        let i = ((x + width) / h).round() as usize;
        cur[i]
    }

    #[test]
    fn values_at_zero_match_numeric_convolution() {
        let b1 = numeric_bspline(1, 0.0);
        let b3 = numeric_bspline(3, 0.0);
        assert!((b1 - 1.0).abs() < 5e-3, "{b1}");
        assert!((b3 - 2.0 / 3.0).abs() < 5e-3, "{b3}");
        assert!((bspline_eval(1, 0.0) - b1).abs() < 5e-3);
        assert!((bspline_eval(3, 0.0) - b3).abs() < 5e-3);
        assert!((bspline_eval(3, 0.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(bspline_eval(1, 0.0), 1.0);
    }

    #[test]
    fn support() {
        for n in 0..8 {
            let half = (n + 1) as f64 / 2.0;
            assert_eq!(bspline_eval(n, half + 1e-9), 0.0);
            assert_eq!(bspline_eval(n, -half - 1e-9), 0.0);
            assert_eq!(bspline_eval(n, half + 3.0), 0.0);
        }
        assert_eq!(bspline_eval(0, 0.5), 0.0);
        assert_eq!(bspline_eval(0, -0.5), 1.0);
    }

    #[test]
    fn partition_of_unity() {
        for n in 0..8 {
            for i in 0..=2000 {
                let x = -3.0 + i as f64 * 3e-3;
                let s: f64 = (-10..=10).map(|k| bspline_eval(n, x - k as f64)).sum();
                assert!((s - 1.0).abs() < 1e-10, "n={n} x={x} sum={s}");
            }
        }
    }

    #[test]
    fn convolution_identity() {
        for n in 1..=3 {
            let half = (n + 1) as f64 / 2.0;
            let knots: Vec<f64> = (0..=n + 1).map(|i| -half + i as f64).collect();
            let mut x = -((2 * n + 2) as f64) / 2.0;
            while x <= (2 * n + 2) as f64 / 2.0 {
                let mut breaks = knots.clone();
                breaks.extend(knots.iter().map(|k| x - k));
                let conv = integrate_piecewise(
                    |t| bspline_eval(n, t) * bspline_eval(n, x - t),
                    -half,
                    half,
                    &breaks,
                    8,
                );
                let direct = bspline_eval(2 * n + 1, x);
                assert!((conv - direct).abs() < 1e-6, "n={n} x={x}: {conv} vs {direct}");
                x += 1e-3;
            }
        }
    }

    #[test]
    fn second_derivative_matches_finite_differences() {
        let h = 1e-5;
        let fd = |x: f64| (bspline_eval(3, x + h) - 2.0 * bspline_eval(3, x) + bspline_eval(3, x - h)) / (h * h);
        for (x, expect) in [(0.0, -2.0), (1.0, 1.0), (-1.0, 1.0)] {
            let d = bspline_derivative(3, 2, x).unwrap();
            assert!((d - expect).abs() < 1e-12, "x={x}: {d}");
            assert!((d - fd(x)).abs() < 1e-4, "x={x}: {d} vs fd {}", fd(x));
        }
        assert_eq!(bspline_derivative(3, 1, 0.0).unwrap(), 0.0);
        assert!(bspline_derivative(2, 3, 0.0).is_err());
    }

    #[test]
    fn first_derivative_matches_finite_differences() {
        let h = 1e-6;
        for n in 1..=7 {
            for i in 0..50 {
                let x = -4.0 + i as f64 * 0.1637;
                let fd = (bspline_eval(n, x + h) - bspline_eval(n, x - h)) / (2.0 * h);
                let d = bspline_derivative(n, 1, x).unwrap();
                // Skip points within h of the kinks of B^1.
                if n == 1 && x.fract().abs() < 1e-5 {
                    continue;
                }
                assert!((d - fd).abs() < 1e-5, "n={n} x={x}: {d} vs {fd}");
            }
        }
    }

    fn random_template(grid: SplineGrid, seed: u64) -> SplineTemplate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (0..grid.num_coefficients()).map(|_| rng.random_range(-1.0..1.0)).collect();
        SplineTemplate::new(grid, Loss::Linear, c).unwrap()
    }

    #[test]
    fn single_coefficient_at_knot() {
        let grid = SplineGrid::r2(20, 20, 5, 5, 3).unwrap();
        let mut t = SplineTemplate::zeros(grid.clone(), Loss::Linear);
        assert_eq!(t.eval(&[3.0, 7.0]).unwrap(), 0.0);
        t.coefficients[grid.index(2, 1, 0)] = 1.0;
        let v = t.eval(&[grid.knot_x(2), grid.knot_y(1)]).unwrap();
        assert!((v - (2.0f64 / 3.0).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn eval_matches_brute_force() {
        let grid = SplineGrid::se2(12, 10, 8, 4, 3, 6, 3).unwrap();
        let t = random_template(grid.clone(), 7);
        let (sk, sl, sm) = (grid.s_k(), grid.s_l(), grid.s_m());
        let brute = |x: f64, y: f64, th: f64| {
            let mut s = 0.0;
            for k in 1..=grid.n_k {
                for l in 1..=grid.n_l {
                    for m in 1..=grid.n_m {
                        let mut bt = 0.0;
                        for j in -3..=3 {
                            bt += bspline_eval(3, (th - m as f64 * sm) / sm + (j * grid.n_m as i64) as f64);
                        }
                        s += t.coefficients[grid.index(k - 1, l - 1, m - 1)]
                            * bspline_eval(3, ((x + 1.0) - k as f64 * sk) / sk)
                            * bspline_eval(3, ((y + 1.0) - l as f64 * sl) / sl)
                            * bt;
                    }
                }
            }
            s
        };
        for (x, y, th) in [(0.0, 0.0, 0.0), (3.3, 7.1, 1.0), (11.0, 9.0, 6.2), (5.5, 2.5, -1.0), (1.0, 1.0, 13.0)] {
            let a = t.eval(&[x, y, th]).unwrap();
            let b = brute(x, y, th);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rasterize_matches_eval() {
        let grid = SplineGrid::se2(9, 7, 6, 3, 3, 4, 3).unwrap();
        let t = random_template(grid.clone(), 3);
        let r = t.rasterize();
        assert_eq!(r.shape(), &[9, 7, 6]);
        for i in 0..9 {
            for j in 0..7 {
                for th in 0..6 {
                    let e = t.eval(&[i as f64, j as f64, th as f64 * grid.theta_step()]).unwrap();
                    assert!((r[[i, j, th]] - e).abs() < 1e-12);
                }
            }
        }
        let r2 = SplineTemplate::zeros(SplineGrid::r2(5, 6, 2, 2, 3).unwrap(), Loss::Linear).rasterize();
        assert_eq!(r2.shape(), &[5, 6]);
        assert!(r2.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sampling_row_is_inner_product_with_raster() {
        let grid = SplineGrid::se2(11, 9, 8, 4, 3, 4, 3).unwrap();
        let t = random_template(grid.clone(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patch = ArrayD::from_shape_fn(grid.pixel_shape(), |_| rng.random_range(-1.0..1.0));
        let row = build_sampling_row(&patch.view(), &grid).unwrap();
        let sc: f64 = row.iter().zip(&t.coefficients).map(|(a, b)| a * b).sum();
        let raster = t.rasterize();
        let ip: f64 = raster.iter().zip(patch.iter()).map(|(a, b)| a * b).sum::<f64>() * grid.theta_step();
        assert!((sc - ip).abs() < 1e-10, "{sc} vs {ip}");

        let grid2 = SplineGrid::r2(13, 10, 4, 3, 3).unwrap();
        let t2 = random_template(grid2.clone(), 12);
        let patch2 = ArrayD::from_shape_fn(grid2.pixel_shape(), |_| rng.random_range(-1.0..1.0));
        let row2 = build_sampling_row(&patch2.view(), &grid2).unwrap();
        let sc2: f64 = row2.iter().zip(&t2.coefficients).map(|(a, b)| a * b).sum();
        let ip2: f64 = t2.rasterize().iter().zip(patch2.iter()).map(|(a, b)| a * b).sum();
        assert!((sc2 - ip2).abs() < 1e-10);
    }

    #[test]
    fn sampling_row_of_basis_function() {
        let grid = SplineGrid::r2(24, 24, 6, 6, 3).unwrap();
        let mut t = SplineTemplate::zeros(grid.clone(), Loss::Linear);
        let target = grid.index(2, 3, 0);
        t.coefficients[target] = 1.0;
        let patch = t.rasterize();
        let row = build_sampling_row(&patch.view(), &grid).unwrap();
        // Direct-summation Gram row.
        for k in 0..6 {
            for l in 0..6 {
                let mut g = 0.0;
                for i in 0..24 {
                    for j in 0..24 {
                        g += grid.basis_x(k, i as f64) * grid.basis_y(l, j as f64) * grid.basis_x(2, i as f64)
                            * grid.basis_y(3, j as f64);
                    }
                }
                assert!((row[grid.index(k, l, 0)] - g).abs() < 1e-12);
            }
        }
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, target);
    }

    #[test]
    fn sampling_row_shape_errors() {
        let grid = SplineGrid::r2(10, 10, 3, 3, 3).unwrap();
        let patch = ArrayD::<f64>::zeros(vec![10, 9]);
        assert!(matches!(
            build_sampling_row(&patch.view(), &grid),
            Err(Error::ShapeMismatch { .. })
        ));
        let zero = ArrayD::<f64>::zeros(vec![10, 10]);
        assert!(build_sampling_row(&zero.view(), &grid).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn template_file_round_trip_and_layout() {
        let grid = SplineGrid::se2(5, 4, 6, 2, 2, 3, 3).unwrap();
        let t = random_template(grid, 9);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SE2T");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(buf[6], 1);
        assert_eq!(buf[7], 0);
        assert_eq!(u16::from_le_bytes([buf[8], buf[9]]), 3);
        let dims: Vec<u32> = (0..6)
            .map(|i| u32::from_le_bytes(buf[10 + 4 * i..14 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(dims, vec![2, 2, 3, 5, 4, 6]);
        assert_eq!(buf.len(), 34 + 8 * 12);
        let first = f64::from_le_bytes(buf[34..42].try_into().unwrap());
        assert_eq!(first, t.coefficients[0]);
        let back = SplineTemplate::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(SplineTemplate::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        assert!(SplineTemplate::read_from(&mut &buf[..40]).is_err());
    }

    proptest! {
        #[test]
        fn sampling_row_is_linear(seed in 0u64..1000, a in -3.0..3.0f64, b in -3.0..3.0f64) {
            let grid = SplineGrid::se2(8, 7, 4, 3, 3, 4, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = ArrayD::from_shape_fn(grid.pixel_shape(), |_| rng.random_range(-1.0..1.0));
            let g = ArrayD::from_shape_fn(grid.pixel_shape(), |_| rng.random_range(-1.0..1.0));
            let combo = &f * a + &g * b;
            let rf = build_sampling_row(&f.view(), &grid).unwrap();
            let rg = build_sampling_row(&g.view(), &grid).unwrap();
            let rc = build_sampling_row(&combo.view(), &grid).unwrap();
            for i in 0..rc.len() {
                prop_assert!((rc[i] - (a * rf[i] + b * rg[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn splines_are_even_and_nonnegative(n in 0usize..8, x in -5.0..5.0f64) {
            let v = bspline_eval(n, x);
            prop_assert!(v >= 0.0);
            // Even symmetry except at the half-open ends of the support.
            if (x.abs() - (n + 1) as f64 / 2.0).abs() > 1e-9 {
                prop_assert!((v - bspline_eval(n, -x)).abs() < 1e-14);
            }
        }

        #[test]
        fn periodic_spline_is_periodic(n in 0usize..6, u in -20.0..20.0f64, p in 6usize..20) {
            let a = bspline_periodic(n, u, p);
            let b = bspline_periodic(n, u + p as f64, p);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
