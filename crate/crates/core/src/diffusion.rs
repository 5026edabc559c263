//! Resolvent hypo-elliptic diffusion kernels on SE(2): the single-spike
//! regression problem and a Monte Carlo simulation of the random pencil
//! process it should agree with up to scale.

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;

use crate::bspline::{bspline_eval, bspline_periodic, build_sampling_row, Domain, SplineGrid, SplineTemplate, Loss};
use crate::error::{Error, Result};
use crate::linalg::conjugate_gradient;
use crate::regularizers::{build_r_se2, periodic_gram, spline_gram, DiffusionWeights, KroneckerTerm, RegularizerKind, RegularizerMatrix};

/// Sampling lattice of a kernel: unit pixels with the origin at pixel
/// `(n_x/2, n_y/2)` and `n_theta` orientations starting at θ = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelGrid {
    pub n_x: usize,
    pub n_y: usize,
    pub n_theta: usize,
}

impl KernelGrid {
    pub fn new(n_x: usize, n_y: usize, n_theta: usize) -> Result<Self> {
        if n_x == 0 || n_y == 0 || n_theta == 0 {
            return Err(Error::InvalidParameter("kernel grid dimensions must be positive".into()));
        }
        Ok(Self { n_x, n_y, n_theta })
    }

    pub fn theta_step(&self) -> f64 {
        TAU / self.n_theta as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.theta_step()
    }

    pub fn origin(&self) -> (usize, usize) {
        (self.n_x / 2, self.n_y / 2)
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.n_x, self.n_y, self.n_theta)
    }
}

/// Density sampled on a [`KernelGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct ResolventKernel {
    pub grid: KernelGrid,
    pub values: Array3<f64>,
    pub alpha: f64,
    pub weights: DiffusionWeights,
}

impl ResolventKernel {
    pub fn mass(&self) -> f64 {
        self.values.sum() * self.grid.cell_volume()
    }

    /// Rescale to unit mass.
    pub fn normalized(&self) -> Result<Self> {
        let m = self.mass();
        if !(m.abs() > 0.0) || !m.is_finite() {
            return Err(Error::Degenerate("kernel has zero mass".into()));
        }
        Ok(Self {
            values: &self.values / m,
            ..self.clone()
        })
    }

    /// Values along θ through the spatial origin.
    pub fn theta_profile(&self) -> Array1<f64> {
        let (x0, y0) = self.grid.origin();
        self.values.slice(ndarray::s![x0, y0, ..]).to_owned()
    }

    /// Values along x through the origin on the θ = 0 layer.
    pub fn x_profile(&self) -> Array1<f64> {
        let (_, y0) = self.grid.origin();
        self.values.slice(ndarray::s![.., y0, 0]).to_owned()
    }

    /// Mass-weighted second moment of the spatial offset from the origin.
    pub fn spatial_second_moment(&self) -> f64 {
        let (x0, y0) = self.grid.origin();
        let mut num = 0.0;
        let mut den = 0.0;
        for ((i, j, _), v) in self.values.indexed_iter() {
            let r2 = (i as f64 - x0 as f64).powi(2) + (j as f64 - y0 as f64).powi(2);
            num += v * r2;
            den += v;
        }
        num / den
    }

    /// Header `SE2K`, three u32 dimensions, α and the three weights as f64,
    /// then the values with θ fastest, all little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"SE2K")?;
        for d in [self.grid.n_x, self.grid.n_y, self.grid.n_theta] {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for v in [self.alpha, self.weights.d_xi, self.weights.d_eta, self.weights.d_theta] {
            w.write_f64::<LittleEndian>(v)?;
        }
        for v in self.values.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SE2K" {
            return Err(Error::Format("not a kernel file (bad magic)".into()));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let grid = KernelGrid::new(dims[0], dims[1], dims[2]).map_err(|e| Error::Format(e.to_string()))?;
        let mut head = [0.0; 4];
        for v in &mut head {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.read_f64::<LittleEndian>()?);
        }
        Ok(Self {
            grid,
            values: Array3::from_shape_vec(grid.shape(), values).expect("length matches the header"),
            alpha: head[0],
            weights: DiffusionWeights::new(head[1], head[2], head[3]).map_err(|e| Error::Format(e.to_string()))?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Mass term of the single-spike system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MassMatrix {
    /// `μI` on the coefficients.
    Identity,
    /// `μG`, the exact `L²` Gram matrix of the basis.
    Gram,
}

/// `(λ, μ)` whose resolvent rate `μ/λ` is `alpha` for the given mass term.
/// With the identity mass, `μ` is the basis cell volume so that `μI`
/// approximates the `L²` norm.
pub fn resolvent_weights(grid: &SplineGrid, alpha: f64, mass: MassMatrix) -> Result<(f64, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("decay rate must be positive, got {alpha}")));
    }
    let mu = match mass {
        MassMatrix::Identity => grid.s_k() * grid.s_l() * grid.s_m(),
        MassMatrix::Gram => 1.0,
    };
    Ok((mu / alpha, mu))
}

fn gram_matrix(grid: &SplineGrid) -> RegularizerMatrix {
    RegularizerMatrix {
        kind: RegularizerKind::Dense,
        dims: [grid.n_k, grid.n_l, grid.n_m],
        terms: vec![KroneckerTerm {
            weight: 1.0,
            factors: [
                spline_gram(grid.n_k, grid.order, grid.s_k()),
                spline_gram(grid.n_l, grid.order, grid.s_l()),
                periodic_gram(grid.n_m, grid.order),
            ],
        }],
    }
}

/// Normal B-spline spike at the patch centre and θ = 0, on the pixel grid.
pub fn spike_patch(grid: &SplineGrid) -> Array3<f64> {
    let (cx, cy) = ((grid.n_x / 2) as f64, (grid.n_y / 2) as f64);
    let dt = grid.theta_step();
    Array3::from_shape_fn((grid.n_x, grid.n_y, grid.n_theta), |(i, j, t)| {
        bspline_eval(grid.order, (i as f64 - cx) / grid.s_k())
            * bspline_eval(grid.order, (j as f64 - cy) / grid.s_l())
            * bspline_periodic(grid.order, t as f64 * dt / grid.s_m(), grid.n_m)
    })
}

/// Coefficients solving `(λR + μM)c = Sᵀ·1` for the single-spike row `S`,
/// scaled by `rhs_scale`.
pub fn solve_single_patch_coefficients(
    grid: &SplineGrid,
    lambda: f64,
    mu: f64,
    d: DiffusionWeights,
    mass: MassMatrix,
    rhs_scale: f64,
) -> Result<Vec<f64>> {
    if grid.domain != Domain::Se2 {
        return Err(Error::DomainMismatch {
            expected: Domain::Se2,
            actual: grid.domain,
        });
    }
    if !(lambda > 0.0) || !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "the single-spike problem needs λ, μ > 0 (λ={lambda}, μ={mu})"
        )));
    }
    let r = build_r_se2(grid, d)?;
    let m = match mass {
        MassMatrix::Identity => RegularizerMatrix::identity([grid.n_k, grid.n_l, grid.n_m]),
        MassMatrix::Gram => gram_matrix(grid),
    };
    let op = RegularizerMatrix::combine(&[(lambda, &r), (mu, &m)], RegularizerKind::Dense);
    let spike = spike_patch(grid).into_dyn();
    let b: Vec<f64> = build_sampling_row(&spike.view(), grid)?.into_iter().map(|v| v * rhs_scale).collect();
    let diag = op.diagonal();
    let res = conjugate_gradient(|v| op.apply(v), &b, &diag, 1e-11, 20 * b.len().max(100))?;
    Ok(res.x)
}

/// How a spline solution is turned into grid values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rasterization {
    /// Point values at the lattice sites.
    Point,
    /// Averages over the lattice cells, comparable with histogram counts.
    CellAverage,
}

/// Average of `f` over `[c − h/2, c + h/2]` by composite Gauss–Legendre.
fn cell_mean(f: impl Fn(f64) -> f64, c: f64, h: f64) -> f64 {
    const PIECES: usize = 16;
    let (x, w) = crate::quadrature::gauss_legendre(4);
    let step = h / PIECES as f64;
    let mut sum = 0.0;
    for p in 0..PIECES {
        let mid = c - 0.5 * h + (p as f64 + 0.5) * step;
        for (xi, wi) in x.iter().zip(&w) {
            sum += wi * 0.5 * f(mid + 0.5 * step * xi);
        }
    }
    sum / PIECES as f64
}

/// Cell-averaged raster of a spline on its own pixel and orientation grid.
pub fn cell_average_raster(grid: &SplineGrid, coefficients: &[f64]) -> Result<Array3<f64>> {
    crate::error::check_shape(&[grid.num_coefficients()], &[coefficients.len()])?;
    let dt = grid.theta_step();
    let bx = ndarray::Array2::from_shape_fn((grid.n_x, grid.n_k), |(i, k)| cell_mean(|x| grid.basis_x(k, x), i as f64, 1.0));
    let by = ndarray::Array2::from_shape_fn((grid.n_y, grid.n_l), |(j, l)| cell_mean(|y| grid.basis_y(l, y), j as f64, 1.0));
    let bt = ndarray::Array2::from_shape_fn((grid.n_theta, grid.n_m), |(t, m)| {
        cell_mean(|th| grid.basis_theta(m, th), t as f64 * dt, dt)
    });
    let mut out = Array3::zeros((grid.n_x, grid.n_y, grid.n_theta));
    for t in 0..grid.n_theta {
        let ct = ndarray::Array2::from_shape_fn((grid.n_k, grid.n_l), |(k, l)| {
            (0..grid.n_m).map(|m| coefficients[grid.index(k, l, m)] * bt[[t, m]]).sum::<f64>()
        });
        out.index_axis_mut(Axis(2), t).assign(&bx.dot(&ct).dot(&by.t()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SinglePatchOptions {
    pub mass: MassMatrix,
    pub raster: Rasterization,
}

impl Default for SinglePatchOptions {
    fn default() -> Self {
        Self {
            mass: MassMatrix::Gram,
            raster: Rasterization::CellAverage,
        }
    }
}

/// Solve the single-spike problem with the `L²` mass term and cell-averaged
/// output, normalized to unit mass.
pub fn solve_single_patch(grid: &SplineGrid, lambda: f64, mu: f64, d: DiffusionWeights) -> Result<ResolventKernel> {
    solve_single_patch_with(grid, lambda, mu, d, SinglePatchOptions::default())
}

pub fn solve_single_patch_with(
    grid: &SplineGrid,
    lambda: f64,
    mu: f64,
    d: DiffusionWeights,
    opts: SinglePatchOptions,
) -> Result<ResolventKernel> {
    let SinglePatchOptions { mass, raster } = opts;
    let c = solve_single_patch_coefficients(grid, lambda, mu, d, mass, 1.0)?;
    let raster = match raster {
        Rasterization::Point => SplineTemplate::new(grid.clone(), Loss::Linear, c)?.rasterize3(),
        Rasterization::CellAverage => cell_average_raster(grid, &c)?,
    };
    // Negative lobes from the truncated basis are tiny; clip them.
    let max = raster.iter().cloned().fold(0.0, f64::max);
    let min = raster.iter().cloned().fold(0.0, f64::min);
    if min < -1e-6 * max {
        log::warn!("single-spike solution has negative values down to {:.3e} of the peak", min / max);
    }
    let kernel = ResolventKernel {
        grid: KernelGrid::new(grid.n_x, grid.n_y, grid.n_theta)?,
        values: raster.mapv(|v| v.max(0.0)),
        alpha: mu / lambda,
        weights: d,
    };
    kernel.normalized()
}

/// Optional smooth starting distribution: offsets drawn from the normal
/// B-spline densities used for the spike.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpikeStart {
    pub order: usize,
    pub s_x: f64,
    pub s_y: f64,
    pub s_theta: f64,
}

impl SpikeStart {
    pub fn from_grid(grid: &SplineGrid) -> Self {
        Self {
            order: grid.order,
            s_x: grid.s_k(),
            s_y: grid.s_l(),
            s_theta: grid.s_m(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PencilParams {
    pub alpha: f64,
    pub d_xi: f64,
    pub d_theta: f64,
    pub n_samples: usize,
    /// Time step of the integrator; `0.01/α` when `None`.
    pub step: Option<f64>,
    pub grid: KernelGrid,
    pub start: Option<SpikeStart>,
    pub seed: u64,
}

impl PencilParams {
    pub fn new(alpha: f64, d: DiffusionWeights, n_samples: usize, grid: KernelGrid, seed: u64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("decay rate must be positive, got {alpha}")));
        }
        Ok(Self {
            alpha,
            d_xi: d.d_xi,
            d_theta: d.d_theta,
            n_samples,
            step: None,
            grid,
            start: None,
            seed,
        })
    }

    pub fn dt(&self) -> f64 {
        self.step.unwrap_or(0.01 / self.alpha)
    }
}

/// Sum of `order + 1` uniforms on `[−½, ½]`, i.e. a draw from `B^order`.
fn sample_bspline(rng: &mut ChaCha8Rng, order: usize) -> f64 {
    (0..=order).map(|_| rng.random::<f64>() - 0.5).sum()
}

const CHUNK: usize = 20_000;

/// Endpoint density of the random pencil with exponential travel time,
/// histogrammed on the grid (samples outside are dropped) and normalized
/// to unit mass.
///
/// Each step is split symmetrically: half an orientation step, a full step
/// along the current orientation, then the other half.
pub fn simulate_pencil(p: &PencilParams) -> Result<ResolventKernel> {
    let grid = p.grid;
    let exp = Exp::new(p.alpha).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let dt = p.dt();
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    let (x0, y0) = grid.origin();
    let dth = grid.theta_step();
    let chunks = p.n_samples.div_ceil(CHUNK);
    let hist = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            // Per-chunk streams keep the result independent of thread count.
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            rng.set_stream(chunk as u64);
            let mut h = Array3::<f64>::zeros(grid.shape());
            let count = CHUNK.min(p.n_samples - chunk * CHUNK);
            for _ in 0..count {
                let (mut x, mut y, mut th) = match p.start {
                    None => (0.0, 0.0, 0.0),
                    Some(s) => (
                        s.s_x * sample_bspline(&mut rng, s.order),
                        s.s_y * sample_bspline(&mut rng, s.order),
                        s.s_theta * sample_bspline(&mut rng, s.order),
                    ),
                };
                let mut remaining: f64 = rng.sample(exp);
                while remaining > 0.0 {
                    let h_t = remaining.min(dt);
                    remaining -= h_t;
                    let a: f64 = rng.sample(StandardNormal);
                    let b: f64 = rng.sample(StandardNormal);
                    let c: f64 = rng.sample(StandardNormal);
                    let th_scale = (p.d_theta * h_t).sqrt();
                    th += th_scale * a;
                    let step = (2.0 * p.d_xi * h_t).sqrt() * b;
                    x += step * th.cos();
                    y += step * th.sin();
                    th += th_scale * c;
                }
                let i = (x + x0 as f64).round();
                let j = (y + y0 as f64).round();
                if i < 0.0 || j < 0.0 || i >= grid.n_x as f64 || j >= grid.n_y as f64 {
                    continue;
                }
                let t = ((th / dth).round() as i64).rem_euclid(grid.n_theta as i64) as usize;
                h[[i as usize, j as usize, t]] += 1.0;
            }
            h
        })
        .reduce(|| Array3::zeros(grid.shape()), |a, b| a + b);
    let kernel = ResolventKernel {
        grid,
        values: hist,
        alpha: p.alpha,
        weights: DiffusionWeights::new(p.d_xi, 0.0, p.d_theta)?,
    };
    kernel.normalized()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelComparison {
    /// `‖a − b‖₂ / ‖b‖₂` after unit-mass normalization.
    pub relative_l2: f64,
    pub theta_profiles: (Array1<f64>, Array1<f64>),
    pub x_profiles: (Array1<f64>, Array1<f64>),
}

impl KernelComparison {
    /// CSV with columns `axis,index,coordinate,a,b`.
    pub fn write_profiles_csv(&self, path: &Path, grid: &KernelGrid) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["axis", "index", "coordinate", "a", "b"])?;
        let (x0, _) = grid.origin();
        for (i, (a, b)) in self.theta_profiles.0.iter().zip(self.theta_profiles.1.iter()).enumerate() {
            let coord = i as f64 * grid.theta_step();
            w.write_record(["theta".to_string(), i.to_string(), format!("{coord:.6}"), format!("{a:.9e}"), format!("{b:.9e}")])?;
        }
        for (i, (a, b)) in self.x_profiles.0.iter().zip(self.x_profiles.1.iter()).enumerate() {
            let coord = i as f64 - x0 as f64;
            w.write_record(["x".to_string(), i.to_string(), format!("{coord}"), format!("{a:.9e}"), format!("{b:.9e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn compare_kernels(a: &ResolventKernel, b: &ResolventKernel) -> Result<KernelComparison> {
    if a.grid != b.grid {
        return Err(Error::ShapeMismatch {
            expected: vec![b.grid.n_x, b.grid.n_y, b.grid.n_theta],
            actual: vec![a.grid.n_x, a.grid.n_y, a.grid.n_theta],
        });
    }
    let (a, b) = (a.normalized()?, b.normalized()?);
    let diff = (&a.values - &b.values).mapv(|v| v * v).sum().sqrt();
    let base = b.values.mapv(|v| v * v).sum().sqrt();
    Ok(KernelComparison {
        relative_l2: diff / base,
        theta_profiles: (a.theta_profile(), b.theta_profile()),
        x_profiles: (a.x_profile(), b.x_profile()),
    })
}

/// `K(g⁻¹)` for the layer rotations that map the lattice onto itself
/// (multiples of a quarter turn); other layers are `None`.
pub fn inverse_layer(k: &ResolventKernel, layer: usize) -> Option<ndarray::Array2<f64>> {
    let n = k.grid.n_theta;
    if !(4 * layer).is_multiple_of(n) {
        return None;
    }
    let quarter = (4 * layer / n) % 4;
    let (x0, y0) = k.grid.origin();
    let inv = (n - layer) % n;
    let src = k.values.index_axis(Axis(2), inv);
    let (nx, ny) = (k.grid.n_x, k.grid.n_y);
    Some(ndarray::Array2::from_shape_fn((nx, ny), |(i, j)| {
        let (x, y) = (i as i64 - x0 as i64, j as i64 - y0 as i64);
        // g⁻¹ = (−R_{−θ}x, −θ).
        let (u, v) = match quarter {
            0 => (-x, -y),
            1 => (-y, x),
            2 => (x, y),
            _ => (y, -x),
        };
        let (a, b) = (u + x0 as i64, v + y0 as i64);
        if a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 {
            0.0
        } else {
            src[[a as usize, b as usize]]
        }
    }))
}
