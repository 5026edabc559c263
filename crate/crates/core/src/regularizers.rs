//! Penalty matrices for spline templates.
//!
//! All penalties are sums of Kronecker products `A ⊗ B ⊗ C` of small
//! per-axis factors (k, l, m order), so they are stored factored and applied
//! matrix-free. The spatial factors are exact integrals over ℝ of products
//! of basis functions and their derivatives, which reduce to values of
//! `B^{2n+1}` and its derivatives at integer offsets. The θ factors are
//! integrals over the full period `[0, 2π)` with periodic wrapping.

use std::f64::consts::TAU;

use log::warn;
use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use crate::bspline::{bspline_derivative, bspline_eval, bspline_periodic, Domain, SplineGrid};
use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

/// Weights of the left-invariant gradient norm
/// `D_ξξ|∂ξT|² + D_ηη|∂ηT|² + D_θθ|∂θT|²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionWeights {
    pub d_xi: f64,
    pub d_eta: f64,
    pub d_theta: f64,
}

impl DiffusionWeights {
    pub fn new(d_xi: f64, d_eta: f64, d_theta: f64) -> Result<Self> {
        let d = Self { d_xi, d_eta, d_theta };
        if [d_xi, d_eta, d_theta].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("diffusion weights must be non-negative: {d:?}")));
        }
        Ok(d)
    }

    pub fn is_zero(&self) -> bool {
        self.d_xi == 0.0 && self.d_eta == 0.0 && self.d_theta == 0.0
    }
}

impl Default for DiffusionWeights {
    fn default() -> Self {
        Self {
            d_xi: 1.0,
            d_eta: 0.0,
            d_theta: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizerKind {
    Identity,
    R2Smooth,
    Se2Smooth,
    /// An explicit matrix, stored as a single `Q ⊗ 1 ⊗ 1` term.
    Dense,
}

/// `weight · A ⊗ B ⊗ C`.
#[derive(Clone, Debug)]
pub struct KroneckerTerm {
    pub weight: f64,
    pub factors: [Array2<f64>; 3],
}

/// Symmetric penalty matrix stored as a sum of Kronecker terms.
#[derive(Clone, Debug)]
pub struct RegularizerMatrix {
    pub kind: RegularizerKind,
    pub dims: [usize; 3],
    pub terms: Vec<KroneckerTerm>,
}

impl RegularizerMatrix {
    pub fn identity(dims: [usize; 3]) -> Self {
        Self {
            kind: RegularizerKind::Identity,
            dims,
            terms: vec![KroneckerTerm {
                weight: 1.0,
                factors: dims.map(Array2::eye),
            }],
        }
    }

    pub fn from_dense(q: Array2<f64>) -> Self {
        let p = q.nrows();
        assert_eq!(q.dim(), (p, p), "penalty must be square");
        Self {
            kind: RegularizerKind::Dense,
            dims: [p, 1, 1],
            terms: vec![KroneckerTerm {
                weight: 1.0,
                factors: [q, Array2::ones((1, 1)), Array2::ones((1, 1))],
            }],
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().product()
    }

    /// `R v` without materializing `R`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let [nk, nl, nm] = self.dims;
        assert_eq!(v.len(), nk * nl * nm, "vector length does not match regularizer");
        let mut out = vec![0.0; v.len()];
        let vv = ArrayView2::from_shape((nk * nl, nm), v).expect("contiguous");
        for t in &self.terms {
            if t.weight == 0.0 {
                continue;
            }
            let [a, b, c] = &t.factors;
            // Contract m, then l, then k.
            let t1 = vv.dot(&c.t()); // (nk·nl, nm)
            let mut t2 = Array2::<f64>::zeros((nk * nl, nm));
            for k in 0..nk {
                let slab = t1.slice(ndarray::s![k * nl..(k + 1) * nl, ..]);
                let r = b.dot(&slab);
                t2.slice_mut(ndarray::s![k * nl..(k + 1) * nl, ..]).assign(&r);
            }
            let t2 = t2.into_shape_with_order((nk, nl * nm)).expect("contiguous");
            let t3 = a.dot(&t2);
            for (o, x) in out.iter_mut().zip(t3.iter()) {
                *o += t.weight * x;
            }
        }
        out
    }

    pub fn quad_form(&self, c: &[f64]) -> f64 {
        self.apply(c).iter().zip(c).map(|(a, b)| a * b).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let [nk, nl, nm] = self.dims;
        let mut d = vec![0.0; self.dim()];
        for t in &self.terms {
            let [a, b, c] = &t.factors;
            for k in 0..nk {
                for l in 0..nl {
                    for m in 0..nm {
                        d[(k * nl + l) * nm + m] += t.weight * a[[k, k]] * b[[l, l]] * c[[m, m]];
                    }
                }
            }
        }
        d
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let [nk, nl, nm] = self.dims;
        let p = self.dim();
        let mut r = DMatrix::zeros(p, p);
        for t in &self.terms {
            let [a, b, c] = &t.factors;
            for k in 0..nk {
                for k2 in 0..nk {
                    let av = a[[k, k2]];
                    if av == 0.0 {
                        continue;
                    }
                    for l in 0..nl {
                        for l2 in 0..nl {
                            let ab = av * b[[l, l2]];
                            if ab == 0.0 {
                                continue;
                            }
                            for m in 0..nm {
                                for m2 in 0..nm {
                                    r[((k * nl + l) * nm + m, (k2 * nl + l2) * nm + m2)] +=
                                        t.weight * ab * c[[m, m2]];
                                }
                            }
                        }
                    }
                }
            }
        }
        r
    }

    /// `Σ w_i R_i` over regularizers sharing one grid.
    pub fn combine(parts: &[(f64, &RegularizerMatrix)], kind: RegularizerKind) -> Self {
        let dims = parts.first().map(|p| p.1.dims).unwrap_or([0, 0, 0]);
        let terms = parts
            .iter()
            .flat_map(|(w, r)| {
                assert_eq!(r.dims, dims, "combining regularizers of different grids");
                r.terms.iter().map(move |t| KroneckerTerm {
                    weight: w * t.weight,
                    factors: t.factors.clone(),
                })
            })
            .collect();
        Self { kind, dims, terms }
    }
}

/// `∫ B^n(x/s − k) B^n(x/s − k') dx = s·B^{2n+1}(k' − k)`.
pub fn spline_gram(count: usize, order: usize, spacing: f64) -> Array2<f64> {
    Array2::from_shape_fn((count, count), |(k, k2)| spacing * bspline_eval(2 * order + 1, k2 as f64 - k as f64))
}

/// `∫ ∂ₓB^n(x/s − k) ∂ₓB^n(x/s − k') dx = −B''^{2n+1}(k' − k)/s`.
pub fn spline_stiffness(count: usize, order: usize, spacing: f64) -> Result<Array2<f64>> {
    second_derivative_check(order)?;
    Ok(Array2::from_shape_fn((count, count), |(k, k2)| {
        -bspline_derivative(2 * order + 1, 2, k2 as f64 - k as f64).expect("order checked") / spacing
    }))
}

/// `∫ ∂ₓB^n(x/s − k) B^n(x/s − k') dx = B'^{2n+1}(k' − k)`.
pub fn spline_cross(count: usize, order: usize) -> Array2<f64> {
    Array2::from_shape_fn((count, count), |(k, k2)| {
        bspline_derivative(2 * order + 1, 1, k2 as f64 - k as f64).expect("order ≥ 0")
    })
}

fn periodic_sum(order: usize, diff: f64, period: usize, f: impl Fn(f64) -> f64) -> f64 {
    let p = period as f64;
    let reach = ((order + 1) as f64 / p).ceil() as i64 + 1;
    (-reach..=reach).map(|j| f(diff + j as f64 * p)).sum()
}

/// Periodic θ Gram matrix `∫₀^{2π} Θ_m Θ_m' dθ`.
pub fn periodic_gram(count: usize, order: usize) -> Array2<f64> {
    let s = TAU / count as f64;
    Array2::from_shape_fn((count, count), |(m, m2)| {
        s * periodic_sum(2 * order + 1, m2 as f64 - m as f64, count, |x| bspline_eval(2 * order + 1, x))
    })
}

/// Periodic θ stiffness matrix `∫₀^{2π} Θ'_m Θ'_m' dθ`.
pub fn periodic_stiffness(count: usize, order: usize) -> Result<Array2<f64>> {
    second_derivative_check(order)?;
    let s = TAU / count as f64;
    Ok(Array2::from_shape_fn((count, count), |(m, m2)| {
        -periodic_sum(2 * order + 1, m2 as f64 - m as f64, count, |x| {
            bspline_derivative(2 * order + 1, 2, x).expect("order checked")
        }) / s
    }))
}

fn second_derivative_check(order: usize) -> Result<()> {
    if order == 0 {
        return Err(Error::InvalidParameter(
            "smoothing penalties need spline order n ≥ 1".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrigWeight {
    One,
    CosCos,
    CosSin,
    SinSin,
}

impl TrigWeight {
    fn eval(self, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        match self {
            TrigWeight::One => 1.0,
            TrigWeight::CosCos => c * c,
            TrigWeight::CosSin => c * s,
            TrigWeight::SinSin => s * s,
        }
    }
}

impl std::str::FromStr for TrigWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" => Ok(TrigWeight::One),
            "cos2" | "coscos" => Ok(TrigWeight::CosCos),
            "cossin" => Ok(TrigWeight::CosSin),
            "sin2" | "sinsin" => Ok(TrigWeight::SinSin),
            _ => Err(Error::InvalidParameter(format!("unknown trig weight '{s}'"))),
        }
    }
}

/// Quadrature nodes per half-knot interval of the θ factor.
const THETA_NODES: usize = 8;

/// `∫₀^{2π} w(θ) Θ_m(θ) Θ_m'(θ) dθ` for zero-based θ knots `m, m'`.
pub fn trig_weighted_gram(m: usize, m2: usize, weight: TrigWeight, grid: &SplineGrid) -> Result<f64> {
    if grid.domain != Domain::Se2 {
        return Err(Error::InvalidParameter("trig-weighted Gram needs an SE2 grid".into()));
    }
    Ok(trig_gram(m, m2, weight, grid.n_m, grid.order))
}

fn trig_gram(m: usize, m2: usize, weight: TrigWeight, n_m: usize, order: usize) -> f64 {
    let (x, w) = gauss_legendre(THETA_NODES);
    let s = TAU / n_m as f64;
    let mut total = 0.0;
    // Half-knot intervals cover the breakpoints for both parities of n.
    for iv in 0..2 * n_m {
        let lo = iv as f64 * 0.5 * s;
        let half = 0.25 * s;
        let mid = lo + half;
        for (xi, wi) in x.iter().zip(&w) {
            let th = mid + half * xi;
            let u = th / s;
            let a = bspline_periodic(order, u - (m + 1) as f64, n_m);
            if a == 0.0 {
                continue;
            }
            let b = bspline_periodic(order, u - (m2 + 1) as f64, n_m);
            total += wi * half * weight.eval(th) * a * b;
        }
    }
    total
}

pub fn trig_gram_matrix(weight: TrigWeight, n_m: usize, order: usize) -> Array2<f64> {
    let mut g = Array2::zeros((n_m, n_m));
    for m in 0..n_m {
        for m2 in m..n_m {
            let v = trig_gram(m, m2, weight, n_m, order);
            g[[m, m2]] = v;
            g[[m2, m]] = v;
        }
    }
    g
}

/// Isotropic gradient penalty `∫_{ℝ²} |∇T|²` on an ℝ² grid.
pub fn build_r_r2(grid: &SplineGrid) -> Result<RegularizerMatrix> {
    if grid.domain != Domain::R2 {
        return Err(Error::DomainMismatch {
            expected: Domain::R2,
            actual: grid.domain,
        });
    }
    let n = grid.order;
    let gx = spline_gram(grid.n_k, n, grid.s_k());
    let gy = spline_gram(grid.n_l, n, grid.s_l());
    let kx = spline_stiffness(grid.n_k, n, grid.s_k())?;
    let ky = spline_stiffness(grid.n_l, n, grid.s_l())?;
    let one = Array2::eye(1);
    Ok(RegularizerMatrix {
        kind: RegularizerKind::R2Smooth,
        dims: [grid.n_k, grid.n_l, 1],
        terms: vec![
            KroneckerTerm {
                weight: 1.0,
                factors: [kx, gy, one.clone()],
            },
            KroneckerTerm {
                weight: 1.0,
                factors: [gx, ky, one],
            },
        ],
    })
}

/// The three left-invariant components `(R_ξ, R_η, R_θ)` on an SE(2) grid.
pub fn build_r_se2_components(grid: &SplineGrid) -> Result<[RegularizerMatrix; 3]> {
    if grid.domain != Domain::Se2 {
        return Err(Error::DomainMismatch {
            expected: Domain::Se2,
            actual: grid.domain,
        });
    }
    let n = grid.order;
    let gx = spline_gram(grid.n_k, n, grid.s_k());
    let gy = spline_gram(grid.n_l, n, grid.s_l());
    let kx = spline_stiffness(grid.n_k, n, grid.s_k())?;
    let ky = spline_stiffness(grid.n_l, n, grid.s_l())?;
    let cx = spline_cross(grid.n_k, n);
    let cy = spline_cross(grid.n_l, n);
    let tcc = trig_gram_matrix(TrigWeight::CosCos, grid.n_m, n);
    let tcs = trig_gram_matrix(TrigWeight::CosSin, grid.n_m, n);
    let tss = trig_gram_matrix(TrigWeight::SinSin, grid.n_m, n);
    let tdd = periodic_stiffness(grid.n_m, n)?;
    let dims = [grid.n_k, grid.n_l, grid.n_m];
    let term = |w: f64, a: &Array2<f64>, b: &Array2<f64>, c: &Array2<f64>| KroneckerTerm {
        weight: w,
        factors: [a.clone(), b.clone(), c.clone()],
    };
    let cyt = cy.t().to_owned();
    let cxt = cx.t().to_owned();
    let xi = RegularizerMatrix {
        kind: RegularizerKind::Se2Smooth,
        dims,
        terms: vec![
            term(1.0, &kx, &gy, &tcc),
            term(1.0, &cx, &cyt, &tcs),
            term(1.0, &cxt, &cy, &tcs),
            term(1.0, &gx, &ky, &tss),
        ],
    };
    let eta = RegularizerMatrix {
        kind: RegularizerKind::Se2Smooth,
        dims,
        terms: vec![
            term(1.0, &kx, &gy, &tss),
            term(-1.0, &cx, &cyt, &tcs),
            term(-1.0, &cxt, &cy, &tcs),
            term(1.0, &gx, &ky, &tcc),
        ],
    };
    let theta = RegularizerMatrix {
        kind: RegularizerKind::Se2Smooth,
        dims,
        terms: vec![term(1.0, &gx, &gy, &tdd)],
    };
    Ok([xi, eta, theta])
}

/// Left-invariant penalty `∫_{SE(2)} ‖∇T‖²_D`.
pub fn build_r_se2(grid: &SplineGrid, d: DiffusionWeights) -> Result<RegularizerMatrix> {
    if d.is_zero() {
        warn!("all diffusion weights are zero; the smoothing penalty vanishes");
    }
    let [xi, eta, theta] = build_r_se2_components(grid)?;
    Ok(RegularizerMatrix::combine(
        &[(d.d_xi, &xi), (d.d_eta, &eta), (d.d_theta, &theta)],
        RegularizerKind::Se2Smooth,
    ))
}

/// Smoothing penalty for either domain.
pub fn build_regularizer(grid: &SplineGrid, d: DiffusionWeights) -> Result<RegularizerMatrix> {
    match grid.domain {
        Domain::R2 => build_r_r2(grid),
        Domain::Se2 => build_r_se2(grid, d),
    }
}
