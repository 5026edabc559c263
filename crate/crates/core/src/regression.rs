//! Template coefficients by penalized least squares and penalized logistic
//! regression, and generalized cross-validation (GCV) for the penalty
//! weights.
//!
//! The penalty is `Q = λR + μI`. The linear energy is
//! `‖Sc − y‖² + cᵀQc`; the logistic objective is the log-likelihood minus
//! `½cᵀQc`, so both share the normal matrix `SᵀWS + Q`.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array3, ArrayD, Axis};
use rayon::prelude::*;

use crate::bspline::{build_sampling_matrix, Loss, SamplingBasis, SamplingMatrix, SplineGrid, SplineTemplate};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, conjugate_gradient, DIRECT_LIMIT};
use crate::matching::{build_window, normalize_template, sigmoid};
use crate::regularizers::RegularizerMatrix;

/// Where a training patch came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub image_id: String,
    pub center: (usize, usize),
    pub positive: bool,
}

/// Sampled patches, their rows of `S` and labels.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub patches: Vec<ArrayD<f64>>,
    pub s: SamplingMatrix,
    pub y: DVector<f64>,
    pub records: Vec<PatchRecord>,
}

impl TrainingSet {
    /// Labels are taken from the records.
    pub fn new(grid: &SplineGrid, patches: Vec<ArrayD<f64>>, records: Vec<PatchRecord>) -> Result<Self> {
        if patches.len() != records.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![patches.len()],
                actual: vec![records.len()],
            });
        }
        let s = build_sampling_matrix(&patches, grid)?;
        let y = DVector::from_iterator(records.len(), records.iter().map(|r| if r.positive { 1.0 } else { 0.0 }));
        Ok(Self {
            patches,
            s,
            y,
            records,
        })
    }

    /// A bare regression problem; `y` need not be binary for the linear loss.
    pub fn from_matrix(s: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if s.nrows() != y.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![s.nrows()],
                actual: vec![y.len()],
            });
        }
        Ok(Self {
            patches: Vec::new(),
            s,
            y,
            records: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_coefficients(&self) -> usize {
        self.s.ncols()
    }

    pub fn num_positive(&self) -> usize {
        self.y.iter().filter(|v| **v == 1.0).count()
    }

    fn check_binary(&self) -> Result<()> {
        if self.y.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::InvalidParameter("logistic labels must be 0 or 1".into()));
        }
        let pos = self.num_positive();
        if pos == 0 || pos == self.len() {
            return Err(Error::InvalidParameter(
                "logistic training needs at least one positive and one negative sample".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonControls {
    pub max_iter: usize,
    /// Relative coefficient change at which iteration stops.
    pub tol: f64,
    /// Probabilities are clamped to `[ε, 1 − ε]` when forming weights.
    pub eps: f64,
}

impl Default for NewtonControls {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            eps: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionConfig {
    pub loss: Loss,
    pub lambda: f64,
    pub mu: f64,
    pub newton: NewtonControls,
}

impl RegressionConfig {
    pub fn new(loss: Loss, lambda: f64, mu: f64) -> Result<Self> {
        check_weights(lambda, mu)?;
        Ok(Self {
            loss,
            lambda,
            mu,
            newton: NewtonControls::default(),
        })
    }
}

fn check_weights(lambda: f64, mu: f64) -> Result<()> {
    if !(lambda >= 0.0) || !(mu >= 0.0) || !lambda.is_finite() || !mu.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "penalty weights must be finite and non-negative (λ={lambda}, μ={mu})"
        )));
    }
    Ok(())
}

/// Normal matrix `SᵀWS + λR + μI`, factored densely or applied matrix-free.
struct Normal<'a> {
    s: &'a DMatrix<f64>,
    r: &'a RegularizerMatrix,
    r_dense: Option<DMatrix<f64>>,
}

impl<'a> Normal<'a> {
    fn new(s: &'a DMatrix<f64>, r: &'a RegularizerMatrix, lambda: f64) -> Result<Self> {
        if r.dim() != s.ncols() {
            return Err(Error::ShapeMismatch {
                expected: vec![s.ncols()],
                actual: vec![r.dim()],
            });
        }
        let r_dense = (lambda > 0.0 && s.ncols() <= DIRECT_LIMIT).then(|| r.to_dense());
        Ok(Self { s, r, r_dense })
    }

    fn direct(&self) -> bool {
        self.s.ncols() <= DIRECT_LIMIT
    }

    fn matrix(&self, w: Option<&DVector<f64>>, lambda: f64, mu: f64) -> DMatrix<f64> {
        let p = self.s.ncols();
        let mut h = match w {
            None => self.s.tr_mul(self.s),
            Some(w) => {
                let mut sw = self.s.clone();
                for (i, mut row) in sw.row_iter_mut().enumerate() {
                    row *= w[i].sqrt();
                }
                sw.tr_mul(&sw)
            }
        };
        if lambda > 0.0 {
            h += self.r_dense.as_ref().expect("dense penalty built for λ > 0") * lambda;
        }
        for i in 0..p {
            h[(i, i)] += mu;
        }
        h
    }

    fn apply(&self, w: Option<&DVector<f64>>, lambda: f64, mu: f64, v: &DVector<f64>) -> DVector<f64> {
        let mut u = self.s * v;
        if let Some(w) = w {
            u.component_mul_assign(w);
        }
        let mut out = self.s.tr_mul(&u) + v * mu;
        if lambda > 0.0 {
            let rv = self.r.apply(v.as_slice());
            for (o, x) in out.iter_mut().zip(rv) {
                *o += lambda * x;
            }
        }
        out
    }

    fn solve(&self, w: Option<&DVector<f64>>, lambda: f64, mu: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if self.direct() {
            let h = self.matrix(w, lambda, mu);
            let chol = cholesky(h.clone())?;
            let mut x = chol.solve(rhs);
            // One step of iterative refinement.
            let res = rhs - &h * &x;
            x += chol.solve(&res);
            Ok(x)
        } else {
            let p = self.s.ncols();
            let rdiag = self.r.diagonal();
            let diag: Vec<f64> = (0..p)
                .map(|j| {
                    let col = self.s.column(j);
                    let d: f64 = match w {
                        None => col.iter().map(|v| v * v).sum(),
                        Some(w) => col.iter().zip(w.iter()).map(|(v, wi)| wi * v * v).sum(),
                    };
                    d + lambda * rdiag[j] + mu
                })
                .collect();
            let r = conjugate_gradient(
                |v| self.apply(w, lambda, mu, &DVector::from_column_slice(v)).as_slice().to_vec(),
                rhs.as_slice(),
                &diag,
                1e-10,
                10 * p,
            )?;
            Ok(DVector::from_vec(r.x))
        }
    }
}

/// Residual bound accepted from the linear solve.
const LINEAR_RESIDUAL_TOL: f64 = 1e-8;

/// `c = (SᵀS + λR + μI)⁻¹ Sᵀy`. A singular system is an error.
pub fn solve_linear(ts: &TrainingSet, r: &RegularizerMatrix, lambda: f64, mu: f64) -> Result<DVector<f64>> {
    check_weights(lambda, mu)?;
    let normal = Normal::new(&ts.s, r, lambda)?;
    let rhs = ts.s.tr_mul(&ts.y);
    let c = normal.solve(None, lambda, mu, &rhs)?;
    let res = (normal.apply(None, lambda, mu, &c) - &rhs).norm();
    let scale = rhs.norm();
    if scale > 0.0 && res > LINEAR_RESIDUAL_TOL * scale {
        return Err(Error::Singular {
            row: 0,
            pivot: res / scale,
        });
    }
    Ok(c)
}

/// Record of a Newton–Raphson run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NewtonTrace {
    pub iterations: usize,
    /// Penalized log-likelihood at the start and after every accepted step.
    pub objective: Vec<f64>,
    pub halvings: usize,
    pub converged: bool,
    /// `‖Sᵀ(y − p) − λRc − μc‖∞` at the returned coefficients.
    pub grad_norm: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct Logistic<'a> {
    ts: &'a TrainingSet,
    r: &'a RegularizerMatrix,
    lambda: f64,
    mu: f64,
}

impl Logistic<'_> {
    fn penalty(&self, c: &DVector<f64>) -> f64 {
        let mut e = self.mu * c.norm_squared();
        if self.lambda > 0.0 {
            e += self.lambda * self.r.quad_form(c.as_slice());
        }
        0.5 * e
    }

    fn objective(&self, c: &DVector<f64>) -> f64 {
        let eta = &self.ts.s * c;
        let ll: f64 = eta.iter().zip(self.ts.y.iter()).map(|(e, y)| y * e - softplus(*e)).sum();
        ll - self.penalty(c)
    }

    fn gradient(&self, c: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let mut g = self.ts.s.tr_mul(&(&self.ts.y - p)) - c * self.mu;
        if self.lambda > 0.0 {
            let rc = self.r.apply(c.as_slice());
            for (gi, x) in g.iter_mut().zip(rc) {
                *gi -= self.lambda * x;
            }
        }
        g
    }
}

fn probabilities(s: &DMatrix<f64>, c: &DVector<f64>) -> DVector<f64> {
    (s * c).map(sigmoid)
}

fn clamped_weights(p: &DVector<f64>, eps: f64) -> DVector<f64> {
    p.map(|v| {
        let v = v.clamp(eps, 1.0 - eps);
        v * (1.0 - v)
    })
}

const MAX_HALVINGS: usize = 40;

/// Penalized logistic regression by damped Newton–Raphson from `c = 0`.
pub fn solve_logistic(
    ts: &TrainingSet,
    r: &RegularizerMatrix,
    lambda: f64,
    mu: f64,
    ctl: &NewtonControls,
) -> Result<(DVector<f64>, NewtonTrace)> {
    check_weights(lambda, mu)?;
    ts.check_binary()?;
    if ts.len() < ts.num_coefficients() && ts.num_coefficients() <= DIRECT_LIMIT && (lambda > 0.0 || mu > 0.0) {
        let normal = Normal::new(&ts.s, r, lambda)?;
        let prob = Logistic { ts, r, lambda, mu };
        if let Some(out) = solve_logistic_dual(&prob, &normal, ctl)? {
            return Ok(out);
        }
    }
    solve_logistic_primal(ts, r, lambda, mu, ctl)
}

fn solve_logistic_primal(
    ts: &TrainingSet,
    r: &RegularizerMatrix,
    lambda: f64,
    mu: f64,
    ctl: &NewtonControls,
) -> Result<(DVector<f64>, NewtonTrace)> {
    let normal = Normal::new(&ts.s, r, lambda)?;
    let prob = Logistic { ts, r, lambda, mu };
    let mut c = DVector::zeros(ts.num_coefficients());
    let mut obj = prob.objective(&c);
    let mut trace = NewtonTrace {
        objective: vec![obj],
        ..Default::default()
    };
    for _ in 0..ctl.max_iter {
        let p = probabilities(&ts.s, &c);
        let g = prob.gradient(&c, &p);
        if g.amax() == 0.0 {
            trace.converged = true;
            break;
        }
        let w = clamped_weights(&p, ctl.eps);
        // c + H⁻¹g equals H⁻¹SᵀWz with z = Sc + W⁻¹(y − p).
        let delta = normal.solve(Some(&w), lambda, mu, &g)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &c + &delta * t;
            let o = prob.objective(&trial);
            if o >= obj {
                accepted = Some((trial, o));
                break;
            }
            t *= 0.5;
            trace.halvings += 1;
        }
        let Some((next, o)) = accepted else {
            // No ascent left at floating-point resolution.
            trace.converged = delta.norm() <= ctl.tol * c.norm().max(f64::MIN_POSITIVE) * 1e3;
            break;
        };
        let change = (&next - &c).norm();
        c = next;
        obj = o;
        trace.iterations += 1;
        trace.objective.push(obj);
        if change <= ctl.tol * c.norm() || change == 0.0 {
            trace.converged = true;
            break;
        }
    }
    let p = probabilities(&ts.s, &c);
    trace.grad_norm = prob.gradient(&c, &p).amax();
    if !trace.converged {
        warn!(
            "Newton iteration stopped after {} steps without converging (λ={lambda:e}, μ={mu:e})",
            trace.iterations
        );
    }
    Ok((c, trace))
}

/// Newton–Raphson in representer form, for `N < P`. With `c = Q⁻¹Sᵀα` the
/// fitted values are `η = Kα`, `K = SQ⁻¹Sᵀ`, and the penalty `½cᵀQc` is
/// `½αᵀη`, so every step is an `N × N` solve. Stationarity reads
/// `α = y − p`.
struct DualRun {
    alpha: DVector<f64>,
    eta: DVector<f64>,
    trace: NewtonTrace,
}

fn dual_objective(y: &DVector<f64>, alpha: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    let ll: f64 = eta.iter().zip(y.iter()).map(|(e, y)| y * e - softplus(*e)).sum();
    ll - 0.5 * alpha.dot(eta)
}

/// `I + √W K √W` at the fitted values `eta`, with the scaled working
/// response `√W z`.
fn dual_working(k: &DMatrix<f64>, y: &DVector<f64>, eta: &DVector<f64>, eps: f64) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let p = eta.map(sigmoid);
    let w = clamped_weights(&p, eps);
    let s = w.map(f64::sqrt);
    let n = y.len();
    let m = DMatrix::from_fn(n, n, |i, j| s[i] * k[(i, j)] * s[j] + if i == j { 1.0 } else { 0.0 });
    let sz = DVector::from_fn(n, |i, _| s[i] * eta[i] + (y[i] - p[i]) / s[i]);
    (s, m, sz)
}

fn dual_newton(k: &DMatrix<f64>, y: &DVector<f64>, ctl: &NewtonControls) -> Result<DualRun> {
    let n = y.len();
    let mut alpha = DVector::zeros(n);
    let mut eta = DVector::zeros(n);
    let mut obj = dual_objective(y, &alpha, &eta);
    let mut trace = NewtonTrace {
        objective: vec![obj],
        ..Default::default()
    };
    for _ in 0..ctl.max_iter {
        let (s, m, sz) = dual_working(k, y, &eta, ctl.eps);
        let chol = cholesky(m)?;
        let target_alpha = chol.solve(&sz).component_mul(&s);
        let target_eta = k * &target_alpha;
        let (da, de) = (&target_alpha - &alpha, &target_eta - &eta);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let a = &alpha + &da * t;
            let e = &eta + &de * t;
            let o = dual_objective(y, &a, &e);
            if o >= obj {
                accepted = Some((a, e, o));
                break;
            }
            t *= 0.5;
            trace.halvings += 1;
        }
        let Some((a, e, o)) = accepted else {
            trace.converged = de.norm() <= ctl.tol * eta.norm().max(f64::MIN_POSITIVE) * 1e3;
            break;
        };
        let change = (&e - &eta).norm();
        alpha = a;
        eta = e;
        obj = o;
        trace.iterations += 1;
        trace.objective.push(obj);
        if change <= ctl.tol * eta.norm() || change == 0.0 {
            trace.converged = true;
            break;
        }
    }
    Ok(DualRun { alpha, eta, trace })
}

/// Dual route for [`solve_logistic`]; `None` when `Q` is not positive
/// definite and the primal iteration has to be used.
fn solve_logistic_dual(prob: &Logistic, normal: &Normal, ctl: &NewtonControls) -> Result<Option<(DVector<f64>, NewtonTrace)>> {
    let ts = prob.ts;
    let p = ts.num_coefficients();
    let mut q = match &normal.r_dense {
        Some(r) => r * prob.lambda,
        None => DMatrix::zeros(p, p),
    };
    for i in 0..p {
        q[(i, i)] += prob.mu;
    }
    let chol = match cholesky(q) {
        Ok(c) => c,
        Err(Error::Singular { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    // K = (L⁻¹Sᵀ)ᵀ(L⁻¹Sᵀ).
    let half = chol
        .l_dirty()
        .solve_lower_triangular(&ts.s.transpose())
        .ok_or(Error::Singular { row: 0, pivot: 0.0 })?;
    let k = half.tr_mul(&half);
    let run = dual_newton(&k, &ts.y, ctl)?;
    let c = chol.solve(&ts.s.tr_mul(&run.alpha));
    let mut trace = run.trace;
    trace.grad_norm = prob.gradient(&c, &probabilities(&ts.s, &c)).amax();
    if !trace.converged {
        warn!(
            "Newton iteration stopped after {} steps without converging (λ={:e}, μ={:e})",
            trace.iterations, prob.lambda, prob.mu
        );
    }
    Ok(Some((c, trace)))
}

/// Per-sample GCV weights (the diagonal of Ω).
#[derive(Clone, Debug, PartialEq)]
pub struct GcvWeights {
    pub diag: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcvPreset {
    Identity,
    /// Errors on negative samples are not counted.
    PositivesOnly,
}

impl FromStr for GcvPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "identity" | "all" => Ok(Self::Identity),
            "positives_only" | "positives" => Ok(Self::PositivesOnly),
            _ => Err(Error::InvalidParameter(format!("unknown GCV weighting '{s}'"))),
        }
    }
}

impl fmt::Display for GcvPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::PositivesOnly => "positives_only",
        })
    }
}

impl GcvWeights {
    pub fn identity(n: usize) -> Self {
        Self { diag: vec![1.0; n] }
    }

    pub fn positives_only(y: &DVector<f64>) -> Self {
        Self {
            diag: y.iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn from_preset(preset: GcvPreset, y: &DVector<f64>) -> Self {
        match preset {
            GcvPreset::Identity => Self::identity(y.len()),
            GcvPreset::PositivesOnly => Self::positives_only(y),
        }
    }
}

/// `(1/N)‖Ω r‖² / (1 − tr A / N)²`, or +∞ once the trace reaches `N`.
fn gcv_formula(residual: &DVector<f64>, trace: f64, omega: &GcvWeights) -> f64 {
    gcv_from_residual_dof(residual, residual.len() as f64 - trace, omega)
}

/// [`gcv_formula`] given `N − tr A` directly, which avoids cancellation
/// when the smoother is close to the identity.
fn gcv_from_residual_dof(residual: &DVector<f64>, dof: f64, omega: &GcvWeights) -> f64 {
    let n = residual.len() as f64;
    let denom = dof / n;
    if !(denom > 1e-12) {
        return f64::INFINITY;
    }
    let num: f64 = residual.iter().zip(&omega.diag).map(|(r, w)| (w * r).powi(2)).sum::<f64>() / n;
    num / (denom * denom)
}

/// GCV of the smoother `A = S H⁻¹ Sᵀ`, `H = SᵀS + λR + μI`.
fn gcv_primal(s: &DMatrix<f64>, y: &DVector<f64>, r: &RegularizerMatrix, lambda: f64, mu: f64, omega: &GcvWeights) -> Result<f64> {
    let normal = Normal::new(s, r, lambda)?;
    if !normal.direct() {
        return Err(Error::InvalidParameter(format!(
            "GCV needs a dense smoother; {} coefficients exceed the direct limit",
            s.ncols()
        )));
    }
    let chol = match cholesky(normal.matrix(None, lambda, mu)) {
        Ok(c) => c,
        Err(Error::Singular { .. }) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let x = chol.solve(&s.transpose());
    let a = s * x;
    let residual = y - &a * y;
    Ok(gcv_formula(&residual, a.trace(), omega))
}

/// Working response and weights of the final Newton quadratic approximation.
fn working_problem(ts: &TrainingSet, c: &DVector<f64>, eps: f64) -> (DMatrix<f64>, DVector<f64>) {
    let eta = &ts.s * c;
    let p = eta.map(sigmoid);
    let w = clamped_weights(&p, eps);
    let mut s = ts.s.clone();
    let mut z = DVector::zeros(ts.len());
    for i in 0..ts.len() {
        let sw = w[i].sqrt();
        s.row_mut(i).scale_mut(sw);
        z[i] = sw * (eta[i] + (ts.y[i] - p[i]) / w[i]);
    }
    (s, z)
}

/// GCV score of one `(λ, μ)` setting.
pub fn gcv_value(
    ts: &TrainingSet,
    r: &RegularizerMatrix,
    lambda: f64,
    mu: f64,
    omega: &GcvWeights,
    loss: Loss,
    ctl: &NewtonControls,
) -> Result<f64> {
    check_weights(lambda, mu)?;
    if omega.diag.len() != ts.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![ts.len()],
            actual: vec![omega.diag.len()],
        });
    }
    match loss {
        Loss::Linear => gcv_primal(&ts.s, &ts.y, r, lambda, mu, omega),
        Loss::Logistic => {
            let (c, trace) = match solve_logistic(ts, r, lambda, mu, ctl) {
                Ok(v) => v,
                Err(Error::Singular { .. }) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            };
            if !trace.converged {
                return Ok(f64::INFINITY);
            }
            let (sw, z) = working_problem(ts, &c, ctl.eps);
            gcv_primal(&sw, &z, r, lambda, mu, omega)
        }
        Loss::Average => Err(Error::InvalidParameter("GCV is undefined for the average template".into())),
    }
}

/// `{0} ∪` 25 log-spaced values on `[1e-10, 1e2]`.
pub fn lambda_grid() -> Vec<f64> {
    zero_and_logspace(-10.0, 2.0, 25)
}

/// `{0} ∪` 25 log-spaced values on `[1e-8, 1e2]`.
pub fn mu_grid() -> Vec<f64> {
    zero_and_logspace(-8.0, 2.0, 25)
}

fn zero_and_logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    std::iter::once(0.0)
        .chain((0..n).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64)))
        .collect()
}

/// GCV scores along one penalty weight.
#[derive(Clone, Debug, PartialEq)]
pub struct GcvCurve {
    pub parameter: Parameter,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameter {
    /// Smoothing weight, with `μ = 0`.
    Lambda,
    /// Ridge weight, with `λ = 0`.
    Mu,
}

impl fmt::Display for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lambda => "lambda",
            Self::Mu => "mu",
        })
    }
}

impl GcvCurve {
    /// Grid minimizer; near-ties go to the larger weight and an all-infinite
    /// curve selects the largest weight.
    pub fn argmin(&self) -> f64 {
        let best = self.values.iter().cloned().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return *self.grid.last().expect("non-empty grid");
        }
        let tol = 1e-10 * best.abs();
        self.grid
            .iter()
            .zip(&self.values)
            .filter(|(_, v)| **v <= best + tol)
            .map(|(g, _)| *g)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Like [`GcvCurve::argmin`], restricted to weights accepted by `ok`;
    /// falls back to the unrestricted argmin when none is.
    pub fn argmin_where(&self, mut ok: impl FnMut(f64) -> bool) -> f64 {
        let mut order: Vec<(f64, f64)> = self
            .grid
            .iter()
            .zip(&self.values)
            .filter(|(_, v)| v.is_finite())
            .map(|(g, v)| (*g, *v))
            .collect();
        // Ascending value, larger weight first among equals.
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)));
        order.into_iter().map(|(g, _)| g).find(|g| ok(*g)).unwrap_or_else(|| self.argmin())
    }
}

/// Symmetric pseudo-root `L` with `R ≈ LLᵀ`; adds diagonal jitter if the
/// Cholesky factorization fails.
fn penalty_root(r: &DMatrix<f64>) -> DMatrix<f64> {
    let max_diag = r.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    loop {
        let mut m = r.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Ok(ch) = cholesky(m) {
            if jitter > 0.0 {
                warn!("penalty matrix needed diagonal jitter {jitter:e} for GCV");
            }
            return ch.l();
        }
        jitter = if jitter == 0.0 { 1e-12 * max_diag } else { jitter * 10.0 };
    }
}

/// Spectral GCV for the linear loss along one weight: with `B = S L⁻ᵀ` and
/// `BBᵀ = UΛUᵀ`, the smoother is `U diag(Λ/(Λ+t)) Uᵀ`. The unpenalized
/// point is +∞ when `S` is column-rank deficient.
fn linear_curve(ts: &TrainingSet, r: &RegularizerMatrix, parameter: Parameter, grid: &[f64], omega: &GcvWeights) -> Result<Vec<f64>> {
    let k = curve_kernel(ts, r, parameter)?;
    let eig = SymmetricEigen::new(k);
    let lmax = eig.eigenvalues.amax();
    let cutoff = 1e-12 * lmax;
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|v| if *v > cutoff { *v } else { 0.0 }).collect();
    let yhat = eig.eigenvectors.tr_mul(&ts.y);
    let u = &eig.eigenvectors;
    // Without a penalty the fit needs S of full column rank.
    let rank = lam.iter().filter(|l| **l > 0.0).count();
    Ok(grid
        .par_iter()
        .map(|&t| {
            if t == 0.0 && rank < ts.num_coefficients() {
                return f64::INFINITY;
            }
            // Residual factors 1 − λ/(λ + t), written as t/(λ + t).
            let mut dof = 0.0;
            let mut shrunk = DVector::zeros(lam.len());
            for (i, &l) in lam.iter().enumerate() {
                let r = if l == 0.0 {
                    1.0
                } else if t == 0.0 {
                    0.0
                } else {
                    t / (l + t)
                };
                dof += r;
                shrunk[i] = r * yhat[i];
            }
            gcv_from_residual_dof(&(u * shrunk), dof, omega)
        })
        .collect())
}

/// `BBᵀ` with `B = S` along μ and `B = S L⁻ᵀ`, `R ≈ LLᵀ`, along λ; the
/// smoother at weight `t` only depends on `BBᵀ/t`.
fn curve_kernel(ts: &TrainingSet, r: &RegularizerMatrix, parameter: Parameter) -> Result<DMatrix<f64>> {
    let b = match parameter {
        Parameter::Mu => ts.s.clone(),
        Parameter::Lambda => {
            if ts.num_coefficients() > DIRECT_LIMIT {
                return Err(Error::InvalidParameter(format!(
                    "GCV along lambda needs a dense penalty; {} coefficients exceed the direct limit of {DIRECT_LIMIT}",
                    ts.num_coefficients()
                )));
            }
            let l = penalty_root(&r.to_dense());
            // B = S L⁻ᵀ  ⇔  L Bᵀ = Sᵀ.
            let bt = l
                .solve_lower_triangular(&ts.s.transpose())
                .ok_or(Error::Singular { row: 0, pivot: 0.0 })?;
            bt.transpose()
        }
    };
    Ok(&b * b.transpose())
}

/// Logistic GCV along one weight in representer form (`N < P`). The
/// unpenalized point is +∞: `SᵀWS` has rank at most `N`.
fn logistic_curve_dual(
    ts: &TrainingSet,
    r: &RegularizerMatrix,
    parameter: Parameter,
    grid: &[f64],
    omega: &GcvWeights,
    ctl: &NewtonControls,
) -> Result<Vec<f64>> {
    ts.check_binary()?;
    let k1 = curve_kernel(ts, r, parameter)?;
    let n = ts.len();
    grid.par_iter()
        .map(|&t| {
            if t == 0.0 {
                return Ok(f64::INFINITY);
            }
            let k = &k1 / t;
            let run = match dual_newton(&k, &ts.y, ctl) {
                Ok(run) => run,
                Err(Error::Singular { .. }) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            };
            if !run.trace.converged {
                return Ok(f64::INFINITY);
            }
            let (_, m, sz) = dual_working(&k, &ts.y, &run.eta, ctl.eps);
            let chol = match cholesky(m) {
                Ok(c) => c,
                Err(Error::Singular { .. }) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            };
            // A = K̃(I + K̃)⁻¹, so the residual is (I + K̃)⁻¹√W z.
            let residual = chol.solve(&sz);
            let trace = n as f64 - chol.inverse().trace();
            Ok(gcv_formula(&residual, trace, omega))
        })
        .collect()
}

pub fn gcv_curve(
    ts: &TrainingSet,
    r: &RegularizerMatrix,
    parameter: Parameter,
    grid: &[f64],
    omega: &GcvWeights,
    loss: Loss,
    ctl: &NewtonControls,
) -> Result<GcvCurve> {
    if r.dim() != ts.num_coefficients() {
        return Err(Error::ShapeMismatch {
            expected: vec![ts.num_coefficients()],
            actual: vec![r.dim()],
        });
    }
    let values = match loss {
        Loss::Linear => linear_curve(ts, r, parameter, grid, omega)?,
        Loss::Logistic if ts.len() < ts.num_coefficients() && ts.num_coefficients() <= DIRECT_LIMIT => {
            logistic_curve_dual(ts, r, parameter, grid, omega, ctl)?
        }
        _ => grid
            .par_iter()
            .map(|&t| {
                let (lambda, mu) = match parameter {
                    Parameter::Lambda => (t, 0.0),
                    Parameter::Mu => (0.0, t),
                };
                gcv_value(ts, r, lambda, mu, omega, loss, ctl)
            })
            .collect::<Result<_>>()?,
    };
    debug!("GCV over {parameter}: {values:?}");
    Ok(GcvCurve {
        parameter,
        grid: grid.to_vec(),
        values,
    })
}

/// GCV-selected weights and the curves they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSelection {
    pub lambda_star: f64,
    pub mu_star: f64,
    pub lambda_curve: GcvCurve,
    pub mu_curve: GcvCurve,
}

impl ParamSelection {
    /// `(λ, μ)` used by each template type.
    pub fn settings(&self, ty: TemplateType) -> (f64, f64) {
        match ty {
            TemplateType::A | TemplateType::B => (0.0, 0.0),
            TemplateType::C => (0.0, self.mu_star),
            TemplateType::D => (self.lambda_star, 0.0),
            TemplateType::E => (0.5 * self.lambda_star, 0.5 * self.mu_star),
        }
    }
}

pub fn optimize_params(
    ts: &TrainingSet,
    r: &RegularizerMatrix,
    loss: Loss,
    omega: &GcvWeights,
    ctl: &NewtonControls,
) -> Result<ParamSelection> {
    let lambda_curve = gcv_curve(ts, r, Parameter::Lambda, &lambda_grid(), omega, loss, ctl)?;
    let mu_curve = gcv_curve(ts, r, Parameter::Mu, &mu_grid(), omega, loss, ctl)?;
    // Skip weights whose normal matrix is numerically singular: the curves
    // can be finite there while the fit itself cannot be computed.
    let normal = Normal::new(&ts.s, r, 1.0)?;
    let solvable = |lambda: f64, mu: f64| !normal.direct() || cholesky(normal.matrix(None, lambda, mu)).is_ok();
    Ok(ParamSelection {
        lambda_star: lambda_curve.argmin_where(|t| solvable(t, 0.0)),
        mu_star: mu_curve.argmin_where(|t| solvable(0.0, t)),
        lambda_curve,
        mu_curve,
    })
}

/// Average (A), unregularized (B), ridge (C), smoothing (D) and combined (E).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateType {
    A,
    B,
    C,
    D,
    E,
}

impl TemplateType {
    pub const ALL: [TemplateType; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn needs_gcv(self) -> bool {
        matches!(self, Self::C | Self::D | Self::E)
    }
}

impl FromStr for TemplateType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            "E" => Ok(Self::E),
            _ => Err(Error::InvalidParameter(format!("unknown template type '{s}'"))),
        }
    }
}

impl fmt::Display for TemplateType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub newton: NewtonControls,
    pub gcv: GcvPreset,
    /// Order of the window used to normalize the average template.
    pub window_order: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            newton: NewtonControls::default(),
            gcv: GcvPreset::Identity,
            window_order: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedTemplate {
    pub kind: TemplateType,
    pub template: SplineTemplate,
    pub lambda: f64,
    pub mu: f64,
    pub selection: Option<ParamSelection>,
    pub trace: Option<NewtonTrace>,
}

/// Least-squares coefficients of a sampled patch, one axis at a time.
pub fn project_to_basis(patch: &ArrayD<f64>, grid: &SplineGrid) -> Result<Vec<f64>> {
    crate::error::check_shape(&grid.pixel_shape(), patch.shape())?;
    let basis = SamplingBasis::new(grid);
    let pinv = |b: &ndarray::Array2<f64>| -> Result<ndarray::Array2<f64>> {
        let m = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[[i, j]]);
        let p = m.pseudo_inverse(1e-12).map_err(|e| Error::Degenerate(e.to_string()))?;
        Ok(ndarray::Array2::from_shape_fn((p.nrows(), p.ncols()), |(i, j)| p[(i, j)]))
    };
    let (px, py, pt) = (pinv(&basis.bx)?, pinv(&basis.by)?, pinv(&basis.bt)?);
    let t = patch
        .view()
        .into_shape_with_order((grid.n_x, grid.n_y, grid.n_theta))
        .expect("shape checked above");
    // Contract x and y per layer, then θ.
    let mut spatial = Array3::<f64>::zeros((grid.n_k, grid.n_l, grid.n_theta));
    for l in 0..grid.n_theta {
        spatial
            .index_axis_mut(Axis(2), l)
            .assign(&px.dot(&t.index_axis(Axis(2), l)).dot(&py.t()));
    }
    let mut c = vec![0.0; grid.num_coefficients()];
    for k in 0..grid.n_k {
        for l in 0..grid.n_l {
            for m in 0..grid.n_m {
                c[grid.index(k, l, m)] = (0..grid.n_theta).map(|j| pt[[m, j]] * spatial[[k, l, j]]).sum();
            }
        }
    }
    Ok(c)
}

/// Mean positive patch, window-normalized and projected onto the basis.
pub fn average_template(ts: &TrainingSet, grid: &SplineGrid, window_order: usize) -> Result<SplineTemplate> {
    let positives: Vec<&ArrayD<f64>> = ts
        .patches
        .iter()
        .zip(ts.y.iter())
        .filter(|(_, y)| **y > 0.5)
        .map(|(p, _)| p)
        .collect();
    let Some(first) = positives.first() else {
        return Err(Error::Degenerate("average template needs at least one positive patch".into()));
    };
    let mut mean = ArrayD::<f64>::zeros(first.raw_dim());
    for p in &positives {
        mean += *p;
    }
    mean /= positives.len() as f64;
    let window = build_window(grid.n_x.min(grid.n_y) as f64 / 2.0, window_order)?;
    let normalized = normalize_template(&mean.view(), &window)?;
    let c = project_to_basis(&normalized, grid)?;
    SplineTemplate::new(grid.clone(), Loss::Average, c)
}

/// Train one template of the given type.
pub fn train_template(
    kind: TemplateType,
    loss: Loss,
    ts: &TrainingSet,
    grid: &SplineGrid,
    r: &RegularizerMatrix,
    opts: &TrainOptions,
) -> Result<TrainedTemplate> {
    let selection = if kind.needs_gcv() {
        let omega = GcvWeights::from_preset(opts.gcv, &ts.y);
        Some(optimize_params(ts, r, loss, &omega, &opts.newton)?)
    } else {
        None
    };
    train_with_selection(kind, loss, ts, grid, r, opts, selection)
}

/// Train several types; C, D and E share one GCV search.
pub fn train_templates(
    kinds: &[TemplateType],
    loss: Loss,
    ts: &TrainingSet,
    grid: &SplineGrid,
    r: &RegularizerMatrix,
    opts: &TrainOptions,
) -> Vec<Result<TrainedTemplate>> {
    let selection = if kinds.iter().any(|k| k.needs_gcv()) {
        let omega = GcvWeights::from_preset(opts.gcv, &ts.y);
        Some(optimize_params(ts, r, loss, &omega, &opts.newton))
    } else {
        None
    };
    kinds
        .iter()
        .map(|&kind| {
            let sel = match (&selection, kind.needs_gcv()) {
                (Some(Ok(s)), true) => Some(s.clone()),
                (Some(Err(e)), true) => return Err(Error::Degenerate(format!("parameter search failed: {e}"))),
                _ => None,
            };
            train_with_selection(kind, loss, ts, grid, r, opts, sel)
        })
        .collect()
}

fn train_with_selection(
    kind: TemplateType,
    loss: Loss,
    ts: &TrainingSet,
    grid: &SplineGrid,
    r: &RegularizerMatrix,
    opts: &TrainOptions,
    selection: Option<ParamSelection>,
) -> Result<TrainedTemplate> {
    if kind == TemplateType::A {
        return Ok(TrainedTemplate {
            kind,
            template: average_template(ts, grid, opts.window_order)?,
            lambda: 0.0,
            mu: 0.0,
            selection: None,
            trace: None,
        });
    }
    if grid.num_coefficients() != ts.num_coefficients() {
        return Err(Error::ShapeMismatch {
            expected: vec![grid.num_coefficients()],
            actual: vec![ts.num_coefficients()],
        });
    }
    let (lambda, mu) = selection.as_ref().map_or((0.0, 0.0), |s| s.settings(kind));
    let (c, trace) = fit(ts, r, loss, lambda, mu, &opts.newton)?;
    let template = SplineTemplate::new(grid.clone(), loss, c.as_slice().to_vec())?;
    Ok(TrainedTemplate {
        kind,
        template,
        lambda,
        mu,
        selection,
        trace,
    })
}

/// Solve with fixed weights for either loss.
pub fn fit(
    ts: &TrainingSet,
    r: &RegularizerMatrix,
    loss: Loss,
    lambda: f64,
    mu: f64,
    ctl: &NewtonControls,
) -> Result<(DVector<f64>, Option<NewtonTrace>)> {
    match loss {
        Loss::Linear => Ok((solve_linear(ts, r, lambda, mu)?, None)),
        Loss::Logistic => {
            let (c, t) = solve_logistic(ts, r, lambda, mu, ctl)?;
            Ok((c, Some(t)))
        }
        Loss::Average => Err(Error::InvalidParameter("the average template is not fitted by regression".into())),
    }
}
