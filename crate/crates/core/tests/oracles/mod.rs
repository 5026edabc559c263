//! Independent reference computations shared by integration tests.
#![allow(dead_code)]

use std::f64::consts::TAU;

use ndarray::{Array1, Array2, Array3};
use se2match_core::bspline::{bspline_derivative, bspline_eval, Domain, SplineGrid};
use se2match_core::quadrature::gauss_legendre;
use se2match_core::regularizers::DiffusionWeights;

/// Tensor-product Gauss rule along one spatial axis, split at every basis
/// breakpoint so the piecewise-polynomial integrands are integrated exactly.
fn axis_rule(count: usize, spacing: f64, order: usize, knot: impl Fn(usize) -> f64, nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let half = (order + 1) as f64 / 2.0;
    let mut breaks: Vec<f64> = Vec::new();
    for k in 0..count {
        for i in 0..=order + 1 {
            breaks.push(knot(k) + (i as f64 - half) * spacing);
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let (x, w) = gauss_legendre(nodes);
    let mut px = Vec::new();
    let mut pw = Vec::new();
    for iv in breaks.windows(2) {
        let h = 0.5 * (iv[1] - iv[0]);
        let m = 0.5 * (iv[1] + iv[0]);
        for (xi, wi) in x.iter().zip(&w) {
            px.push(m + h * xi);
            pw.push(h * wi);
        }
    }
    (px, pw)
}

/// Periodic basis on the circle by explicit image summation.
fn theta_basis(order: usize, n_m: usize, m: usize, th: f64, deriv: usize) -> f64 {
    let s = TAU / n_m as f64;
    (-4..=4)
        .map(|j| {
            let u = (th - (m + 1) as f64 * s) / s + (j * n_m as i64) as f64;
            let v = if deriv == 0 {
                bspline_eval(order, u)
            } else {
                bspline_derivative(order, deriv, u).unwrap()
            };
            v / s.powi(deriv as i32)
        })
        .sum()
}

fn spatial_tables(grid: &SplineGrid, nodes: usize) -> [(Vec<f64>, Array2<f64>, Array2<f64>); 2] {
    let n = grid.order;
    let (xs, wx) = axis_rule(grid.n_k, grid.s_k(), n, |k| grid.knot_x(k), nodes);
    let (ys, wy) = axis_rule(grid.n_l, grid.s_l(), n, |l| grid.knot_y(l), nodes);
    let bx = Array2::from_shape_fn((xs.len(), grid.n_k), |(i, k)| {
        bspline_eval(n, (xs[i] - grid.knot_x(k)) / grid.s_k())
    });
    let dbx = Array2::from_shape_fn((xs.len(), grid.n_k), |(i, k)| {
        bspline_derivative(n, 1, (xs[i] - grid.knot_x(k)) / grid.s_k()).unwrap() / grid.s_k()
    });
    let by = Array2::from_shape_fn((ys.len(), grid.n_l), |(j, l)| {
        bspline_eval(n, (ys[j] - grid.knot_y(l)) / grid.s_l())
    });
    let dby = Array2::from_shape_fn((ys.len(), grid.n_l), |(j, l)| {
        bspline_derivative(n, 1, (ys[j] - grid.knot_y(l)) / grid.s_l()).unwrap() / grid.s_l()
    });
    [(wx, bx, dbx), (wy, by, dby)]
}

/// `∫_{ℝ²} |∇T|²` by dense quadrature.
pub fn r2_energy(grid: &SplineGrid, c: &[f64]) -> f64 {
    assert_eq!(grid.domain, Domain::R2);
    let [(wx, bx, dbx), (wy, by, dby)] = spatial_tables(grid, 8);
    let cm = Array2::from_shape_fn((grid.n_k, grid.n_l), |(k, l)| c[grid.index(k, l, 0)]);
    let tx = dbx.dot(&cm).dot(&by.t());
    let ty = bx.dot(&cm).dot(&dby.t());
    let mut e = 0.0;
    for i in 0..wx.len() {
        for j in 0..wy.len() {
            e += wx[i] * wy[j] * (tx[[i, j]].powi(2) + ty[[i, j]].powi(2));
        }
    }
    e
}

/// `∫_{ℝ²×[0,2π)} ‖∇T‖²_D` in the left-invariant frame by dense quadrature.
pub fn se2_energy(grid: &SplineGrid, c: &[f64], d: DiffusionWeights) -> f64 {
    assert_eq!(grid.domain, Domain::Se2);
    let [(wx, bx, dbx), (wy, by, dby)] = spatial_tables(grid, 8);
    let n_m = grid.n_m;
    let s = TAU / n_m as f64;
    let (gx, gw) = gauss_legendre(12);
    let mut th = Vec::new();
    let mut tw = Vec::new();
    for iv in 0..2 * n_m {
        let h = 0.25 * s;
        let m = iv as f64 * 0.5 * s + h;
        for (xi, wi) in gx.iter().zip(&gw) {
            th.push(m + h * xi);
            tw.push(h * wi);
        }
    }
    let bt = Array2::from_shape_fn((th.len(), n_m), |(t, m)| theta_basis(grid.order, n_m, m, th[t], 0));
    let dbt = Array2::from_shape_fn((th.len(), n_m), |(t, m)| theta_basis(grid.order, n_m, m, th[t], 1));
    let mut e = 0.0;
    let coeff = |k: usize, l: usize, m: usize| c[grid.index(k, l, m)];
    // Contract θ first: C_t[k, l] for value and derivative.
    for t in 0..th.len() {
        let ct = Array2::from_shape_fn((grid.n_k, grid.n_l), |(k, l)| {
            (0..n_m).map(|m| coeff(k, l, m) * bt[[t, m]]).sum::<f64>()
        });
        let dct = Array2::from_shape_fn((grid.n_k, grid.n_l), |(k, l)| {
            (0..n_m).map(|m| coeff(k, l, m) * dbt[[t, m]]).sum::<f64>()
        });
        let tx = dbx.dot(&ct).dot(&by.t());
        let ty = bx.dot(&ct).dot(&dby.t());
        let tt = bx.dot(&dct).dot(&by.t());
        let (sn, cs) = th[t].sin_cos();
        let mut slab = 0.0;
        for i in 0..wx.len() {
            for j in 0..wy.len() {
                let xi = cs * tx[[i, j]] + sn * ty[[i, j]];
                let eta = -sn * tx[[i, j]] + cs * ty[[i, j]];
                slab += wx[i] * wy[j] * (d.d_xi * xi * xi + d.d_eta * eta * eta + d.d_theta * tt[[i, j]].powi(2));
            }
        }
        e += tw[t] * slab;
    }
    e
}

/// Sigmoid.
pub fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Brute-force "same"-size correlation `P(x) = Σ_i t[i] f(x + i − c)`.
pub fn brute_correlate(f: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
    let (n0, n1) = f.dim();
    let (k0, k1) = t.dim();
    let (c0, c1) = ((k0 / 2) as i64, (k1 / 2) as i64);
    let mut out = Array2::zeros((n0, n1));
    for x in 0..n0 {
        for y in 0..n1 {
            let mut s = 0.0;
            for i in 0..k0 {
                for j in 0..k1 {
                    let px = x as i64 + i as i64 - c0;
                    let py = y as i64 + j as i64 - c1;
                    if px >= 0 && py >= 0 && (px as usize) < n0 && (py as usize) < n1 {
                        s += t[[i, j]] * f[[px as usize, py as usize]];
                    }
                }
            }
            out[[x, y]] = s;
        }
    }
    out
}

/// SE(2) brute force: sum of per-layer correlations times the layer spacing.
pub fn brute_correlate_se2(f: &Array3<f64>, t: &Array3<f64>) -> Array2<f64> {
    let (n0, n1, nt) = f.dim();
    let dt = TAU / nt as f64;
    let mut out = Array2::zeros((n0, n1));
    for th in 0..nt {
        let fl = f.index_axis(ndarray::Axis(2), th).to_owned();
        let tl = t.index_axis(ndarray::Axis(2), th).to_owned();
        out = out + brute_correlate(&fl, &tl) * dt;
    }
    out
}

/// Exact leave-one-out squared error of a ridge-type linear smoother
/// `c = (SᵀS + Q)⁻¹Sᵀy`, by refitting without each sample.
pub fn loo_error(s: &nalgebra::DMatrix<f64>, y: &nalgebra::DVector<f64>, q: &nalgebra::DMatrix<f64>) -> f64 {
    let n = s.nrows();
    let mut err = 0.0;
    for i in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let si = s.select_rows(keep.iter());
        let yi = y.select_rows(keep.iter());
        let a = si.transpose() * &si + q;
        let b = si.transpose() * yi;
        let c = a.lu().solve(&b).expect("leave-one-out system solvable");
        let pred = (s.row(i) * c)[(0, 0)];
        err += (pred - y[i]).powi(2);
    }
    err / n as f64
}

pub fn mean(v: &Array1<f64>) -> f64 {
    v.mean().unwrap_or(0.0)
}
