//! The roto-translation group SE(2).
//!
//! Elements are `(x, y, θ)` with the semi-direct product
//! `g·h = (R_θg · h.xy + g.xy, θg + θh)`. Angles are canonicalized to
//! `[0, 2π)` on construction so that equality comparisons are well defined.

use std::f64::consts::TAU;
use std::fmt;
use std::ops::Mul;

/// Reduce an angle into `[0, 2π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Counter-clockwise rotation of `(x, y)` by `theta`.
#[inline]
pub fn rotate(theta: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// An element of SE(2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se2Element {
    pub x: f64,
    pub y: f64,
    theta: f64,
}

impl Se2Element {
    pub const IDENTITY: Se2Element = Se2Element {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    /// Orientation in `[0, 2π)`.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn product(&self, h: &Se2Element) -> Se2Element {
        let (rx, ry) = rotate(self.theta, h.x, h.y);
        Se2Element::new(rx + self.x, ry + self.y, self.theta + h.theta)
    }

    pub fn inverse(&self) -> Se2Element {
        let (rx, ry) = rotate(-self.theta, self.x, self.y);
        Se2Element::new(-rx, -ry, -self.theta)
    }

    /// Component-wise distance with the angle compared on the circle.
    pub fn distance_components(&self, other: &Se2Element) -> [f64; 3] {
        let dt = wrap_angle(self.theta - other.theta);
        [
            (self.x - other.x).abs(),
            (self.y - other.y).abs(),
            dt.min(TAU - dt),
        ]
    }

    pub fn approx_eq(&self, other: &Se2Element, tol: f64) -> bool {
        self.distance_components(other).iter().all(|d| *d <= tol)
    }
}

impl Default for Se2Element {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Mul for Se2Element {
    type Output = Se2Element;

    fn mul(self, rhs: Se2Element) -> Se2Element {
        self.product(&rhs)
    }
}

impl fmt::Display for Se2Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6})", self.x, self.y, self.theta)
    }
}

/// Left-invariant frame `{∂ξ, ∂η, ∂θ}` at orientation θ, expressed in the
/// fixed frame `{∂x, ∂y, ∂θ}`. Row `i` holds the coefficients of the `i`-th
/// left-invariant vector field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeftInvariantFrame {
    pub matrix: [[f64; 3]; 3],
}

impl LeftInvariantFrame {
    pub fn at(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            matrix: [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn xi(&self) -> [f64; 3] {
        self.matrix[0]
    }

    pub fn eta(&self) -> [f64; 3] {
        self.matrix[1]
    }

    pub fn theta(&self) -> [f64; 3] {
        self.matrix[2]
    }

    /// Apply the frame to a fixed-frame gradient `(∂x, ∂y, ∂θ)`, giving
    /// `(∂ξ, ∂η, ∂θ)`.
    pub fn apply(&self, grad: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * grad[0] + m[0][1] * grad[1] + m[0][2] * grad[2],
            m[1][0] * grad[0] + m[1][1] * grad[1] + m[1][2] * grad[2],
            m[2][0] * grad[0] + m[2][1] * grad[1] + m[2][2] * grad[2],
        ]
    }
}

/// Convenience wrapper matching the frame constructor.
pub fn left_invariant_frame(theta: f64) -> LeftInvariantFrame {
    LeftInvariantFrame::at(theta)
}
