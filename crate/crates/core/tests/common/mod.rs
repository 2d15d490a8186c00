#![allow(dead_code)]

use nalgebra::DMatrix;
use shapetensor::curve::{self, RawCurve};

/// Smooth star-shaped curve sampled at the parameter grid: radius
/// 1 + Σ c_k cos(k s + φ_k), stretched by (sx, sy).
pub fn harmonic_curve(n: usize, coeffs: &[(usize, f64, f64)], stretch: (f64, f64)) -> DMatrix<f64> {
    let s = curve::param_nodes(n);
    DMatrix::from_fn(n, 2, |i, j| {
        let r = 1.0 + coeffs.iter().map(|&(k, c, ph)| c * (k as f64 * s[i] + ph).cos()).sum::<f64>();
        if j == 0 {
            stretch.0 * r * s[i].cos()
        } else {
            stretch.1 * r * s[i].sin()
        }
    })
}

pub fn rotation(theta: f64, reflect: bool) -> DMatrix<f64> {
    let (c, s) = (theta.cos(), theta.sin());
    let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    if reflect {
        r * DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])
    } else {
        r
    }
}

/// Rows mapped by x ↦ x Rᵀ + b, i.e. each point rotated by R and shifted.
pub fn rigid(x: &DMatrix<f64>, r: &DMatrix<f64>, b: [f64; 2]) -> DMatrix<f64> {
    let mut y = x * r.transpose();
    for mut row in y.row_iter_mut() {
        row[0] += b[0];
        row[1] += b[1];
    }
    y
}

pub fn raw(id: &str, x: &DMatrix<f64>) -> RawCurve {
    RawCurve::closed(id, "test", curve::rows(x)).unwrap()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}
