//! Registration of discrete closed curves by joint search over cyclic
//! relabelings and orthogonal transforms.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve;
use crate::error::{Error, Result};
use crate::linalg;

/// Relative tolerance under which two shift objectives count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reflection {
    /// R ranges over O(d).
    #[default]
    Allow,
    /// R restricted to SO(d).
    Forbid,
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    /// Optimal shift in 1..=n; n is the identity.
    pub p_star: usize,
    pub r_star: DMatrix<f64>,
    /// ‖C(p*)X − Y R*‖_F.
    pub residual: f64,
    /// Nuclear norm of L(p*) (signed in the last singular value under SO(d)).
    pub objective: f64,
    /// Best objective among the other shifts.
    pub runner_up: f64,
    /// Set when another shift attains the optimum within the tie tolerance.
    pub symmetric: bool,
}

/// Row i of C(p)·X is row (i + p) mod n of X.
pub fn cyclic_shift(x: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n, x.ncols(), |i, j| x[((i + p) % n, j)])
}

pub fn cyclic_shift_vec(v: &DVector<f64>, p: usize) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(n, |i, _| v[(i + p) % n])
}

/// L(p) = Yᵀ C(p) X.
fn cross(x: &DMatrix<f64>, y: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let mut l = DMatrix::zeros(d, d);
    for i in 0..n {
        let k = (i + p) % n;
        for a in 0..d {
            let ya = y[(i, a)];
            for b in 0..d {
                l[(a, b)] += ya * x[(k, b)];
            }
        }
    }
    l
}

/// Orthogonal factor maximizing tr(Rᵀ L), with the attained value.
fn procrustes_factor(l: &DMatrix<f64>, reflection: Reflection) -> (DMatrix<f64>, f64, DVector<f64>) {
    let (mut u, s, vt) = linalg::thin_svd(l);
    let mut value = s.sum();
    if reflection == Reflection::Forbid && (&u * &vt).determinant() < 0.0 {
        let last = u.ncols() - 1;
        u.column_mut(last).neg_mut();
        value -= 2.0 * s[last];
    }
    (u * vt, value, s)
}

fn objective(l: &DMatrix<f64>, reflection: Reflection) -> f64 {
    match reflection {
        Reflection::Allow => linalg::nuclear_norm(l),
        Reflection::Forbid => procrustes_factor(l, reflection).1,
    }
}

fn check_pair(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Contract(format!(
            "shape mismatch {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// Minimizes ‖C(p)X − YR‖_F over all shifts p and orthogonal R.
pub fn cyclic_procrustes(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<AlignmentResult> {
    cyclic_procrustes_with(x, y, Reflection::Allow)
}

pub fn cyclic_procrustes_with(x: &DMatrix<f64>, y: &DMatrix<f64>, reflection: Reflection) -> Result<AlignmentResult> {
    check_pair(x, y)?;
    let n = x.nrows();
    let objectives: Vec<f64> = (1..=n).map(|p| objective(&cross(x, y, p % n), reflection)).collect();
    let best = objectives.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOLERANCE * best.abs().max(1.0);
    let idx = objectives
        .iter()
        .position(|&v| v >= best - tol)
        .expect("non-empty scan");
    let p_star = idx + 1;
    let runner_up = objectives
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != idx)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let symmetric = runner_up >= objectives[idx] - tol;

    let l = cross(x, y, p_star % n);
    let (r_star, value, s) = procrustes_factor(&l, reflection);
    if !(s[s.len() - 1] > 1e-12 * s[0]) {
        return Err(Error::AlignmentDegenerate(format!(
            "cross-covariance at shift {p_star} is rank deficient"
        )));
    }
    let residual = (cyclic_shift(x, p_star) - y * &r_star).norm();
    Ok(AlignmentResult {
        p_star,
        r_star,
        residual,
        objective: value,
        runner_up,
        symmetric,
    })
}

/// Classical orthogonal Procrustes with the labeling frozen.
pub fn orthogonal_procrustes(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    check_pair(x, y)?;
    let l = y.transpose() * x;
    let (r, _, _) = procrustes_factor(&l, Reflection::Allow);
    let residual = (x - y * &r).norm();
    Ok((r, residual))
}

/// n points on the unit circle at uniform angles, counterclockwise from 0.
pub fn circle_archetype(n: usize) -> Result<DMatrix<f64>> {
    if n < 4 || !n.is_multiple_of(2) {
        return Err(Error::Contract(format!("archetype needs an even n >= 4, got {n}")));
    }
    Ok(DMatrix::from_fn(n, 2, |i, j| {
        let a = 2.0 * PI * i as f64 / n as f64;
        if j == 0 { a.cos() } else { a.sin() }
    }))
}

#[derive(Debug, Clone)]
pub struct AlignedShape {
    pub index: usize,
    /// C(p*)·X·R*ᵀ, the shape brought onto the archetype.
    pub aligned: DMatrix<f64>,
    pub result: AlignmentResult,
}

#[derive(Debug, Clone, Default)]
pub struct EnsembleAlignment {
    pub shapes: Vec<AlignedShape>,
    /// Shapes that could not be aligned, with the reason.
    pub excluded: Vec<(usize, String)>,
}

pub fn align_ensemble(shapes: &[DMatrix<f64>], archetype: &DMatrix<f64>, reflection: Reflection) -> EnsembleAlignment {
    let results: Vec<(usize, Result<AlignmentResult>)> = shapes
        .par_iter()
        .enumerate()
        .map(|(i, x)| (i, cyclic_procrustes_with(x, archetype, reflection)))
        .collect();
    let mut out = EnsembleAlignment::default();
    for (i, r) in results {
        match r {
            Ok(result) => {
                if result.symmetric {
                    log::warn!("shape {i}: alignment is not unique (tied shifts)");
                }
                let aligned = cyclic_shift(&shapes[i], result.p_star) * result.r_star.transpose();
                out.shapes.push(AlignedShape {
                    index: i,
                    aligned,
                    result,
                });
            }
            Err(e) => {
                log::warn!("shape {i} excluded from alignment: {e}");
                out.excluded.push((i, e.to_string()));
            }
        }
    }
    out
}

/// Landmark index farthest from the centroid once the enclosed region is
/// whitened. The choice is invariant under rigid motions and linear maps of
/// the curve; exact ties go to the smallest index.
pub fn intrinsic_start(o: &DMatrix<f64>) -> Result<usize> {
    let (c, w, _) = curve::area_whitening(&curve::rows(o))?;
    let mut best = 0usize;
    let mut best_r = f64::NEG_INFINITY;
    for i in 0..o.nrows() {
        let x = o[(i, 0)] - c[0];
        let y = o[(i, 1)] - c[1];
        let wx = x * w[(0, 0)] + y * w[(1, 0)];
        let wy = x * w[(0, 1)] + y * w[(1, 1)];
        let r = wx * wx + wy * wy;
        if r > best_r {
            best_r = r;
            best = i;
        }
    }
    Ok(best)
}
