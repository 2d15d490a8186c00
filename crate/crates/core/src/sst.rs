//! Separable shape tensors: the CLO kernel, classical standardizations and
//! the square-root quadrature decomposition (SRQD).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::WeightMatrix;
use crate::spline::PeriodicSpline;

/// Undulation representative, generalized scale and the dual eigenpairs of
/// one curve.
#[derive(Debug, Clone)]
pub struct ShapeTensor {
    /// n×d, orthonormal columns.
    pub x_tilde: DMatrix<f64>,
    /// d×d SPD.
    pub p: DMatrix<f64>,
    /// d×d orthogonal; columns are the dual vectors α_j.
    pub a: DMatrix<f64>,
    /// Descending singular values.
    pub sigma: DVector<f64>,
    /// n×d left singular vectors of W^{1/2}O.
    pub v_tilde: DMatrix<f64>,
    pub weights: WeightMatrix,
}

#[derive(Serialize)]
pub struct ShapeTensorRecord {
    pub id: String,
    #[serde(rename = "X_tilde")]
    pub x_tilde: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ShapeTensor {
    pub fn record(&self, id: &str) -> ShapeTensorRecord {
        ShapeTensorRecord {
            id: id.to_string(),
            x_tilde: row_major(&self.x_tilde),
            p: row_major(&self.p),
            sigma: self.sigma.iter().copied().collect(),
            a: row_major(&self.a),
        }
    }

    /// W^{1/2}O as reconstructed from the factors.
    pub fn weighted_landmarks(&self) -> DMatrix<f64> {
        &self.x_tilde * &self.p
    }
}

#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub k: DMatrix<f64>,
}

/// K = O Oᵀ.
pub fn clo_kernel_matrix(o: &DMatrix<f64>) -> KernelMatrix {
    KernelMatrix { k: o * o.transpose() }
}

fn check_full_rank(s: &DVector<f64>) -> Result<()> {
    let ratio = s[s.len() - 1] / s[0];
    if !(ratio >= 1e-12) {
        return Err(Error::NearDegenerate {
            ratio: if ratio.is_finite() { ratio } else { 0.0 },
        });
    }
    Ok(())
}

/// X = V·M with M = ΣUᵀ from the thin SVD X = VΣUᵀ.
pub fn affine_standardize(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (v, s, ut) = linalg::thin_svd(x);
    check_full_rank(&s)?;
    let m = DMatrix::from_diagonal(&s) * ut;
    Ok((v, m))
}

/// X = X̃·P with X̃ = VUᵀ and P = UΣUᵀ.
pub fn polar_standardize(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (v, s, ut) = linalg::thin_svd(x);
    check_full_rank(&s)?;
    let x_tilde = &v * &ut;
    let p = linalg::symmetrize(&(ut.transpose() * DMatrix::from_diagonal(&s) * &ut));
    Ok((x_tilde, p))
}

/// Relative spread of the spectrum below which every basis is an
/// eigenbasis; the canonical one is then used.
const ISOTROPIC_TOLERANCE: f64 = 1e-12;

fn isotropic(values: &DVector<f64>) -> bool {
    values[0] - values[values.len() - 1] <= ISOTROPIC_TOLERANCE * values[0]
}

/// Flips columns of `a` (and of `partner` in tandem) so that each column's
/// largest-magnitude entry is positive.
fn fix_signs(a: &mut DMatrix<f64>, partner: Option<&mut DMatrix<f64>>) {
    let mut flips = Vec::with_capacity(a.ncols());
    for j in 0..a.ncols() {
        let mut best = 0usize;
        for i in 1..a.nrows() {
            if a[(i, j)].abs() > a[(best, j)].abs() {
                best = i;
            }
        }
        flips.push(a[(best, j)] < 0.0);
    }
    for (j, &flip) in flips.iter().enumerate() {
        if flip {
            a.column_mut(j).neg_mut();
        }
    }
    if let Some(p) = partner {
        for (j, &flip) in flips.iter().enumerate() {
            if flip {
                p.column_mut(j).neg_mut();
            }
        }
    }
}

/// Thin SVD of OᵀW^{1/2} = A Σ Ṽᵀ, giving X̃ = ṼAᵀ and P = AΣAᵀ.
pub fn srqd(o: &DMatrix<f64>, w: &WeightMatrix) -> Result<ShapeTensor> {
    if w.len() != o.nrows() {
        return Err(Error::Contract(format!(
            "weight count {} does not match landmark count {}",
            w.len(),
            o.nrows()
        )));
    }
    let sw = w.sqrt_diag();
    let weighted = DMatrix::from_fn(o.nrows(), o.ncols(), |i, j| sw[i] * o[(i, j)]);
    let (mut v_tilde, sigma, at) = linalg::thin_svd(&weighted);
    check_full_rank(&sigma)?;
    let mut a = at.transpose();
    if isotropic(&sigma) {
        // Equal singular values: take A = I and rebuild Ṽ = W^{1/2}O Σ^{-1}.
        a = DMatrix::identity(o.ncols(), o.ncols());
        v_tilde = weighted.clone();
        for (j, &s) in sigma.iter().enumerate() {
            v_tilde.column_mut(j).unscale_mut(s);
        }
    }
    fix_signs(&mut a, Some(&mut v_tilde));
    let x_tilde = &v_tilde * a.transpose();
    let p = linalg::symmetrize(&(&a * DMatrix::from_diagonal(&sigma) * a.transpose()));
    Ok(ShapeTensor {
        x_tilde,
        p,
        a,
        sigma,
        v_tilde,
        weights: w.clone(),
    })
}

/// Eigendecomposition of the d×d matrix OᵀWO = A Σ² Aᵀ.
pub fn weighted_eigensolve(o: &DMatrix<f64>, w: &WeightMatrix) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let wo = DMatrix::from_fn(o.nrows(), o.ncols(), |i, j| w.diag[i] * o[(i, j)]);
    let g = o.transpose() * wo;
    let (sigma2, mut a) = linalg::sym_eigen(&g);
    if !(sigma2[sigma2.len() - 1] > 0.0) {
        return Err(Error::NearDegenerate { ratio: 0.0 });
    }
    check_full_rank(&sigma2.map(f64::sqrt))?;
    if isotropic(&sigma2) {
        a = DMatrix::identity(o.ncols(), o.ncols());
    }
    fix_signs(&mut a, None);
    Ok((a, sigma2))
}

/// Periodic interpolant of a centered landmark matrix on s ∈ [−π, π).
#[derive(Debug, Clone)]
pub struct CurveSpline {
    spline: PeriodicSpline,
}

impl CurveSpline {
    pub fn new(o: &DMatrix<f64>) -> Result<Self> {
        if o.ncols() != 2 {
            return Err(Error::Contract("planar curves only".into()));
        }
        let rows: Vec<[f64; 2]> = (0..o.nrows()).map(|i| [o[(i, 0)], o[(i, 1)]]).collect();
        Ok(Self {
            spline: PeriodicSpline::fit_uniform(&rows, 2.0 * PI)?,
        })
    }

    pub fn eval(&self, s: f64) -> [f64; 2] {
        self.spline.eval(s + PI)
    }
}

/// vᵀ(s) = oᵀ(s)·A·Σ^{-2}.
pub fn eval_eigenfunctions(spline: &CurveSpline, a: &DMatrix<f64>, sigma: &DVector<f64>, s: f64) -> DVector<f64> {
    let o = spline.eval(s);
    DVector::from_fn(a.ncols(), |j, _| {
        (o[0] * a[(0, j)] + o[1] * a[(1, j)]) / (sigma[j] * sigma[j])
    })
}

/// Largest speed of the trigonometric interpolant, for the parametrization
/// over [0, 1], sampled on a grid four times denser than the landmarks.
pub fn lipschitz_estimate(x: &DMatrix<f64>) -> Result<f64> {
    lipschitz_estimate_oversampled(x, 4)
}

pub fn lipschitz_estimate_oversampled(x: &DMatrix<f64>, factor: usize) -> Result<f64> {
    let n = x.nrows();
    if n < 8 || !n.is_multiple_of(2) {
        return Err(Error::Contract(format!("need an even n >= 8, got {n}")));
    }
    let m = n * factor.max(1);
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(m);
    let mut derivs: Vec<Vec<Complex<f64>>> = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let mut buf: Vec<Complex<f64>> = x.column(j).iter().map(|&v| Complex::new(v, 0.0)).collect();
        forward.process(&mut buf);
        let mut dense = vec![Complex::new(0.0, 0.0); m];
        for (k, c) in buf.iter().enumerate() {
            if 2 * k == n {
                continue;
            }
            let (freq, slot) = if 2 * k < n {
                (k as f64, k)
            } else {
                (k as f64 - n as f64, m - (n - k))
            };
            dense[slot] = Complex::new(0.0, freq) * c / n as f64;
        }
        inverse.process(&mut dense);
        derivs.push(dense);
    }
    let mut best: f64 = 0.0;
    for i in 0..m {
        let speed2: f64 = derivs.iter().map(|d| d[i].re * d[i].re).sum();
        best = best.max(speed2.sqrt());
    }
    Ok(2.0 * PI * best)
}
