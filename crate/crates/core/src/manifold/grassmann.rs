use nalgebra::{DMatrix, DVector};

use super::Geometry;
use crate::error::{Error, Result};
use crate::linalg;

/// Orthonormal representative of a d-plane in R^n.
#[derive(Debug, Clone, PartialEq)]
pub struct GrassmannPoint {
    pub rep: DMatrix<f64>,
}

impl GrassmannPoint {
    pub fn new(rep: DMatrix<f64>) -> Result<Self> {
        let d = rep.ncols();
        let err = (rep.transpose() * &rep - DMatrix::identity(d, d)).abs().max();
        if !(err <= 1e-10) {
            return Err(Error::Contract(format!(
                "representative is not orthonormal (deviation {err:e})"
            )));
        }
        Ok(Self { rep })
    }

    /// Closest orthonormal frame spanning the same plane as a full-rank `m`.
    pub fn from_frame(m: &DMatrix<f64>) -> Self {
        Self {
            rep: linalg::reorthonormalize(m),
        }
    }

    pub fn n(&self) -> usize {
        self.rep.nrows()
    }

    pub fn d(&self) -> usize {
        self.rep.ncols()
    }
}

/// Decomposition of `x` relative to `y`: principal angles (ascending), the
/// orthonormal directions h_k of the horizontal part and the left factor of
/// yᵀx, so that Log_y(x) = Σ θ_k h_k q_kᵀ.
struct Principal {
    theta: DVector<f64>,
    h: DMatrix<f64>,
    q: DMatrix<f64>,
}

fn principal(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Principal {
    let m = y.transpose() * x;
    let (q, c, rt) = linalg::thin_svd(&m);
    // Rotating x by R makes yᵀ(xR) = q·diag(c): column k of xR splits into
    // c_k·(y q_k) plus an orthogonal part of norm sin θ_k.
    let xr = x * rt.transpose();
    let perp = &xr - y * (y.transpose() * &xr);
    let d = x.ncols();
    let mut theta = DVector::zeros(d);
    let mut h = DMatrix::zeros(x.nrows(), d);
    for k in 0..d {
        let col = perp.column(k);
        let s = col.norm();
        theta[k] = s.atan2(c[k]);
        if s > 0.0 {
            h.set_column(k, &(col / s));
        }
    }
    Principal { theta, h, q }
}

/// Principal angles between two planes, ascending.
pub fn principal_angles(a: &GrassmannPoint, b: &GrassmannPoint) -> DVector<f64> {
    principal(&a.rep, &b.rep).theta
}

/// Horizontal tangent Δ at `base` with Exp_base(Δ) = [target].
pub fn gr_log(base: &GrassmannPoint, target: &GrassmannPoint) -> Result<DMatrix<f64>> {
    let p = principal(&base.rep, &target.rep);
    let largest = p.theta.max();
    if largest >= std::f64::consts::FRAC_PI_2 - 1e-12 {
        return Err(Error::OutOfInjectivity { angle: largest });
    }
    let scaled = DMatrix::from_fn(p.h.nrows(), p.h.ncols(), |i, k| p.h[(i, k)] * p.theta[k]);
    Ok(scaled * p.q.transpose())
}

/// Geodesic from `base` with initial velocity Δ, evaluated at time one.
pub fn gr_exp(base: &GrassmannPoint, tangent: &DMatrix<f64>) -> GrassmannPoint {
    let (u, s, vt) = linalg::thin_svd(tangent);
    let d = s.len();
    let cos = DMatrix::from_diagonal(&s.map(f64::cos));
    let sin = DMatrix::from_diagonal(&s.map(f64::sin));
    let moved = &base.rep * vt.transpose() * cos * &vt + u.columns(0, d) * sin * &vt;
    GrassmannPoint::from_frame(&moved)
}

/// √(Σ θ_k²) over the principal angles.
pub fn gr_distance(a: &GrassmannPoint, b: &GrassmannPoint) -> f64 {
    principal_angles(a, b).norm()
}

/// Grassmannian with the Frobenius metric on horizontal representatives.
#[derive(Debug, Clone, Copy, Default)]
pub struct Grassmann;

/// Orthonormal basis of the complement of the base plane; tangent Δ has
/// chart coordinates vec(Y⊥ᵀΔ).
#[derive(Debug, Clone)]
pub struct GrassmannChart {
    pub complement: DMatrix<f64>,
    pub d: usize,
}

impl GrassmannChart {
    pub fn new(base: &GrassmannPoint) -> Self {
        let (n, d) = (base.n(), base.d());
        let mut padded = DMatrix::zeros(n, n);
        padded.columns_mut(0, d).copy_from(&base.rep);
        let q = padded.qr().q();
        Self {
            complement: q.columns(d, n - d).into_owned(),
            d,
        }
    }

    /// Ambient horizontal tangent vectors, vectorized column-major, for each
    /// column of chart coordinates.
    pub fn ambient_basis(&self, coords: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.complement.nrows();
        let mut out = DMatrix::zeros(n * self.d, coords.ncols());
        for k in 0..coords.ncols() {
            let b = linalg::unvec_col_major(&coords.column(k).into_owned(), n - self.d, self.d);
            out.set_column(k, &linalg::vec_col_major(&(&self.complement * b)));
        }
        out
    }
}

impl Geometry for Grassmann {
    type Point = GrassmannPoint;
    type Chart = GrassmannChart;

    fn log(&self, base: &GrassmannPoint, target: &GrassmannPoint) -> Result<DMatrix<f64>> {
        gr_log(base, target)
    }

    fn exp(&self, base: &GrassmannPoint, tangent: &DMatrix<f64>) -> Result<GrassmannPoint> {
        Ok(gr_exp(base, tangent))
    }

    fn norm(&self, _base: &GrassmannPoint, tangent: &DMatrix<f64>) -> f64 {
        tangent.norm()
    }

    /// Dominant d-plane of the averaged projectors, by subspace iteration
    /// started from the first point. Averaging representatives directly is
    /// meaningless because each is defined only up to a rotation.
    fn initial(&self, points: &[GrassmannPoint]) -> Result<GrassmannPoint> {
        let first = points.first().ok_or_else(|| Error::Contract("empty point set".into()))?;
        let mut y = first.clone();
        for _ in 0..200 {
            let mut acc = DMatrix::zeros(y.n(), y.d());
            for p in points {
                acc += &p.rep * (p.rep.transpose() * &y.rep);
            }
            let next = GrassmannPoint::from_frame(&acc);
            let moved = gr_distance(&y, &next);
            y = next;
            if moved < 1e-13 {
                break;
            }
        }
        Ok(y)
    }

    fn matrix<'a>(&self, point: &'a GrassmannPoint) -> &'a DMatrix<f64> {
        &point.rep
    }

    fn chart(&self, base: &GrassmannPoint) -> Result<GrassmannChart> {
        Ok(GrassmannChart::new(base))
    }

    fn chart_dim(&self, chart: &GrassmannChart) -> usize {
        chart.complement.ncols() * chart.d
    }

    fn to_coords(&self, chart: &GrassmannChart, tangent: &DMatrix<f64>) -> DVector<f64> {
        linalg::vec_col_major(&(chart.complement.transpose() * tangent))
    }

    fn from_coords(&self, chart: &GrassmannChart, coords: &DVector<f64>) -> DMatrix<f64> {
        let b = linalg::unvec_col_major(coords, chart.complement.ncols(), chart.d);
        &chart.complement * b
    }
}
