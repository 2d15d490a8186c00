use nalgebra::{DMatrix, DVector};

use super::Geometry;
use crate::error::{Error, Result};
use crate::linalg;

/// Symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdPoint {
    pub mat: DMatrix<f64>,
}

impl SpdPoint {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if !mat.is_square() || mat.is_empty() {
            return Err(Error::Contract(format!("SPD matrix must be square, got {:?}", mat.shape())));
        }
        let scale = mat.abs().max().max(1.0);
        let asym = (&mat - mat.transpose()).abs().max();
        if !(asym <= 1e-12 * scale) {
            return Err(Error::Contract(format!("matrix is not symmetric (deviation {asym:e})")));
        }
        let (l, _) = linalg::sym_eigen(&mat);
        let low = l[l.len() - 1];
        if !(low > 0.0) {
            return Err(Error::Contract(format!("matrix is not positive definite (eigenvalue {low:e})")));
        }
        Ok(Self {
            mat: linalg::symmetrize(&mat),
        })
    }

    pub fn d(&self) -> usize {
        self.mat.nrows()
    }

    fn sqrt(&self) -> DMatrix<f64> {
        linalg::sym_apply(&self.mat, f64::sqrt)
    }

    fn inv_sqrt(&self) -> DMatrix<f64> {
        linalg::sym_apply(&self.mat, |x| 1.0 / x.sqrt())
    }
}

/// P^{1/2} logm(P^{-1/2} Q P^{-1/2}) P^{1/2}.
pub fn spd_log(base: &SpdPoint, target: &SpdPoint) -> DMatrix<f64> {
    let (h, ih) = (base.sqrt(), base.inv_sqrt());
    let inner = linalg::sym_apply(&(&ih * &target.mat * &ih), f64::ln);
    linalg::symmetrize(&(&h * inner * &h))
}

/// P^{1/2} expm(P^{-1/2} S P^{-1/2}) P^{1/2}.
pub fn spd_exp(base: &SpdPoint, tangent: &DMatrix<f64>) -> SpdPoint {
    let (h, ih) = (base.sqrt(), base.inv_sqrt());
    let inner = linalg::sym_apply(&(&ih * tangent * &ih), f64::exp);
    SpdPoint {
        mat: linalg::symmetrize(&(&h * inner * &h)),
    }
}

/// Affine-invariant distance ‖logm(P^{-1/2} Q P^{-1/2})‖_F.
pub fn spd_distance(a: &SpdPoint, b: &SpdPoint) -> f64 {
    let ih = a.inv_sqrt();
    linalg::sym_apply(&(&ih * &b.mat * &ih), f64::ln).norm()
}

/// SPD cone with the affine-invariant metric.
#[derive(Debug, Clone, Copy, Default)]
pub struct Spd;

/// Whitening factors at the base. Tangent S has coordinates of
/// Ŝ = P^{-1/2} S P^{-1/2}: diagonal entries first, then √2 times the upper
/// off-diagonal entries row by row.
#[derive(Debug, Clone)]
pub struct SpdChart {
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
}

impl SpdChart {
    pub fn new(base: &SpdPoint) -> Self {
        Self {
            sqrt: base.sqrt(),
            inv_sqrt: base.inv_sqrt(),
        }
    }
}

fn off_diagonal(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..d).flat_map(move |i| (i + 1..d).map(move |j| (i, j)))
}

impl Geometry for Spd {
    type Point = SpdPoint;
    type Chart = SpdChart;

    fn log(&self, base: &SpdPoint, target: &SpdPoint) -> Result<DMatrix<f64>> {
        Ok(spd_log(base, target))
    }

    fn exp(&self, base: &SpdPoint, tangent: &DMatrix<f64>) -> Result<SpdPoint> {
        Ok(spd_exp(base, tangent))
    }

    fn norm(&self, base: &SpdPoint, tangent: &DMatrix<f64>) -> f64 {
        let ih = base.inv_sqrt();
        (&ih * tangent * &ih).norm()
    }

    /// Arithmetic mean with its spectrum floored away from zero.
    fn initial(&self, points: &[SpdPoint]) -> Result<SpdPoint> {
        let first = points.first().ok_or_else(|| Error::Contract("empty point set".into()))?;
        let mut acc = DMatrix::zeros(first.d(), first.d());
        for p in points {
            acc += &p.mat;
        }
        acc /= points.len() as f64;
        let top = linalg::sym_eigen(&acc).0[0].max(f64::MIN_POSITIVE);
        SpdPoint::new(linalg::sym_apply(&acc, |x| x.max(1e-12 * top)))
    }

    fn matrix<'a>(&self, point: &'a SpdPoint) -> &'a DMatrix<f64> {
        &point.mat
    }

    fn chart(&self, base: &SpdPoint) -> Result<SpdChart> {
        Ok(SpdChart::new(base))
    }

    fn chart_dim(&self, chart: &SpdChart) -> usize {
        let d = chart.sqrt.nrows();
        d * (d + 1) / 2
    }

    fn to_coords(&self, chart: &SpdChart, tangent: &DMatrix<f64>) -> DVector<f64> {
        let s = &chart.inv_sqrt * tangent * &chart.inv_sqrt;
        let d = s.nrows();
        let diag = (0..d).map(|i| s[(i, i)]);
        let off = off_diagonal(d).map(|(i, j)| std::f64::consts::SQRT_2 * 0.5 * (s[(i, j)] + s[(j, i)]));
        DVector::from_iterator(self.chart_dim(chart), diag.chain(off))
    }

    fn from_coords(&self, chart: &SpdChart, coords: &DVector<f64>) -> DMatrix<f64> {
        let d = chart.sqrt.nrows();
        let mut s = DMatrix::zeros(d, d);
        for i in 0..d {
            s[(i, i)] = coords[i];
        }
        for (k, (i, j)) in off_diagonal(d).enumerate() {
            let v = coords[d + k] / std::f64::consts::SQRT_2;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
        &chart.sqrt * s * &chart.sqrt
    }
}
