//! Riemannian statistics on the two factor manifolds: the Grassmannian of
//! undulations and the SPD cone of scales.

mod grassmann;
mod model;
mod spd;

pub use grassmann::{gr_distance, gr_exp, gr_log, principal_angles, Grassmann, GrassmannChart, GrassmannPoint};
pub use model::{EnsembleModel, Factors, FitMetadata, FittedModel, ShapeCoords, MODEL_FORMAT, MODEL_VERSION};
pub use spd::{spd_distance, spd_exp, spd_log, Spd, SpdChart, SpdPoint};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Exp/log structure and an orthonormal tangent chart at each base point.
pub trait Geometry: Sync {
    type Point: Clone + Send + Sync;
    type Chart: Sync;

    fn log(&self, base: &Self::Point, target: &Self::Point) -> Result<DMatrix<f64>>;
    fn exp(&self, base: &Self::Point, tangent: &DMatrix<f64>) -> Result<Self::Point>;
    /// Riemannian norm of a tangent vector at `base`.
    fn norm(&self, base: &Self::Point, tangent: &DMatrix<f64>) -> f64;
    /// Extrinsic starting guess for the Karcher iteration.
    fn initial(&self, points: &[Self::Point]) -> Result<Self::Point>;
    fn matrix<'a>(&self, point: &'a Self::Point) -> &'a DMatrix<f64>;

    fn chart(&self, base: &Self::Point) -> Result<Self::Chart>;
    fn chart_dim(&self, chart: &Self::Chart) -> usize;
    fn to_coords(&self, chart: &Self::Chart, tangent: &DMatrix<f64>) -> DVector<f64>;
    fn from_coords(&self, chart: &Self::Chart, coords: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KarcherOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KarcherOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KarcherMean<P> {
    pub mean: P,
    /// Exp steps taken.
    pub iterations: usize,
    /// Norm of the mean log at the returned point.
    pub residual: f64,
}

fn mean_log<G: Geometry>(g: &G, base: &G::Point, points: &[G::Point]) -> Result<DMatrix<f64>> {
    let logs: Vec<Result<DMatrix<f64>>> = points.par_iter().map(|p| g.log(base, p)).collect();
    // Summed in input order so the result does not depend on scheduling.
    let mut sum: Option<DMatrix<f64>> = None;
    for l in logs {
        let l = l?;
        match sum.as_mut() {
            Some(s) => *s += l,
            None => sum = Some(l),
        }
    }
    Ok(sum.expect("non-empty") / points.len() as f64)
}

/// Fixed-point iteration μ ← Exp_μ(mean of Log_μ(points)).
pub fn karcher_mean<G: Geometry>(g: &G, points: &[G::Point], opts: KarcherOptions) -> Result<KarcherMean<G::Point>> {
    if points.is_empty() {
        return Err(Error::Contract("Karcher mean of an empty set".into()));
    }
    let mut mu = g.initial(points)?;
    for it in 0..=opts.max_iter {
        let step = mean_log(g, &mu, points)?;
        let residual = g.norm(&mu, &step);
        if residual < opts.tol {
            return Ok(KarcherMean {
                mean: mu,
                iterations: it,
                residual,
            });
        }
        if it == opts.max_iter {
            return Err(Error::NonConvergence {
                iterations: it,
                residual,
                last: Box::new(g.matrix(&mu).clone()),
            });
        }
        mu = g.exp(&mu, &step)?;
    }
    unreachable!("loop returns on its last pass")
}

#[derive(Debug, Clone)]
pub struct TangentPca {
    /// dim × r orthonormal directions in chart coordinates.
    pub basis: DMatrix<f64>,
    /// N × r coordinates.
    pub coords: DMatrix<f64>,
    /// All min(dim, N) eigenvalues of the second moment, descending.
    pub spectrum: DVector<f64>,
    pub dim: usize,
}

/// PCA of the log images at `mean`, uncentered since their mean vanishes at
/// a Karcher mean.
pub fn tangent_pca<G: Geometry>(g: &G, points: &[G::Point], mean: &G::Point, r: usize) -> Result<TangentPca> {
    let chart = g.chart(mean)?;
    let dim = g.chart_dim(&chart);
    let achievable = dim.min(points.len());
    if r == 0 || r > achievable {
        return Err(Error::RankExceeded {
            requested: r,
            achievable,
        });
    }
    let cols: Vec<Result<DVector<f64>>> = points
        .par_iter()
        .map(|p| g.log(mean, p).map(|l| g.to_coords(&chart, &l)))
        .collect();
    let mut z = DMatrix::zeros(dim, points.len());
    for (j, c) in cols.into_iter().enumerate() {
        z.set_column(j, &c?);
    }
    let (mut u, s) = if dim <= points.len() {
        // Eigenvectors of the small second-moment matrix give the same
        // directions as the SVD at a fraction of the cost.
        let (l, v) = linalg::sym_eigen(&(&z * z.transpose()));
        (v, l.map(|x| x.max(0.0).sqrt()))
    } else {
        let (u, s, _) = linalg::thin_svd(&z);
        (u, s)
    };
    for k in 0..u.ncols() {
        let mut col = u.column_mut(k);
        let lead = col.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            col.neg_mut();
        }
    }
    let basis = u.columns(0, r).into_owned();
    let coords = z.transpose() * &basis;
    let spectrum = s.map(|x| x * x / points.len() as f64);
    Ok(TangentPca {
        basis,
        coords,
        spectrum,
        dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, count: usize, spread: f64, seed: u64) -> (GrassmannPoint, Vec<GrassmannPoint>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = GrassmannPoint::from_frame(&DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0)));
        let pts = (0..count)
            .map(|_| {
                let raw = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-spread..spread));
                let h = &raw - &base.rep * (base.rep.transpose() * &raw);
                let rot = rng.random_range(0.0..6.0f64);
                let r = DMatrix::from_row_slice(2, 2, &[rot.cos(), -rot.sin(), rot.sin(), rot.cos()]);
                GrassmannPoint { rep: gr_exp(&base, &h).rep * r }
            })
            .collect();
        (base, pts)
    }

    #[test]
    fn identical_points_need_no_iteration() {
        let (base, _) = cloud(10, 1, 0.1, 1);
        let pts = vec![base.clone(); 5];
        let m = karcher_mean(&Grassmann, &pts, KarcherOptions::default()).unwrap();
        assert!(m.iterations <= 1);
        assert!(gr_distance(&m.mean, &base) < 1e-12);
    }

    #[test]
    fn spd_geodesic_midpoint() {
        let e2 = std::f64::consts::E.powi(2);
        let pts = vec![
            SpdPoint::new(DMatrix::identity(2, 2)).unwrap(),
            SpdPoint::new(DMatrix::identity(2, 2) * e2).unwrap(),
        ];
        let m = karcher_mean(&Spd, &pts, KarcherOptions::default()).unwrap();
        assert!((m.mean.mat - DMatrix::identity(2, 2) * std::f64::consts::E).abs().max() < 1e-9);
    }

    #[test]
    fn grassmann_mean_satisfies_first_order_condition() {
        let (base, pts) = cloud(15, 40, 0.2, 2);
        let opts = KarcherOptions::default();
        let m = karcher_mean(&Grassmann, &pts, opts).unwrap();
        assert!(m.residual < opts.tol);
        let step = mean_log(&Grassmann, &m.mean, &pts).unwrap();
        assert!(step.norm() < opts.tol);
        assert!(gr_distance(&m.mean, &base) < 0.2);
    }

    #[test]
    fn iteration_cap_reports_last_iterate() {
        let (_, pts) = cloud(15, 10, 0.3, 3);
        let opts = KarcherOptions { tol: 1e-300, max_iter: 2 };
        match karcher_mean(&Grassmann, &pts, opts) {
            Err(Error::NonConvergence { iterations, last, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(last.shape(), (15, 2));
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn geodesic_family_has_one_dominant_direction() {
        let (base, _) = cloud(12, 1, 0.1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let raw = DMatrix::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0));
        let mut h = &raw - &base.rep * (base.rep.transpose() * &raw);
        h /= h.norm();
        let params: Vec<f64> = (0..21).map(|k| -0.5 + 0.05 * k as f64).collect();
        let pts: Vec<GrassmannPoint> = params.iter().map(|&s| gr_exp(&base, &(&h * s))).collect();
        let m = karcher_mean(&Grassmann, &pts, KarcherOptions::default()).unwrap();
        let pca = tangent_pca(&Grassmann, &pts, &m.mean, 3).unwrap();
        assert!(pca.spectrum[1] < 1e-12 * pca.spectrum[0]);
        let c: Vec<f64> = pca.coords.column(0).iter().copied().collect();
        let increasing = c.windows(2).all(|w| w[1] > w[0]);
        let decreasing = c.windows(2).all(|w| w[1] < w[0]);
        assert!(increasing || decreasing);
        assert!(((c[20] - c[0]).abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pca_moments_match_spectrum() {
        let (_, pts) = cloud(9, 30, 0.3, 5);
        let m = karcher_mean(&Grassmann, &pts, KarcherOptions::default()).unwrap();
        let pca = tangent_pca(&Grassmann, &pts, &m.mean, 5).unwrap();
        let n = pts.len() as f64;
        let mean = pca.coords.row_sum() / n;
        assert!(mean.norm() < 1e-8);
        let cov = pca.coords.transpose() * &pca.coords / n;
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i == j { pca.spectrum[i] } else { 0.0 };
                assert!((cov[(i, j)] - expected).abs() < 1e-8);
            }
        }
        assert!(pca.spectrum.iter().all(|&x| x >= 0.0));
        assert!(pca.spectrum.as_slice().windows(2).all(|w| w[0] >= w[1]));
        assert!((pca.basis.transpose() * &pca.basis - DMatrix::identity(5, 5)).abs().max() < 1e-10);
    }

    #[test]
    fn rank_beyond_tangent_dimension_is_rejected() {
        let (_, pts) = cloud(5, 30, 0.3, 6);
        let m = karcher_mean(&Grassmann, &pts, KarcherOptions::default()).unwrap();
        match tangent_pca(&Grassmann, &pts, &m.mean, 7) {
            Err(Error::RankExceeded { requested, achievable }) => {
                assert_eq!(requested, 7);
                assert_eq!(achievable, 6);
            }
            other => panic!("unexpected {other:?}"),
        }
        let few = &pts[..4];
        assert!(matches!(
            tangent_pca(&Grassmann, few, &m.mean, 5),
            Err(Error::RankExceeded { achievable: 4, .. })
        ));
    }
}
