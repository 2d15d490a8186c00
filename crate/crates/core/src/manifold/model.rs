use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gr_distance, gr_exp, gr_log, karcher_mean, spd_distance, spd_exp, spd_log, tangent_pca};
use super::{Geometry, Grassmann, GrassmannChart, GrassmannPoint, KarcherOptions, Spd, SpdChart, SpdPoint};
use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::WeightMatrix;
use crate::sst::ShapeTensor;

pub const MODEL_FORMAT: &str = "shapetensor-ensemble-model";
pub const MODEL_VERSION: u32 = 1;

/// Undulation and scale factors of one curve.
#[derive(Debug, Clone)]
pub struct Factors {
    pub id: String,
    pub x_tilde: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl Factors {
    pub fn from_tensor(id: impl Into<String>, t: &ShapeTensor) -> Self {
        Self {
            id: id.into(),
            x_tilde: t.x_tilde.clone(),
            p: t.p.clone(),
        }
    }
}

/// Normal coordinates of one curve in the learned chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCoords {
    pub curve_id: String,
    pub t: Vec<f64>,
    pub l: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub curves: usize,
    pub gr_iterations: usize,
    pub gr_residual: f64,
    pub spd_iterations: usize,
    pub spd_residual: f64,
    pub karcher: KarcherOptions,
}

/// Karcher means and tangent PCA charts of both factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub format: String,
    pub version: u32,
    pub n: usize,
    pub d: usize,
    pub r: usize,
    #[serde(with = "linalg::serde_rows")]
    pub gr_mean: DMatrix<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub spd_mean: DMatrix<f64>,
    /// nd × r; columns are vectorized horizontal tangents at `gr_mean`.
    #[serde(with = "linalg::serde_rows")]
    pub gr_basis: DMatrix<f64>,
    /// Columns are coordinates in the whitened chart at `spd_mean`.
    #[serde(with = "linalg::serde_rows")]
    pub spd_basis: DMatrix<f64>,
    pub gr_spectrum: Vec<f64>,
    pub spd_spectrum: Vec<f64>,
    pub fit: FitMetadata,
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: EnsembleModel,
    pub coords: Vec<ShapeCoords>,
    /// Product-manifold distance of each curve from the intrinsic mean.
    pub distances: Vec<f64>,
}

/// Rotates the undulation representative onto the mean, Q = polar(X̃ᵀY₀), and
/// carries the scale along: (X̃Q, QᵀPQ).
fn align_to(mean: &GrassmannPoint, f: &Factors) -> Result<(GrassmannPoint, SpdPoint)> {
    let x = GrassmannPoint::new(f.x_tilde.clone())?;
    let m = x.rep.transpose() * &mean.rep;
    let s = linalg::singular_values(&m);
    if !(s[s.len() - 1] > 1e-12) {
        let angle = super::principal_angles(mean, &x).max();
        return Err(Error::OutOfInjectivity { angle });
    }
    let q = linalg::polar_factor(&m);
    let p = SpdPoint::new(linalg::symmetrize(&(q.transpose() * &f.p * &q)))?;
    Ok((GrassmannPoint { rep: &x.rep * &q }, p))
}

impl EnsembleModel {
    pub fn fit(factors: &[Factors], r: usize, opts: KarcherOptions) -> Result<FittedModel> {
        let first = factors
            .first()
            .ok_or_else(|| Error::Contract("cannot fit a model to an empty ensemble".into()))?;
        let (n, d) = first.x_tilde.shape();
        if let Some(bad) = factors.iter().find(|f| f.x_tilde.shape() != (n, d) || f.p.shape() != (d, d)) {
            return Err(Error::Contract(format!("curve {} has inconsistent factor shapes", bad.id)));
        }
        let gr_points: Vec<GrassmannPoint> = factors
            .iter()
            .map(|f| GrassmannPoint::new(f.x_tilde.clone()))
            .collect::<Result<_>>()?;
        let gr = karcher_mean(&Grassmann, &gr_points, opts)?;
        log::debug!("Grassmann mean after {} iterations, residual {:e}", gr.iterations, gr.residual);

        let aligned: Vec<(GrassmannPoint, SpdPoint)> =
            factors.par_iter().map(|f| align_to(&gr.mean, f)).collect::<Result<_>>()?;
        let (gr_aligned, spd_points): (Vec<_>, Vec<_>) = aligned.into_iter().unzip();
        let spd = karcher_mean(&Spd, &spd_points, opts)?;
        log::debug!("SPD mean after {} iterations, residual {:e}", spd.iterations, spd.residual);

        let gr_pca = tangent_pca(&Grassmann, &gr_aligned, &gr.mean, r)?;
        let spd_dim = d * (d + 1) / 2;
        let spd_pca = tangent_pca(&Spd, &spd_points, &spd.mean, spd_dim)?;
        let gr_basis = GrassmannChart::new(&gr.mean).ambient_basis(&gr_pca.basis);

        let coords = factors
            .iter()
            .enumerate()
            .map(|(i, f)| ShapeCoords {
                curve_id: f.id.clone(),
                t: gr_pca.coords.row(i).iter().copied().collect(),
                l: spd_pca.coords.row(i).iter().copied().collect(),
            })
            .collect();
        let distances = gr_aligned
            .iter()
            .zip(&spd_points)
            .map(|(x, p)| gr_distance(&gr.mean, x).hypot(spd_distance(&spd.mean, p)))
            .collect();

        let model = EnsembleModel {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            n,
            d,
            r,
            gr_mean: gr.mean.rep,
            spd_mean: spd.mean.mat,
            gr_basis,
            spd_basis: spd_pca.basis,
            gr_spectrum: gr_pca.spectrum.iter().copied().collect(),
            spd_spectrum: spd_pca.spectrum.iter().copied().collect(),
            fit: FitMetadata {
                curves: factors.len(),
                gr_iterations: gr.iterations,
                gr_residual: gr.residual,
                spd_iterations: spd.iterations,
                spd_residual: spd.residual,
                karcher: opts,
            },
        };
        Ok(FittedModel {
            model,
            coords,
            distances,
        })
    }

    pub fn gr_point(&self) -> GrassmannPoint {
        GrassmannPoint {
            rep: self.gr_mean.clone(),
        }
    }

    pub fn spd_point(&self) -> SpdPoint {
        SpdPoint {
            mat: self.spd_mean.clone(),
        }
    }

    fn check(&self, f: &Factors) -> Result<()> {
        if f.x_tilde.shape() != (self.n, self.d) || f.p.shape() != (self.d, self.d) {
            return Err(Error::Contract(format!(
                "curve {} does not match the model dimensions n={}, d={}",
                f.id, self.n, self.d
            )));
        }
        Ok(())
    }

    /// Factors expressed in the frame of the mean undulation.
    pub fn align(&self, f: &Factors) -> Result<(GrassmannPoint, SpdPoint)> {
        self.check(f)?;
        align_to(&self.gr_point(), f)
    }

    pub fn encode(&self, f: &Factors) -> Result<ShapeCoords> {
        let (x, p) = self.align(f)?;
        let delta = gr_log(&self.gr_point(), &x)?;
        let t = self.gr_basis.transpose() * linalg::vec_col_major(&delta);
        let mean = self.spd_point();
        let chart = SpdChart::new(&mean);
        let l = self.spd_basis.transpose() * Spd.to_coords(&chart, &spd_log(&mean, &p));
        Ok(ShapeCoords {
            curve_id: f.id.clone(),
            t: t.iter().copied().collect(),
            l: l.iter().copied().collect(),
        })
    }

    /// Product-manifold distance from the intrinsic mean, without truncation.
    pub fn distance(&self, f: &Factors) -> Result<f64> {
        let (x, p) = self.align(f)?;
        Ok(gr_distance(&self.gr_point(), &x).hypot(spd_distance(&self.spd_point(), &p)))
    }

    /// X̃(t)·P(ℓ), which stands in for W^{1/2}O.
    pub fn reconstruct(&self, c: &ShapeCoords) -> Result<DMatrix<f64>> {
        if c.t.len() != self.r || c.l.len() != self.spd_basis.ncols() {
            return Err(Error::Contract(format!(
                "coordinates have dimensions ({}, {}), model expects ({}, {})",
                c.t.len(),
                c.l.len(),
                self.r,
                self.spd_basis.ncols()
            )));
        }
        let t = DVector::from_column_slice(&c.t);
        let delta = linalg::unvec_col_major(&(&self.gr_basis * t), self.n, self.d);
        let x = gr_exp(&self.gr_point(), &delta);
        let mean = self.spd_point();
        let chart = SpdChart::new(&mean);
        let l = DVector::from_column_slice(&c.l);
        let p = spd_exp(&mean, &Spd.from_coords(&chart, &(&self.spd_basis * l)));
        Ok(x.rep * p.mat)
    }

    /// Reconstruction mapped back through W^{-1/2}.
    pub fn reconstruct_weighted(&self, c: &ShapeCoords, w: &WeightMatrix) -> Result<DMatrix<f64>> {
        if w.len() != self.n {
            return Err(Error::Contract(format!("weights have {} nodes, model has {}", w.len(), self.n)));
        }
        let mut o = self.reconstruct(c)?;
        for i in 0..self.n {
            let s = w.diag[i].sqrt();
            o.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        Ok(o)
    }

    /// The same model restricted to its leading `r` undulation directions.
    pub fn truncated(&self, r: usize) -> Result<Self> {
        if r == 0 || r > self.r {
            return Err(Error::RankExceeded {
                requested: r,
                achievable: self.r,
            });
        }
        let mut m = self.clone();
        m.gr_basis = self.gr_basis.columns(0, r).into_owned();
        m.r = r;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported model artifact {} v{}",
                m.format, m.version
            )));
        }
        if m.gr_mean.shape() != (m.n, m.d) || m.gr_basis.shape() != (m.n * m.d, m.r) {
            return Err(Error::Config("model matrices do not match its declared dimensions".into()));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ensemble(n: usize, count: usize, seed: u64) -> Vec<Factors> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|k| {
                let o = DMatrix::from_fn(n, 2, |i, j| {
                    let s = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    let wobble = 1.0 + 0.1 * ((2.0 * s).cos() + 0.5 * (3.0 * s).sin());
                    if j == 0 { wobble * s.cos() } else { wobble * s.sin() }
                }) + DMatrix::from_fn(n, 2, |_, _| rng.random_range(-0.05..0.05));
                let m = DMatrix::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
                let x = &o * m;
                let (u, s, vt) = linalg::thin_svd(&x);
                Factors {
                    id: format!("c{k}"),
                    x_tilde: &u * &vt,
                    p: vt.transpose() * DMatrix::from_diagonal(&s) * &vt,
                }
            })
            .collect()
    }

    #[test]
    fn full_rank_roundtrip_recovers_landmarks() {
        let fs = ensemble(8, 30, 1);
        let fitted = EnsembleModel::fit(&fs, 12, KarcherOptions::default()).unwrap();
        let model = &fitted.model;
        for (f, c) in fs.iter().zip(&fitted.coords) {
            let (x, p) = model.align(f).unwrap();
            let target = x.rep * p.mat;
            let rec = model.reconstruct(c).unwrap();
            assert!(linalg::relative_frobenius(&rec, &target) < 1e-6);
            let enc = model.encode(f).unwrap();
            let dt: f64 = enc.t.iter().zip(&c.t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dt < 1e-9);
        }
    }

    #[test]
    fn origin_of_chart_is_mean_product() {
        let fs = ensemble(10, 20, 2);
        let model = EnsembleModel::fit(&fs, 4, KarcherOptions::default()).unwrap().model;
        let zero = ShapeCoords {
            curve_id: "origin".into(),
            t: vec![0.0; 4],
            l: vec![0.0; 3],
        };
        let rec = model.reconstruct(&zero).unwrap();
        assert!((rec - &model.gr_mean * &model.spd_mean).abs().max() < 1e-12);
    }

    #[test]
    fn basis_is_orthonormal_and_horizontal() {
        let fs = ensemble(12, 25, 3);
        let model = EnsembleModel::fit(&fs, 6, KarcherOptions::default()).unwrap().model;
        let b = &model.gr_basis;
        assert!((b.transpose() * b - DMatrix::identity(6, 6)).abs().max() < 1e-10);
        for k in 0..6 {
            let t = linalg::unvec_col_major(&b.column(k).into_owned(), 12, 2);
            assert!((model.gr_mean.transpose() * t).abs().max() < 1e-10);
        }
        let s = &model.spd_basis;
        assert!((s.transpose() * s - DMatrix::identity(3, 3)).abs().max() < 1e-10);
    }

    #[test]
    fn json_roundtrip_and_version_check() {
        let fs = ensemble(8, 15, 4);
        let model = EnsembleModel::fit(&fs, 3, KarcherOptions::default()).unwrap().model;
        let text = model.to_json().unwrap();
        let back = EnsembleModel::from_json(&text).unwrap();
        assert_eq!(back.r, 3);
        assert!((back.gr_basis - &model.gr_basis).abs().max() < 1e-15);
        let bumped = text.replace("\"version\": 1", "\"version\": 99");
        assert!(matches!(EnsembleModel::from_json(&bumped), Err(Error::Config(_))));
    }

    #[test]
    fn truncation_keeps_leading_directions() {
        let fs = ensemble(8, 15, 5);
        let model = EnsembleModel::fit(&fs, 6, KarcherOptions::default()).unwrap().model;
        let small = model.truncated(2).unwrap();
        assert_eq!(small.gr_basis.ncols(), 2);
        assert!(matches!(model.truncated(7), Err(Error::RankExceeded { .. })));
        let c = small.encode(&fs[0]).unwrap();
        assert_eq!(c.t.len(), 2);
        assert!(small.reconstruct(&c).is_ok());
    }

    #[test]
    fn distances_are_non_negative_and_consistent() {
        let fs = ensemble(8, 15, 6);
        let fitted = EnsembleModel::fit(&fs, 3, KarcherOptions::default()).unwrap();
        for (f, &d) in fs.iter().zip(&fitted.distances) {
            assert!(d >= 0.0);
            assert!((fitted.model.distance(f).unwrap() - d).abs() < 1e-10);
        }
    }
}
