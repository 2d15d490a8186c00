//! Closed-curve ingest: parsing, validation, orientation, arc-length
//! resampling and weighted centering.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::WeightMatrix;
use crate::spline::PeriodicSpline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCurve {
    pub id: String,
    /// Ensemble (file) the curve came from.
    pub source: String,
    pub vertices: Vec<[f64; 2]>,
    pub closed: bool,
}

impl RawCurve {
    /// Builds a closed curve, dropping consecutive duplicates and a repeated
    /// closing vertex. Fails when fewer than 3 distinct vertices remain.
    pub fn closed(id: impl Into<String>, source: impl Into<String>, vertices: Vec<[f64; 2]>) -> std::result::Result<Self, String> {
        let vertices = dedup_closed(vertices);
        if vertices.len() < 3 {
            return Err(format!("fewer than 3 distinct vertices ({})", vertices.len()));
        }
        Ok(Self {
            id: id.into(),
            source: source.into(),
            vertices,
            closed: true,
        })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Shoelace signed area; positive for counterclockwise order.
    pub fn signed_area(&self) -> f64 {
        signed_area(&self.vertices)
    }
}

fn dedup_closed(mut v: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    v.dedup();
    while v.len() > 1 && v.first() == v.last() {
        v.pop();
    }
    v
}

pub fn signed_area(v: &[[f64; 2]]) -> f64 {
    let m = v.len();
    let (ox, oy) = mean_point(v);
    let mut a = 0.0;
    for i in 0..m {
        let p = v[i];
        let q = v[(i + 1) % m];
        a += (p[0] - ox) * (q[1] - oy) - (q[0] - ox) * (p[1] - oy);
    }
    0.5 * a
}

fn mean_point(v: &[[f64; 2]]) -> (f64, f64) {
    let m = v.len().max(1) as f64;
    let sx: f64 = v.iter().map(|p| p[0]).sum();
    let sy: f64 = v.iter().map(|p| p[1]).sum();
    (sx / m, sy / m)
}

/// Centroid and covariance of the region enclosed by a simple polygon.
pub fn area_moments(v: &[[f64; 2]]) -> Result<([f64; 2], DMatrix<f64>)> {
    let m = v.len();
    let (ox, oy) = mean_point(v);
    let (mut a, mut cx, mut cy, mut ixx, mut iyy, mut ixy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..m {
        let (x0, y0) = (v[i][0] - ox, v[i][1] - oy);
        let (x1, y1) = (v[(i + 1) % m][0] - ox, v[(i + 1) % m][1] - oy);
        let c = x0 * y1 - x1 * y0;
        a += c;
        cx += (x0 + x1) * c;
        cy += (y0 + y1) * c;
        ixx += (x0 * x0 + x0 * x1 + x1 * x1) * c;
        iyy += (y0 * y0 + y0 * y1 + y1 * y1) * c;
        ixy += (x0 * y1 + 2.0 * x0 * y0 + 2.0 * x1 * y1 + x1 * y0) * c;
    }
    a *= 0.5;
    if !(a.abs() > 0.0) || !a.is_finite() {
        return Err(Error::Degenerate("polygon encloses zero area".into()));
    }
    cx /= 6.0 * a;
    cy /= 6.0 * a;
    let sxx = ixx / (12.0 * a) - cx * cx;
    let syy = iyy / (12.0 * a) - cy * cy;
    let sxy = ixy / (24.0 * a) - cx * cy;
    let cov = DMatrix::from_row_slice(2, 2, &[sxx, sxy, sxy, syy]);
    Ok(([cx + ox, cy + oy], cov))
}

/// Symmetric whitening map Σ^{-1/2} of the enclosed region, with its inverse.
pub fn area_whitening(v: &[[f64; 2]]) -> Result<([f64; 2], DMatrix<f64>, DMatrix<f64>)> {
    let (c, cov) = area_moments(v)?;
    let (l, _) = linalg::sym_eigen(&cov);
    if !(l[1] > 1e-14 * l[0].abs()) {
        return Err(Error::Degenerate("polygon region has no 2-D extent".into()));
    }
    let w = linalg::sym_apply(&cov, |x| 1.0 / x.sqrt());
    let winv = linalg::sym_apply(&cov, f64::sqrt);
    Ok((c, w, winv))
}

/// Reverses a clockwise curve while keeping vertex 0 in place.
pub fn orient_ccw(curve: &RawCurve) -> Result<RawCurve> {
    let area = curve.signed_area();
    if !(area.abs() > 0.0) || !area.is_finite() {
        return Err(Error::Degenerate(format!(
            "curve {} has zero signed area",
            curve.id
        )));
    }
    if area > 0.0 {
        return Ok(curve.clone());
    }
    let mut out = curve.clone();
    out.vertices[1..].reverse();
    Ok(out)
}

/// How equal spacing along the curve is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    /// Euclidean arc length of the spline.
    ArcLength,
    /// Arc length measured after whitening the enclosed region to isotropic
    /// second moments. Identical to arc length for isotropic shapes and
    /// equivariant under every invertible linear map.
    #[default]
    AffineArcLength,
}

/// n×2 landmark matrix of a closed curve sampled on s_i = −π + 2πi/n.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkCurve {
    pub id: String,
    pub points: DMatrix<f64>,
}

impl LandmarkCurve {
    pub fn new(id: impl Into<String>, points: DMatrix<f64>) -> Result<Self> {
        let n = points.nrows();
        if n < 4 || !n.is_multiple_of(2) {
            return Err(Error::Contract(format!("landmark count must be even and >= 4, got {n}")));
        }
        if points.ncols() != 2 {
            return Err(Error::Contract(format!("planar curves only, got d = {}", points.ncols())));
        }
        Ok(Self { id: id.into(), points })
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn param_nodes(&self) -> Vec<f64> {
        param_nodes(self.n())
    }

    pub fn vertices(&self) -> Vec<[f64; 2]> {
        rows(&self.points)
    }

    pub fn signed_area(&self) -> f64 {
        signed_area(&self.vertices())
    }
}

pub fn param_nodes(n: usize) -> Vec<f64> {
    (0..n).map(|i| -PI + 2.0 * PI * i as f64 / n as f64).collect()
}

pub fn rows(m: &DMatrix<f64>) -> Vec<[f64; 2]> {
    (0..m.nrows()).map(|i| [m[(i, 0)], m[(i, 1)]]).collect()
}

pub fn from_rows(v: &[[f64; 2]]) -> DMatrix<f64> {
    DMatrix::from_fn(v.len(), 2, |i, j| v[i][j])
}

/// Arc-length resampling with the default Euclidean measure.
pub fn resample(curve: &RawCurve, n: usize) -> Result<LandmarkCurve> {
    resample_with(curve, n, Parametrization::ArcLength)
}

pub fn resample_with(curve: &RawCurve, n: usize, parametrization: Parametrization) -> Result<LandmarkCurve> {
    if n < 8 || !n.is_multiple_of(2) {
        return Err(Error::Contract(format!("n must be even and >= 8, got {n}")));
    }
    let pts = match parametrization {
        Parametrization::ArcLength => PeriodicSpline::fit(&curve.vertices)?.sample_arc_length(n)?,
        Parametrization::AffineArcLength => {
            let (c, w, winv) = area_whitening(&curve.vertices)?;
            let white: Vec<[f64; 2]> = curve
                .vertices
                .iter()
                .map(|p| apply(&w, [p[0] - c[0], p[1] - c[1]]))
                .collect();
            PeriodicSpline::fit(&white)?
                .sample_arc_length(n)?
                .into_iter()
                .map(|q| {
                    let r = apply(&winv, q);
                    [r[0] + c[0], r[1] + c[1]]
                })
                .collect()
        }
    };
    let points = from_rows(&pts);
    check_rank(&points, &curve.id)?;
    LandmarkCurve::new(curve.id.clone(), points)
}

/// Row vector times symmetric 2×2 matrix.
fn apply(m: &DMatrix<f64>, p: [f64; 2]) -> [f64; 2] {
    [
        p[0] * m[(0, 0)] + p[1] * m[(1, 0)],
        p[0] * m[(0, 1)] + p[1] * m[(1, 1)],
    ]
}

fn check_rank(points: &DMatrix<f64>, id: &str) -> Result<()> {
    let mean = points.row_mean();
    let centered = DMatrix::from_fn(points.nrows(), points.ncols(), |i, j| points[(i, j)] - mean[j]);
    let s = linalg::singular_values(&centered);
    if !(s[s.len() - 1] > 1e-12 * s[0]) {
        return Err(Error::Degenerate(format!("curve {id} is collinear or collapsed")));
    }
    Ok(())
}

/// Landmarks with the weighted mean removed.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredCurve {
    pub id: String,
    pub o: DMatrix<f64>,
    pub weights: WeightMatrix,
}

/// O = X − 1·(wᵀX)/Σw.
pub fn center(curve: &LandmarkCurve, w: &WeightMatrix) -> Result<CenteredCurve> {
    let x = &curve.points;
    if w.len() != x.nrows() {
        return Err(Error::Contract(format!(
            "weight count {} does not match landmark count {}",
            w.len(),
            x.nrows()
        )));
    }
    let total: f64 = w.diag.iter().sum();
    let mut o = x.clone();
    for j in 0..x.ncols() {
        let mean = x.column(j).dot(&w.diag) / total;
        for i in 0..x.nrows() {
            o[(i, j)] -= mean;
        }
    }
    Ok(CenteredCurve {
        id: curve.id.clone(),
        o,
        weights: w.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => Ok(Format::Csv),
            Some("json") => Ok(Format::Json),
            _ => Err(Error::Config(format!(
                "cannot infer ensemble format from {}",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub id: String,
    pub curves: Vec<RawCurve>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleFile {
    ensemble_id: String,
    curves: Vec<CurveRecord>,
}

#[derive(Serialize, Deserialize)]
struct CurveRecord {
    id: String,
    vertices: Vec<[f64; 2]>,
}

#[derive(Deserialize)]
struct CsvRow {
    curve_id: String,
    vertex_index: usize,
    x: f64,
    y: f64,
}

/// Reads all curves of an ensemble file in file order.
pub fn parse_ensemble(path: &Path, format: Format) -> Result<Vec<RawCurve>> {
    Ok(read_ensemble(path, format)?.curves)
}

pub fn read_ensemble(path: &Path, format: Format) -> Result<Ensemble> {
    let text = std::fs::read_to_string(path)?;
    let fallback_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("ensemble")
        .to_string();
    match format {
        Format::Json => parse_json(&text),
        Format::Csv => parse_csv(&text, &fallback_id),
    }
}

pub fn parse_json(text: &str) -> Result<Ensemble> {
    let file: EnsembleFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut curves = Vec::with_capacity(file.curves.len());
    for (index, rec) in file.curves.into_iter().enumerate() {
        if rec.vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCurve {
                index,
                id: rec.id,
                reason: "non-finite coordinate".into(),
            });
        }
        let id = rec.id.clone();
        let curve = RawCurve::closed(rec.id, file.ensemble_id.clone(), rec.vertices)
            .map_err(|reason| Error::InvalidCurve { index, id, reason })?;
        curves.push(curve);
    }
    Ok(Ensemble {
        id: file.ensemble_id,
        curves,
    })
}

pub fn parse_csv(text: &str, ensemble_id: &str) -> Result<Ensemble> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, [f64; 2], usize)>> = HashMap::new();
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: CsvRow = record.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if !row.x.is_finite() || !row.y.is_finite() {
            return Err(Error::Parse {
                line,
                message: "non-finite coordinate".into(),
            });
        }
        let entry = groups.entry(row.curve_id.clone()).or_insert_with(|| {
            order.push(row.curve_id.clone());
            Vec::new()
        });
        entry.push((row.vertex_index, [row.x, row.y], line));
    }
    let mut curves = Vec::with_capacity(order.len());
    for (index, id) in order.into_iter().enumerate() {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by_key(|r| r.0);
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Parse {
                line: w[1].2,
                message: format!("duplicate vertex_index {} for curve {id}", w[1].0),
            });
        }
        let vertices = rows.into_iter().map(|r| r.1).collect();
        let curve = RawCurve::closed(id.clone(), ensemble_id, vertices)
            .map_err(|reason| Error::InvalidCurve { index, id, reason })?;
        curves.push(curve);
    }
    Ok(Ensemble {
        id: ensemble_id.to_string(),
        curves,
    })
}

pub fn ensemble_to_json(id: &str, curves: &[RawCurve]) -> Result<String> {
    let file = EnsembleFile {
        ensemble_id: id.to_string(),
        curves: curves
            .iter()
            .map(|c| CurveRecord {
                id: c.id.clone(),
                vertices: c.vertices.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn write_ensemble_json(path: &Path, id: &str, curves: &[RawCurve]) -> Result<()> {
    std::fs::write(path, ensemble_to_json(id, curves)?)?;
    Ok(())
}
