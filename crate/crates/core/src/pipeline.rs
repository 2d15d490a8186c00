//! End-to-end processing: raw curves to shape tensors, a shared model fit on
//! both ensembles, and the two-factor classification with its artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::alignment::{self, Reflection};
use crate::curve::{self, Ensemble, Parametrization, RawCurve};
use crate::discrepancy::{self, ClassificationReport, ClassifyConfig, Correction, KernelSpec};
use crate::error::{Error, ErrorKind, Result};
use crate::manifold::{EnsembleModel, Factors, FittedModel, KarcherOptions, ShapeCoords};
use crate::quadrature::{self, Scheme, WeightMatrix};
use crate::sst::{self, ShapeTensor, ShapeTensorRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Trapezoid × curve speed in the area-whitened frame.
    #[default]
    Spectral,
    LeftRiemann,
    Midpoint,
}

/// Total mass of each curve's quadrature weights before decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureNormalization {
    /// Weights sum to 1, so all size information lives in P.
    #[default]
    UnitMass,
    /// Weights keep their natural total (the whitened perimeter for the
    /// spectral scheme, 1 for the Riemann rules).
    Natural,
}

/// How landmark 0 is chosen before decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Registration {
    /// Landmark farthest from the centroid in the area-whitened frame.
    #[default]
    IntrinsicStart,
    /// Cyclic Procrustes shift against the unit-circle archetype.
    Archetype,
    /// Keep the resampler's labeling.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n: usize,
    pub r: usize,
    pub alpha: f64,
    pub permutations: usize,
    pub p_norm: f64,
    pub kernel_t: KernelSpec,
    pub kernel_l: KernelSpec,
    pub correction: Correction,
    pub weights: WeightScheme,
    pub parametrization: Parametrization,
    pub normalization: MeasureNormalization,
    pub registration: Registration,
    pub karcher: KarcherOptions,
    pub seed: u64,
    /// Reserved for dropping curves that touch the image border; filters
    /// nothing because inputs carry no border information.
    pub exclude_border: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n: 500,
            r: 150,
            alpha: 0.05,
            permutations: 1000,
            p_norm: 2.0,
            kernel_t: KernelSpec::rbf_median(),
            kernel_l: KernelSpec::rbf_median(),
            correction: Correction::None,
            weights: WeightScheme::Spectral,
            parametrization: Parametrization::AffineArcLength,
            normalization: MeasureNormalization::UnitMass,
            registration: Registration::IntrinsicStart,
            karcher: KarcherOptions::default(),
            seed: 0,
            exclude_border: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 8 || !self.n.is_multiple_of(2) {
            return bad(format!("n must be even and at least 8, got {}", self.n));
        }
        if self.r == 0 || self.r > 2 * (self.n - 2) {
            return bad(format!("r must lie in 1..={}, got {}", 2 * (self.n - 2), self.r));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.permutations < 100 {
            return bad(format!("need at least 100 permutations, got {}", self.permutations));
        }
        if !(self.p_norm >= 1.0) {
            return bad(format!("p-norm order must be at least 1, got {}", self.p_norm));
        }
        if !(self.karcher.tol > 0.0) || self.karcher.max_iter == 0 {
            return bad("Karcher tolerance and iteration cap must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn classify_config(&self) -> ClassifyConfig {
        ClassifyConfig {
            kernel_t: self.kernel_t,
            kernel_l: self.kernel_l,
            permutations: self.permutations,
            alpha: self.alpha,
            p_norm: self.p_norm,
            correction: self.correction,
            seed: self.seed,
        }
    }
}

/// One curve carried through resampling, weighting, centering,
/// registration and decomposition.
#[derive(Debug, Clone)]
pub struct ProcessedCurve {
    pub id: String,
    /// Centered landmarks after registration.
    pub o: DMatrix<f64>,
    pub weights: WeightMatrix,
    /// Resampled landmark moved to row 0.
    pub start: usize,
    pub tensor: ShapeTensor,
}

fn curve_weights(x: &DMatrix<f64>, cfg: &PipelineConfig) -> Result<WeightMatrix> {
    let w = match cfg.weights {
        WeightScheme::Spectral => quadrature::affine_spectral_weights(x)?,
        WeightScheme::LeftRiemann => quadrature::riemann_weights(x.nrows(), Scheme::LeftRiemann)?,
        WeightScheme::Midpoint => quadrature::riemann_weights(x.nrows(), Scheme::Midpoint)?,
    };
    Ok(match cfg.normalization {
        MeasureNormalization::UnitMass => w.normalized(),
        MeasureNormalization::Natural => w,
    })
}

fn registration_shift(o: &DMatrix<f64>, cfg: &PipelineConfig) -> Result<usize> {
    match cfg.registration {
        Registration::None => Ok(0),
        Registration::IntrinsicStart => alignment::intrinsic_start(o),
        Registration::Archetype => {
            let arch = alignment::circle_archetype(o.nrows())?;
            Ok(alignment::cyclic_procrustes_with(o, &arch, Reflection::Forbid)?.p_star % o.nrows())
        }
    }
}

pub fn process_curve(raw: &RawCurve, cfg: &PipelineConfig) -> Result<ProcessedCurve> {
    let oriented = curve::orient_ccw(raw)?;
    let landmarks = curve::resample_with(&oriented, cfg.n, cfg.parametrization)?;
    let w = curve_weights(&landmarks.points, cfg)?;
    let centered = curve::center(&landmarks, &w)?;
    let start = registration_shift(&centered.o, cfg)?;
    let o = alignment::cyclic_shift(&centered.o, start);
    let mut weights = w;
    weights.diag = alignment::cyclic_shift_vec(&weights.diag, start);
    let tensor = sst::srqd(&o, &weights)?;
    Ok(ProcessedCurve {
        id: raw.id.clone(),
        o,
        weights,
        start,
        tensor,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedCurve {
    pub index: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ProcessedEnsemble {
    pub id: String,
    pub curves: Vec<ProcessedCurve>,
    pub excluded: Vec<ExcludedCurve>,
    pub input_count: usize,
}

/// Processes every curve in parallel. Degenerate curves are dropped with a
/// warning and listed; any other failure aborts.
pub fn process_ensemble(ens: &Ensemble, cfg: &PipelineConfig) -> Result<ProcessedEnsemble> {
    let results: Vec<Result<ProcessedCurve>> = ens.curves.par_iter().map(|c| process_curve(c, cfg)).collect();
    let mut curves = Vec::with_capacity(results.len());
    let mut excluded = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => curves.push(p),
            Err(e) if e.kind() == ErrorKind::Degeneracy => {
                let id = ens.curves[index].id.clone();
                log::warn!("ensemble {}: dropping curve {id}: {e}", ens.id);
                excluded.push(ExcludedCurve {
                    index,
                    id,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if curves.len() < 2 {
        return Err(Error::Degenerate(format!(
            "ensemble {} has {} usable curves; at least 2 are needed",
            ens.id,
            curves.len()
        )));
    }
    Ok(ProcessedEnsemble {
        id: ens.id.clone(),
        curves,
        excluded,
        input_count: ens.curves.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub id: String,
    pub input_curves: usize,
    pub used_curves: usize,
    pub excluded: Vec<ExcludedCurve>,
}

impl From<&ProcessedEnsemble> for EnsembleSummary {
    fn from(p: &ProcessedEnsemble) -> Self {
        Self {
            id: p.id.clone(),
            input_curves: p.input_count,
            used_curves: p.curves.len(),
            excluded: p.excluded.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifyOutput {
    pub config: PipelineConfig,
    pub summaries: [EnsembleSummary; 2],
    pub fitted: FittedModel,
    pub coords: [Vec<ShapeCoords>; 2],
    pub distances: [Vec<f64>; 2],
    pub report: ClassificationReport,
    pub timings: Vec<(&'static str, f64)>,
}

fn coords_matrix(c: &[ShapeCoords], pick: impl Fn(&ShapeCoords) -> &[f64]) -> DMatrix<f64> {
    let dim = c.first().map_or(0, |s| pick(s).len());
    DMatrix::from_fn(c.len(), dim, |i, j| pick(&c[i])[j])
}

/// The full two-ensemble comparison.
pub fn classify_ensembles(a: &Ensemble, b: &Ensemble, cfg: &PipelineConfig) -> Result<ClassifyOutput> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let clock = Instant::now();
    let pa = process_ensemble(a, cfg)?;
    let pb = process_ensemble(b, cfg)?;
    timings.push(("decompose", clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let factors: Vec<Factors> = pa
        .curves
        .iter()
        .chain(&pb.curves)
        .map(|c| Factors::from_tensor(c.id.clone(), &c.tensor))
        .collect();
    let fitted = EnsembleModel::fit(&factors, cfg.r, cfg.karcher)?;
    timings.push(("model", clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let na = pa.curves.len();
    let coords_a = fitted.coords[..na].to_vec();
    let coords_b = fitted.coords[na..].to_vec();
    let (ta, tb) = (coords_matrix(&coords_a, |c| &c.t), coords_matrix(&coords_b, |c| &c.t));
    let (la, lb) = (coords_matrix(&coords_a, |c| &c.l), coords_matrix(&coords_b, |c| &c.l));
    let report = discrepancy::classify((&ta, &tb), (&la, &lb), &cfg.classify_config())?;
    timings.push(("classify", clock.elapsed().as_secs_f64()));

    let distances = [fitted.distances[..na].to_vec(), fitted.distances[na..].to_vec()];
    Ok(ClassifyOutput {
        config: cfg.clone(),
        summaries: [EnsembleSummary::from(&pa), EnsembleSummary::from(&pb)],
        fitted,
        coords: [coords_a, coords_b],
        distances,
        report,
        timings,
    })
}

/// Report body without the `meta` block; byte-stable for fixed inputs.
pub fn report_body(out: &ClassifyOutput) -> serde_json::Value {
    let m = &out.fitted.model;
    json!({
        "case": out.report.case,
        "verdict": out.report.verdict,
        "classification": out.report,
        "ensembles": out.summaries,
        "model": {
            "n": m.n,
            "d": m.d,
            "r": m.r,
            "curves": m.fit.curves,
            "gr_iterations": m.fit.gr_iterations,
            "gr_residual": m.fit.gr_residual,
            "spd_iterations": m.fit.spd_iterations,
            "spd_residual": m.fit.spd_residual,
        },
        "config": out.config,
    })
}

pub fn report_json(out: &ClassifyOutput, workers: usize) -> Result<String> {
    let mut body = report_body(out);
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let timings: serde_json::Map<String, serde_json::Value> =
        out.timings.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    body["meta"] = json!({
        "tool": "shapetensor",
        "version": env!("CARGO_PKG_VERSION"),
        "generated_unix_s": now,
        "workers": workers,
        "timings_s": timings,
    });
    Ok(serde_json::to_string_pretty(&body)?)
}

/// Parses a report and drops its `meta` block.
pub fn strip_meta(report: &str) -> Result<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_str(report)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("meta");
    }
    Ok(v)
}

pub fn write_coords_csv(path: &Path, coords: &[ShapeCoords]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let (r, m) = coords.first().map_or((0, 0), |c| (c.t.len(), c.l.len()));
    let mut header = vec!["curve_id".to_string()];
    header.extend((1..=r).map(|k| format!("t{k}")));
    header.extend((1..=m).map(|k| format!("l{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for c in coords {
        let mut row = vec![c.curve_id.clone()];
        row.extend(c.t.iter().chain(&c.l).map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads coordinates written by [`write_coords_csv`].
pub fn read_coords_csv(path: &Path) -> Result<Vec<ShapeCoords>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let r = headers.iter().filter(|h| h.starts_with('t')).count();
    let m = headers.iter().filter(|h| h.starts_with('l')).count();
    if headers.len() != 1 + r + m {
        return Err(Error::Parse {
            line: 1,
            message: "expected columns curve_id, t1.., l1..".into(),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        out.push(ShapeCoords {
            curve_id: rec[0].to_string(),
            t: vals[..r].to_vec(),
            l: vals[r..].to_vec(),
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Writes report.json, model.json, coords_A.csv, coords_B.csv,
/// distances.csv and spectrum.csv into `dir`.
pub fn write_artifacts(dir: &Path, out: &ClassifyOutput, workers: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let path = |name: &str| dir.join(name);
    fs::write(path("report.json"), report_json(out, workers)?)?;
    fs::write(path("model.json"), out.fitted.model.to_json()?)?;
    write_coords_csv(&path("coords_A.csv"), &out.coords[0])?;
    write_coords_csv(&path("coords_B.csv"), &out.coords[1])?;

    let max = out.distances.iter().flatten().copied().fold(0.0f64, f64::max);
    let mut w = csv::Writer::from_path(path("distances.csv")).map_err(csv_err)?;
    w.write_record(["ensemble", "curve_id", "distance", "normalized_distance"]).map_err(csv_err)?;
    for (k, label) in ["A", "B"].iter().enumerate() {
        for (c, d) in out.coords[k].iter().zip(&out.distances[k]) {
            let norm = if max > 0.0 { d / max } else { 0.0 };
            w.write_record([label.to_string(), c.curve_id.clone(), d.to_string(), norm.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;

    let m = &out.fitted.model;
    let mut w = csv::Writer::from_path(path("spectrum.csv")).map_err(csv_err)?;
    w.write_record(["factor", "component", "eigenvalue"]).map_err(csv_err)?;
    for (factor, spec) in [("undulation", &m.gr_spectrum), ("scale", &m.spd_spectrum)] {
        for (k, v) in spec.iter().enumerate() {
            w.write_record([factor.to_string(), (k + 1).to_string(), v.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(["report.json", "model.json", "coords_A.csv", "coords_B.csv", "distances.csv", "spectrum.csv"]
        .iter()
        .map(|n| path(n))
        .collect())
}

/// Shape tensors of every usable curve, for inspection.
pub fn decompose(ens: &Ensemble, cfg: &PipelineConfig) -> Result<(Vec<ShapeTensorRecord>, Vec<ExcludedCurve>)> {
    let p = process_ensemble(ens, cfg)?;
    Ok((p.curves.iter().map(|c| c.tensor.record(&c.id)).collect(), p.excluded))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Unit circle sampled at the landmark count.
    Circle,
    /// The ensemble's first curve.
    First,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignRecord {
    pub id: String,
    pub shift: usize,
    pub rotation: Vec<Vec<f64>>,
    pub residual: f64,
    pub symmetric: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignReport {
    pub archetype: Archetype,
    pub landmarks: usize,
    pub resampled: bool,
    pub aligned: Vec<AlignRecord>,
    pub excluded: Vec<ExcludedCurve>,
    pub symmetric_count: usize,
    pub mean_residual: f64,
    pub max_residual: f64,
}

/// Cyclic Procrustes registration of every curve onto an archetype.
/// Vertices are used as given when all curves share a vertex count and
/// `resample` is `None`; otherwise curves are resampled to `resample`
/// landmarks (or the config's n).
pub fn align_curves(
    ens: &Ensemble,
    archetype: Archetype,
    resample: Option<usize>,
    cfg: &PipelineConfig,
) -> Result<(Vec<RawCurve>, AlignReport)> {
    let first = ens
        .curves
        .first()
        .ok_or_else(|| Error::Config(format!("ensemble {} is empty", ens.id)))?;
    let same_count = ens.curves.iter().all(|c| c.len() == first.len());
    let resampled = resample.is_some() || !same_count;
    let n = resample.unwrap_or(cfg.n);
    let shapes: Vec<DMatrix<f64>> = ens
        .curves
        .iter()
        .map(|c| {
            let oriented = curve::orient_ccw(c)?;
            let m = if resampled {
                curve::resample_with(&oriented, n, cfg.parametrization)?.points
            } else {
                curve::from_rows(&oriented.vertices)
            };
            let mean = m.row_mean();
            Ok(m.map_with_location(|_, j, v| v - mean[j]))
        })
        .collect::<Result<_>>()?;
    let target = match archetype {
        Archetype::Circle => alignment::circle_archetype(shapes[0].nrows())?,
        Archetype::First => shapes[0].clone(),
    };
    let result = alignment::align_ensemble(&shapes, &target, Reflection::Allow);
    let mut curves = Vec::with_capacity(result.shapes.len());
    let mut records = Vec::with_capacity(result.shapes.len());
    for s in &result.shapes {
        let id = ens.curves[s.index].id.clone();
        let verts = curve::rows(&s.aligned);
        curves.push(RawCurve {
            id: id.clone(),
            source: ens.id.clone(),
            vertices: verts,
            closed: true,
        });
        records.push(AlignRecord {
            id,
            shift: s.result.p_star,
            rotation: (0..2).map(|i| s.result.r_star.row(i).iter().copied().collect()).collect(),
            residual: s.result.residual,
            symmetric: s.result.symmetric,
        });
    }
    let excluded = result
        .excluded
        .iter()
        .map(|(i, reason)| ExcludedCurve {
            index: *i,
            id: ens.curves[*i].id.clone(),
            reason: reason.clone(),
        })
        .collect();
    let residuals: Vec<f64> = records.iter().map(|r| r.residual).collect();
    let report = AlignReport {
        archetype,
        landmarks: target.nrows(),
        resampled,
        symmetric_count: records.iter().filter(|r| r.symmetric).count(),
        mean_residual: if residuals.is_empty() { 0.0 } else { residuals.iter().sum::<f64>() / residuals.len() as f64 },
        max_residual: residuals.iter().copied().fold(0.0, f64::max),
        aligned: records,
        excluded,
    };
    Ok((curves, report))
}

/// Reconstructions of every coordinate row at each requested rank, with the
/// Lipschitz estimate of each. Landmarks are unweighted with the uniform
/// measure since per-curve weights are not part of the model.
pub fn reconstruct_sweep(model: &EnsembleModel, coords: &[ShapeCoords], ranks: &[usize]) -> Result<Vec<(usize, Vec<RawCurve>, Vec<f64>)>> {
    let uniform = WeightMatrix::uniform(model.n);
    ranks
        .iter()
        .map(|&r| {
            let m = model.truncated(r).map_err(|_| {
                Error::Config(format!("rank {r} outside the model's valid range 1..={}", model.r))
            })?;
            let rows: Vec<(RawCurve, f64)> = coords
                .par_iter()
                .map(|c| {
                    let cut = ShapeCoords {
                        curve_id: c.curve_id.clone(),
                        t: c.t.iter().copied().take(r).collect(),
                        l: c.l.clone(),
                    };
                    if c.t.len() < r {
                        return Err(Error::Contract(format!(
                            "curve {} has {} undulation coordinates, rank {r} requested",
                            c.curve_id,
                            c.t.len()
                        )));
                    }
                    let o = m.reconstruct_weighted(&cut, &uniform)?;
                    let lambda = sst::lipschitz_estimate(&o)?;
                    let curve = RawCurve {
                        id: c.curve_id.clone(),
                        source: format!("r{r}"),
                        vertices: curve::rows(&o),
                        closed: true,
                    };
                    Ok((curve, lambda))
                })
                .collect::<Result<_>>()?;
            let (curves, lambdas) = rows.into_iter().unzip();
            Ok((r, curves, lambdas))
        })
        .collect()
}
