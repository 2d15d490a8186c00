//! Synthetic ensembles of perturbed circles and ellipses with separately
//! controlled undulation and scale distributions.
//!
//! Each curve is a radial profile r(s) = 1 + Σ_{k≥2} ε_k cos(ks + φ_k),
//! normalized so that its second moment under the measure used downstream
//! is I/2 (that of the unit circle), then mapped through R(θ)·diag(a, b),
//! translated and relabeled from a random start vertex. Linear maps leave
//! the undulation class untouched, so the scale distribution alone decides
//! the scale factor and the profile alone decides the undulation factor.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::{self, Ensemble, RawCurve};
use crate::discrepancy::TruthCase;
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseShape {
    /// Semi-axes fixed at 1.
    #[default]
    Circle,
    /// Semi-axes taken from the scale distribution.
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleDist {
    pub a: f64,
    pub b: f64,
    /// Log-normal spread applied to each semi-axis independently.
    pub axis_log_sigma: f64,
    /// Log-normal spread of a size factor shared by both axes.
    pub size_log_sigma: f64,
    /// Rotation angle uniform on [0, 2π) when set, else 0.
    pub random_rotation: bool,
}

impl Default for ScaleDist {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            axis_log_sigma: 0.05,
            size_log_sigma: 0.1,
            random_rotation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UndulationDist {
    /// Highest harmonic K; harmonics run over 2..=K.
    pub harmonics: usize,
    /// Typical amplitude of harmonic 2.
    pub amplitude: f64,
    /// Amplitudes fall off as (2/k)^decay.
    pub decay: f64,
    /// Log-normal spread of each amplitude.
    pub log_sigma: f64,
    /// Common factor on all amplitudes.
    pub multiplier: f64,
}

impl Default for UndulationDist {
    fn default() -> Self {
        Self {
            harmonics: 8,
            amplitude: 0.05,
            decay: 1.0,
            log_sigma: 0.3,
            multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    pub id: String,
    pub count: usize,
    pub base: BaseShape,
    pub scale: ScaleDist,
    pub undulation: UndulationDist,
    /// Gaussian vertex jitter, relative to the unit-circle size.
    pub noise: f64,
    pub vertices: usize,
    /// Half-width of the uniform translation box.
    pub translation: f64,
    pub seed: u64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            id: "synthetic".into(),
            count: 300,
            base: BaseShape::Circle,
            scale: ScaleDist::default(),
            undulation: UndulationDist::default(),
            noise: 0.0,
            vertices: 512,
            translation: 10.0,
            seed: 0,
        }
    }
}

const MAX_RETRIES: usize = 6;

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        if self.vertices < 8 {
            return bad(format!("need at least 8 vertices per curve, got {}", self.vertices));
        }
        if !(self.scale.a > 0.0 && self.scale.b > 0.0) {
            return bad(format!("semi-axes must be positive, got a={} b={}", self.scale.a, self.scale.b));
        }
        let spreads = [
            self.scale.axis_log_sigma,
            self.scale.size_log_sigma,
            self.undulation.log_sigma,
            self.noise,
            self.translation,
            self.undulation.amplitude,
            self.undulation.multiplier,
        ];
        if spreads.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return bad("spreads, amplitudes, noise and translation must be finite and non-negative".into());
        }
        if self.undulation.harmonics > self.vertices / 4 {
            return bad(format!(
                "harmonic {} is not resolved by {} vertices",
                self.undulation.harmonics, self.vertices
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid ensemble spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    fn semi_axes(&self) -> (f64, f64) {
        match self.base {
            BaseShape::Circle => (1.0, 1.0),
            BaseShape::Ellipse => (self.scale.a, self.scale.b),
        }
    }
}

/// True when two non-adjacent edges of the closed polygon cross.
pub fn self_intersects(v: &[[f64; 2]]) -> bool {
    let n = v.len();
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let bbox = |p: [f64; 2], q: [f64; 2]| (p[0].min(q[0]), p[0].max(q[0]), p[1].min(q[1]), p[1].max(q[1]));
    for i in 0..n {
        let (p1, p2) = (v[i], v[(i + 1) % n]);
        let b1 = bbox(p1, p2);
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (q1, q2) = (v[j], v[(j + 1) % n]);
            let b2 = bbox(q1, q2);
            if b1.1 < b2.0 || b2.1 < b1.0 || b1.3 < b2.2 || b2.3 < b1.2 {
                continue;
            }
            let d1 = cross(q1, q2, p1);
            let d2 = cross(q1, q2, p2);
            let d3 = cross(p1, p2, q1);
            let d4 = cross(p1, p2, q2);
            if d1 * d2 <= 0.0 && d3 * d4 <= 0.0 {
                return true;
            }
        }
    }
    false
}

/// Recenters and rescales so that the vertex measure proportional to arc
/// length in the area-whitened frame has mean zero and second moment I/2.
/// That measure is unchanged by linear maps of the curve.
fn normalize_moments(v: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let (c, w, _) = curve::area_whitening(v)?;
    let n = v.len();
    let white: Vec<[f64; 2]> = v
        .iter()
        .map(|p| {
            let (x, y) = (p[0] - c[0], p[1] - c[1]);
            [x * w[(0, 0)] + y * w[(1, 0)], x * w[(0, 1)] + y * w[(1, 1)]]
        })
        .collect();
    let seg: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (white[i], white[(i + 1) % n]);
            (b[0] - a[0]).hypot(b[1] - a[1])
        })
        .collect();
    let weights: Vec<f64> = (0..n).map(|i| 0.5 * (seg[i] + seg[(i + n - 1) % n])).collect();
    let total: f64 = weights.iter().sum();
    let mut mu = [0.0; 2];
    for (p, &wt) in v.iter().zip(&weights) {
        mu[0] += wt * p[0] / total;
        mu[1] += wt * p[1] / total;
    }
    let mut m2 = DMatrix::zeros(2, 2);
    for (p, &wt) in v.iter().zip(&weights) {
        let d = [p[0] - mu[0], p[1] - mu[1]];
        for a in 0..2 {
            for b in 0..2 {
                m2[(a, b)] += wt * d[a] * d[b] / total;
            }
        }
    }
    let s = linalg::sym_apply(&m2, |x| 1.0 / (2.0 * x).sqrt());
    Ok(v.iter()
        .map(|p| {
            let (x, y) = (p[0] - mu[0], p[1] - mu[1]);
            [x * s[(0, 0)] + y * s[(1, 0)], x * s[(0, 1)] + y * s[(1, 1)]]
        })
        .collect())
}

/// Undulated unit-circle-like profile before any linear map.
fn profile(spec: &EnsembleSpec, eps: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let m = spec.vertices;
    (0..m)
        .map(|j| {
            let s = 2.0 * PI * j as f64 / m as f64;
            let r = 1.0 + eps.iter().enumerate().map(|(i, &(e, ph))| e * ((i + 2) as f64 * s + ph).cos()).sum::<f64>();
            let mut p = [r * s.cos(), r * s.sin()];
            if spec.noise > 0.0 {
                let zx: f64 = StandardNormal.sample(rng);
                let zy: f64 = StandardNormal.sample(rng);
                p[0] += spec.noise * zx;
                p[1] += spec.noise * zy;
            }
            p
        })
        .collect()
}

fn lognormal_factor(sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let z: f64 = Normal::new(0.0, sigma).expect("finite sigma").sample(rng);
    z.exp()
}

fn generate_one(spec: &EnsembleSpec, index: usize) -> Result<RawCurve> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let u = &spec.undulation;
    let mut eps: Vec<(f64, f64)> = (2..=u.harmonics)
        .map(|k| {
            let amp = u.multiplier * u.amplitude * (2.0 / k as f64).powf(u.decay) * lognormal_factor(u.log_sigma, &mut rng);
            (amp, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let (a0, b0) = spec.semi_axes();
    let size = lognormal_factor(spec.scale.size_log_sigma, &mut rng);
    let a = a0 * size * lognormal_factor(spec.scale.axis_log_sigma, &mut rng);
    let b = b0 * size * lognormal_factor(spec.scale.axis_log_sigma, &mut rng);
    let theta = if spec.scale.random_rotation {
        rng.random_range(0.0..2.0 * PI)
    } else {
        0.0
    };
    let shift = [
        rng.random_range(-1.0..=1.0) * spec.translation,
        rng.random_range(-1.0..=1.0) * spec.translation,
    ];
    let start = rng.random_range(0..spec.vertices);

    for attempt in 0..=MAX_RETRIES {
        let raw = profile(spec, &eps, &mut rng);
        if self_intersects(&raw) {
            log::debug!("curve {index}: self-intersecting profile, damping (attempt {attempt})");
            eps.iter_mut().for_each(|e| e.0 *= 0.5);
            continue;
        }
        let base = normalize_moments(&raw)?;
        let (c, s) = (theta.cos(), theta.sin());
        // Row vector p ↦ p·diag(a, b)·R(θ)ᵀ.
        let mut pts: Vec<[f64; 2]> = base
            .iter()
            .map(|p| {
                let (x, y) = (a * p[0], b * p[1]);
                [c * x - s * y + shift[0], s * x + c * y + shift[1]]
            })
            .collect();
        pts.rotate_left(start);
        let id = format!("{}-{index:04}", spec.id);
        return RawCurve::closed(id, spec.id.clone(), pts).map_err(|reason| Error::InvalidCurve {
            index,
            id: spec.id.clone(),
            reason,
        });
    }
    Err(Error::Degenerate(format!(
        "curve {index} stayed self-intersecting after {MAX_RETRIES} damped retries"
    )))
}

/// Deterministic for a given generator seed; each curve draws from its own stream.
pub fn generate(spec: &EnsembleSpec) -> Result<Vec<RawCurve>> {
    spec.validate()?;
    (0..spec.count).into_par_iter().map(|i| generate_one(spec, i)).collect()
}

pub fn generate_ensemble(spec: &EnsembleSpec) -> Result<Ensemble> {
    Ok(Ensemble {
        id: spec.id.clone(),
        curves: generate(spec)?,
    })
}

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: &'static str,
    pub expected: TruthCase,
    pub a: EnsembleSpec,
    pub b: EnsembleSpec,
}

/// Ellipse semi-axes of the scale-shifted ensembles.
pub const SHIFTED_AXES: (f64, f64) = (1.3, 0.85);
/// Amplitude multiplier of the undulation-shifted ensembles.
pub const SHIFTED_UNDULATION: f64 = 1.5;

/// Pairs of specs for the four rows of the truth table, N = 300 per side.
pub fn four_case_specs(seed: u64) -> Vec<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = |id: String, seed: u64| EnsembleSpec {
        id,
        seed,
        ..EnsembleSpec::default()
    };
    let scaled = |mut s: EnsembleSpec| {
        s.base = BaseShape::Ellipse;
        s.scale.a = SHIFTED_AXES.0;
        s.scale.b = SHIFTED_AXES.1;
        s
    };
    let undulated = |mut s: EnsembleSpec| {
        s.undulation.multiplier = SHIFTED_UNDULATION;
        s
    };
    let rows: [(&'static str, TruthCase, bool, bool); 4] = [
        ("same", TruthCase::SameSame, false, false),
        ("scale", TruthCase::SameDifferent, false, true),
        ("undulation", TruthCase::DifferentSame, true, false),
        ("both", TruthCase::DifferentDifferent, true, true),
    ];
    rows.into_iter()
        .map(|(name, expected, und, sc)| {
            let a = reference(format!("{name}-A"), rng.random());
            let mut b = reference(format!("{name}-B"), rng.random());
            if und {
                b = undulated(b);
            }
            if sc {
                b = scaled(b);
            }
            SuiteCase { name, expected, a, b }
        })
        .collect()
}

/// Generated ensembles for the four truth-table rows.
pub fn four_case_suite(seed: u64) -> Result<Vec<(SuiteCase, Ensemble, Ensemble)>> {
    four_case_specs(seed)
        .into_iter()
        .map(|case| {
            let a = generate_ensemble(&case.a)?;
            let b = generate_ensemble(&case.b)?;
            Ok((case, a, b))
        })
        .collect()
}
