//! Quadrature weights: constant-weight Riemann rules and the trapezoid ×
//! curve-speed weights obtained through Fourier differentiation.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curve;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    LeftRiemann,
    Midpoint,
    Spectral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub diag: DVector<f64>,
    pub scheme: Scheme,
    /// Riemann nodes on [0, 1); empty for the spectral scheme, whose nodes
    /// are the uniform grid s_i = −π + 2πi/n.
    pub nodes: Vec<f64>,
}

impl WeightMatrix {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.diag.sum()
    }

    /// Same weights rescaled to unit total mass.
    pub fn normalized(&self) -> Self {
        let total = self.total();
        Self {
            diag: &self.diag / total,
            scheme: self.scheme,
            nodes: self.nodes.clone(),
        }
    }

    pub fn sqrt_diag(&self) -> DVector<f64> {
        self.diag.map(f64::sqrt)
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            diag: DVector::from_element(n, 1.0 / n as f64),
            scheme: Scheme::LeftRiemann,
            nodes: (0..n).map(|i| i as f64 / n as f64).collect(),
        }
    }
}

/// Dense Fourier differentiation matrix on the uniform periodic grid.
#[derive(Debug, Clone)]
pub struct FourierDiffMatrix {
    pub n: usize,
    pub entries: Arc<DMatrix<f64>>,
}

static DIFF_CACHE: OnceLock<RwLock<HashMap<usize, Arc<DMatrix<f64>>>>> = OnceLock::new();

pub fn fourier_diff_matrix(n: usize) -> Result<FourierDiffMatrix> {
    if n < 4 || !n.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "Fourier differentiation needs an even n >= 4, got {n}"
        )));
    }
    let cache = DIFF_CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(m) = cache.read().expect("diff cache poisoned").get(&n) {
        return Ok(FourierDiffMatrix {
            n,
            entries: Arc::clone(m),
        });
    }
    let s = curve::param_nodes(n);
    let d = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            0.5 * sign / ((s[i] - s[j]) / 2.0).tan()
        }
    });
    let d = Arc::new(d);
    cache
        .write()
        .expect("diff cache poisoned")
        .entry(n)
        .or_insert_with(|| Arc::clone(&d));
    Ok(FourierDiffMatrix { n, entries: d })
}

pub fn riemann_weights(n: usize, scheme: Scheme) -> Result<WeightMatrix> {
    if n < 3 {
        return Err(Error::Contract(format!("need at least 3 nodes, got {n}")));
    }
    let nodes = match scheme {
        Scheme::LeftRiemann => (0..n).map(|i| i as f64 / n as f64).collect(),
        Scheme::Midpoint => (0..n).map(|i| (2 * i + 1) as f64 / (2 * n) as f64).collect(),
        Scheme::Spectral => {
            return Err(Error::Contract("spectral weights need curve samples".into()));
        }
    };
    Ok(WeightMatrix {
        diag: DVector::from_element(n, 1.0 / n as f64),
        scheme,
        nodes,
    })
}

/// Trapezoid gauge times curve speed: (2π/n)·‖(D_n O)_i‖₂.
pub fn spectral_weights(o: &DMatrix<f64>) -> Result<WeightMatrix> {
    let n = o.nrows();
    let d = fourier_diff_matrix(n)?;
    // D kills constants only up to rounding; removing the mean first keeps
    // far-translated curves from leaking their offset into the speed.
    let mean = o.row_mean();
    let shifted = DMatrix::from_fn(n, o.ncols(), |i, j| o[(i, j)] - mean[j]);
    let deriv = d.entries.as_ref() * shifted;
    let gauge = 2.0 * PI / n as f64;
    let mut diag = DVector::zeros(n);
    for i in 0..n {
        let speed = deriv.row(i).norm();
        if !(speed > 0.0) || !speed.is_finite() {
            return Err(Error::Degenerate(format!(
                "zero curve speed at node {i}"
            )));
        }
        diag[i] = gauge * speed;
    }
    Ok(WeightMatrix {
        diag,
        scheme: Scheme::Spectral,
        nodes: Vec::new(),
    })
}

/// Spectral weights measured after whitening the landmark polygon, so that
/// the weights do not change under invertible linear maps of the curve.
pub fn affine_spectral_weights(x: &DMatrix<f64>) -> Result<WeightMatrix> {
    let (_, w, _) = curve::area_whitening(&curve::rows(x))?;
    spectral_weights(&(x * w))
}
