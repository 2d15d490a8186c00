//! Periodic cubic interpolating splines for closed planar polygons.

use crate::error::{Error, Result};

/// Gauss-Legendre nodes and weights on [-1, 1], 8 points.
const GL_X: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_W: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];
const PANELS: usize = 4;

/// C² periodic cubic spline through a closed polygon, parametrized by
/// cumulative chord length.
#[derive(Debug, Clone)]
pub struct PeriodicSpline {
    knots: Vec<f64>,
    values: Vec<[f64; 2]>,
    second: Vec<[f64; 2]>,
    period: f64,
}

impl PeriodicSpline {
    /// Fits the spline through `vertices` (closure implicit, no repeated
    /// last vertex).
    pub fn fit(vertices: &[[f64; 2]]) -> Result<Self> {
        let m = vertices.len();
        if m < 3 {
            return Err(Error::Degenerate(format!(
                "spline needs at least 3 vertices, got {m}"
            )));
        }
        let mut spacing = Vec::with_capacity(m);
        for j in 0..m {
            let a = vertices[j];
            let b = vertices[(j + 1) % m];
            spacing.push(((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt());
        }
        Self::fit_with_spacing(vertices, &spacing)
    }

    /// Fits with equally spaced knots over one period; vertex j sits at
    /// parameter j·period/m.
    pub fn fit_uniform(vertices: &[[f64; 2]], period: f64) -> Result<Self> {
        let m = vertices.len();
        if m < 3 {
            return Err(Error::Degenerate(format!(
                "spline needs at least 3 vertices, got {m}"
            )));
        }
        Self::fit_with_spacing(vertices, &vec![period / m as f64; m])
    }

    fn fit_with_spacing(vertices: &[[f64; 2]], h: &[f64]) -> Result<Self> {
        let m = vertices.len();
        let mut knots = Vec::with_capacity(m + 1);
        knots.push(0.0);
        for (j, &hj) in h.iter().enumerate() {
            if !(hj > 0.0) || !hj.is_finite() {
                return Err(Error::Degenerate(format!(
                    "zero-length or non-finite polygon edge at vertex {j}"
                )));
            }
            knots.push(knots[j] + hj);
        }
        let period = knots[m];

        let mut second = vec![[0.0; 2]; m];
        for dim in 0..2 {
            let y: Vec<f64> = vertices.iter().map(|v| v[dim]).collect();
            let mut sub = vec![0.0; m];
            let mut diag = vec![0.0; m];
            let mut sup = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for j in 0..m {
                let jm = (j + m - 1) % m;
                let jp = (j + 1) % m;
                sub[j] = h[jm];
                diag[j] = 2.0 * (h[jm] + h[j]);
                sup[j] = h[j];
                rhs[j] = 6.0 * ((y[jp] - y[j]) / h[j] - (y[j] - y[jm]) / h[jm]);
            }
            let sol = solve_cyclic_tridiagonal(&sub, &diag, &sup, &rhs)?;
            for j in 0..m {
                second[j][dim] = sol[j];
            }
        }
        Ok(Self {
            knots,
            values: vertices.to_vec(),
            second,
            period,
        })
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn segments(&self) -> usize {
        self.values.len()
    }

    /// Parameter value of vertex `j`.
    pub fn knot(&self, j: usize) -> f64 {
        self.knots[j]
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let t = t.rem_euclid(self.period);
        let m = self.values.len();
        let j = match self.knots[..m].binary_search_by(|k| k.total_cmp(&t)) {
            Ok(j) => j,
            Err(j) => j - 1,
        };
        (j.min(m - 1), t - self.knots[j.min(m - 1)])
    }

    /// Position at parameter `t` (wrapped to one period).
    pub fn eval(&self, t: f64) -> [f64; 2] {
        let (j, u) = self.locate(t);
        self.eval_segment(j, u)
    }

    /// First derivative with respect to the chord-length parameter.
    pub fn deriv(&self, t: f64) -> [f64; 2] {
        let (j, u) = self.locate(t);
        self.deriv_segment(j, u)
    }

    fn eval_segment(&self, j: usize, u: f64) -> [f64; 2] {
        let m = self.values.len();
        let jp = (j + 1) % m;
        let h = self.knots[j + 1] - self.knots[j];
        let a = h - u;
        let mut out = [0.0; 2];
        for (dim, o) in out.iter_mut().enumerate() {
            let m0 = self.second[j][dim];
            let m1 = self.second[jp][dim];
            let y0 = self.values[j][dim];
            let y1 = self.values[jp][dim];
            *o = m0 * a.powi(3) / (6.0 * h)
                + m1 * u.powi(3) / (6.0 * h)
                + (y0 / h - m0 * h / 6.0) * a
                + (y1 / h - m1 * h / 6.0) * u;
        }
        out
    }

    fn deriv_segment(&self, j: usize, u: f64) -> [f64; 2] {
        let m = self.values.len();
        let jp = (j + 1) % m;
        let h = self.knots[j + 1] - self.knots[j];
        let a = h - u;
        let mut out = [0.0; 2];
        for (dim, o) in out.iter_mut().enumerate() {
            let m0 = self.second[j][dim];
            let m1 = self.second[jp][dim];
            let y0 = self.values[j][dim];
            let y1 = self.values[jp][dim];
            *o = -m0 * a * a / (2.0 * h) + m1 * u * u / (2.0 * h) - (y0 / h - m0 * h / 6.0)
                + (y1 / h - m1 * h / 6.0);
        }
        out
    }

    fn speed_segment(&self, j: usize, u: f64) -> f64 {
        let d = self.deriv_segment(j, u);
        (d[0] * d[0] + d[1] * d[1]).sqrt()
    }

    /// Arc length of segment `j` between local parameters 0 and `u`.
    fn partial_length(&self, j: usize, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        let step = u / PANELS as f64;
        let mut total = 0.0;
        for p in 0..PANELS {
            let lo = p as f64 * step;
            let half = 0.5 * step;
            let mid = lo + half;
            for k in 0..GL_X.len() {
                total += GL_W[k] * self.speed_segment(j, mid + half * GL_X[k]);
            }
        }
        total * 0.5 * step
    }

    /// Cumulative arc length at each knot; last entry is the total length.
    pub fn cumulative_arc_length(&self) -> Vec<f64> {
        let m = self.values.len();
        let mut cum = Vec::with_capacity(m + 1);
        cum.push(0.0);
        for j in 0..m {
            let h = self.knots[j + 1] - self.knots[j];
            cum.push(cum[j] + self.partial_length(j, h));
        }
        cum
    }

    /// Points at `count` arc-length-equispaced positions starting at vertex 0.
    pub fn sample_arc_length(&self, count: usize) -> Result<Vec<[f64; 2]>> {
        let cum = self.cumulative_arc_length();
        let total = *cum.last().expect("non-empty");
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Degenerate("spline has zero arc length".into()));
        }
        let m = self.values.len();
        let mut out = Vec::with_capacity(count);
        let mut seg = 0usize;
        for k in 0..count {
            let target = total * k as f64 / count as f64;
            while seg + 1 < m && cum[seg + 1] <= target {
                seg += 1;
            }
            let local = target - cum[seg];
            let h = self.knots[seg + 1] - self.knots[seg];
            let u = self.invert_segment(seg, local, h, cum[seg + 1] - cum[seg]);
            out.push(self.eval_segment(seg, u));
        }
        Ok(out)
    }

    /// Solves partial_length(j, u) = target on [0, h] by safeguarded Newton.
    fn invert_segment(&self, j: usize, target: f64, h: f64, seg_len: f64) -> f64 {
        if target <= 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, h);
        let mut u = h * (target / seg_len).clamp(0.0, 1.0);
        for _ in 0..60 {
            let f = self.partial_length(j, u) - target;
            if f.abs() <= 1e-14 * seg_len.max(1e-300) {
                break;
            }
            if f > 0.0 {
                hi = u;
            } else {
                lo = u;
            }
            let speed = self.speed_segment(j, u);
            let mut next = if speed > 0.0 { u - f / speed } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - u).abs() <= 1e-15 * h {
                u = next;
                break;
            }
            u = next;
        }
        u
    }
}

/// Solves a cyclic tridiagonal system with the Sherman-Morrison correction.
/// Row j reads sub[j]·x[j−1] + diag[j]·x[j] + sup[j]·x[j+1] = rhs[j] (indices mod m).
fn solve_cyclic_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let m = diag.len();
    let alpha = sup[m - 1];
    let beta = sub[0];
    let gamma = -diag[0];
    let mut b = diag.to_vec();
    b[0] -= gamma;
    b[m - 1] -= alpha * beta / gamma;
    let x = thomas(sub, &b, sup, rhs)?;
    let mut u = vec![0.0; m];
    u[0] = gamma;
    u[m - 1] = alpha;
    let z = thomas(sub, &b, sup, &u)?;
    let factor = (x[0] + beta * x[m - 1] / gamma) / (1.0 + z[0] + beta * z[m - 1] / gamma);
    Ok(x.iter().zip(&z).map(|(xi, zi)| xi - factor * zi).collect())
}

fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let m = diag.len();
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(Error::Degenerate("singular spline system".into()));
    }
    c[0] = sup[0] / denom;
    d[0] = rhs[0] / denom;
    for j in 1..m {
        denom = diag[j] - sub[j] * c[j - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Degenerate("singular spline system".into()));
        }
        c[j] = sup[j] / denom;
        d[j] = (rhs[j] - sub[j] * d[j - 1]) / denom;
    }
    let mut x = vec![0.0; m];
    x[m - 1] = d[m - 1];
    for j in (0..m - 1).rev() {
        x[j] = d[j] - c[j] * x[j + 1];
    }
    Ok(x)
}
