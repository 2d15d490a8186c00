//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs under `cargo test --test acceptance`.

mod common;

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use shapetensor::alignment;
use shapetensor::curve::{self, Ensemble, LandmarkCurve};
use shapetensor::discrepancy::{self, ClassifyConfig, KernelSpec, TruthCase};
use shapetensor::manifold::{gr_distance, EnsembleModel, Factors, GrassmannPoint, KarcherOptions, ShapeCoords};
use shapetensor::pipeline::{self, PipelineConfig};
use shapetensor::quadrature::{self, Scheme, WeightMatrix};
use shapetensor::sst;
use shapetensor::synth::{self, EnsembleSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let clock = Instant::now();
    let out = f();
    let elapsed = clock.elapsed();
    let in_time = elapsed <= limit;
    let pass = out.pass && in_time;
    println!(
        "criterion {id:>2} {name}: {} ({:.2}s, limit {}s) {}{}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs(),
        out.detail,
        if in_time { "" } else { " [over time limit]" }
    );
    pass
}

fn ellipse(n: usize, a: f64, b: f64) -> DMatrix<f64> {
    harmonic_curve(n, &[], (a, b))
}

/// W^{1/2} O A Σ^{-1}: eigenfunction samples from the d×d solve.
fn duals(o: &DMatrix<f64>, w: &WeightMatrix) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (a, s2) = sst::weighted_eigensolve(o, w).unwrap();
    let sw = w.sqrt_diag();
    let wo = DMatrix::from_fn(o.nrows(), o.ncols(), |i, j| sw[i] * o[(i, j)]);
    let mut v = wo * &a;
    for j in 0..v.ncols() {
        let s = s2[j].sqrt();
        v.column_mut(j).unscale_mut(s);
    }
    (a, s2, v)
}

fn analytic_eigensolutions() -> Outcome {
    let n = 64;
    let circle = ellipse(n, 1.0, 1.0);
    let wc = quadrature::spectral_weights(&circle).unwrap();
    let (ac, sc, vc) = duals(&circle, &wc);
    let circle_ratio = sc[0] / sc[1];
    let pattern = (ac.abs() - DMatrix::identity(2, 2)).abs().max();

    let ell = ellipse(n, 2.0, 1.0);
    let we = quadrature::affine_spectral_weights(&ell).unwrap();
    let same_measure = (&we.normalized().diag - &wc.normalized().diag).abs().max();
    let te = sst::srqd(&ell, &we).unwrap();
    let ell_ratio = te.sigma[0].powi(2) / te.sigma[1].powi(2);
    let (_, _, ve) = duals(&ell, &we);
    let v_dev = (0..2).map(|j| (vc.column(j).dot(&ve.column(j)).abs() - 1.0).abs()).fold(0.0, f64::max);
    let v_srqd = (0..2).map(|j| (te.v_tilde.column(j).dot(&ve.column(j)).abs() - 1.0).abs()).fold(0.0, f64::max);

    let pass = (circle_ratio - 1.0).abs() < 1e-10
        && pattern < 1e-10
        && (ell_ratio - 4.0).abs() < 1e-8
        && v_dev < 1e-10
        && v_srqd < 1e-10;
    outcome(
        pass,
        format!(
            "circle ratio-1 {:.1e}, |A|-I {pattern:.1e}, ellipse ratio-4 {:.1e}, V~ mismatch {v_dev:.1e}/{v_srqd:.1e}, weight gap {same_measure:.1e}",
            circle_ratio - 1.0,
            ell_ratio - 4.0
        ),
    )
}

fn random_coeffs(rng: &mut ChaCha8Rng) -> Vec<(usize, f64, f64)> {
    (2..9).map(|k| (k, rng.random_range(-0.08..0.08) * 2.0 / k as f64, rng.random_range(0.0..2.0 * PI))).collect()
}

fn rigid_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut k_dev, mut s_dev, mut g_dev) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let c = random_coeffs(&mut rng);
        let x = harmonic_curve(200, &c, (rng.random_range(0.6..1.6), rng.random_range(0.6..1.6)));
        let r = rotation(rng.random_range(0.0..2.0 * PI), rng.random());
        let y = rigid(&x, &r, [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)]);
        let tensor = |m: &DMatrix<f64>| {
            let w = quadrature::spectral_weights(m).unwrap().normalized();
            let o = curve::center(&LandmarkCurve::new("c", m.clone()).unwrap(), &w).unwrap().o;
            (sst::clo_kernel_matrix(&o).k, sst::srqd(&o, &w).unwrap())
        };
        let (kx, tx) = tensor(&x);
        let (ky, ty) = tensor(&y);
        k_dev = k_dev.max(max_abs_diff(&kx, &ky));
        s_dev = s_dev.max((&tx.sigma - &ty.sigma).abs().max());
        let a = GrassmannPoint::new(tx.x_tilde).unwrap();
        let b = GrassmannPoint::new(ty.x_tilde).unwrap();
        g_dev = g_dev.max(gr_distance(&a, &b));
    }
    outcome(
        k_dev < 1e-10 && s_dev < 1e-10 && g_dev < 1e-8,
        format!("max kernel dev {k_dev:.1e}, sigma dev {s_dev:.1e}, Grassmann distance {g_dev:.1e}"),
    )
}

fn cyclic_recovery() -> Outcome {
    let n = 250;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = random_coeffs(&mut rng);
    let mut x = harmonic_curve(n, &c, (1.3, 0.9));
    for v in x.iter_mut() {
        *v += 0.01 * rng.random_range(-1.0..1.0);
    }
    let shift = rng.random_range(1..n);
    let q = rotation(rng.random_range(0.0..2.0 * PI), false);
    let y = alignment::cyclic_shift(&x, shift) * &q;
    let res = alignment::cyclic_procrustes(&x, &y).unwrap();
    let (_, plain) = alignment::orthogonal_procrustes(&x, &y).unwrap();
    let pass = res.p_star == shift && res.residual < 1e-10 && plain >= 10.0 * res.residual && plain > 1e-6;
    outcome(
        pass,
        format!(
            "shift {shift} recovered as {}, residual {:.1e}, plain Procrustes residual {plain:.3}",
            res.p_star, res.residual
        ),
    )
}

/// Perturbed circle with its exact arc-length map.
struct Analytic {
    coeffs: Vec<f64>,
    length: f64,
}

impl Analytic {
    fn radius(t: f64) -> (f64, f64) {
        let r = 1.0 + 0.25 * (3.0 * t).cos() + 0.1 * (5.0 * t).sin();
        let dr = -0.75 * (3.0 * t).sin() + 0.5 * (5.0 * t).cos();
        (r, dr)
    }

    fn point(t: f64) -> [f64; 2] {
        let (r, _) = Self::radius(t);
        [r * t.cos(), r * t.sin()]
    }

    fn speed(t: f64) -> f64 {
        let (r, dr) = Self::radius(t);
        (r * r + dr * dr).sqrt()
    }

    /// Fourier cosine/sine coefficients of the speed, interleaved.
    fn new() -> Self {
        let m = 2048;
        let k_max = 160;
        let samples: Vec<f64> = (0..m).map(|j| Self::speed(2.0 * PI * j as f64 / m as f64)).collect();
        let mut coeffs = Vec::with_capacity(2 * k_max + 1);
        let a0 = samples.iter().sum::<f64>() / m as f64;
        coeffs.push(a0);
        for k in 1..=k_max {
            let (mut a, mut b) = (0.0, 0.0);
            for (j, s) in samples.iter().enumerate() {
                let ang = 2.0 * PI * (k * j) as f64 / m as f64;
                a += s * ang.cos();
                b += s * ang.sin();
            }
            coeffs.push(2.0 * a / m as f64);
            coeffs.push(2.0 * b / m as f64);
        }
        Self {
            length: 2.0 * PI * a0,
            coeffs,
        }
    }

    fn arc(&self, t: f64) -> f64 {
        let mut s = self.coeffs[0] * t;
        for k in 1..self.coeffs.len().div_ceil(2) {
            let (a, b) = (self.coeffs[2 * k - 1], self.coeffs[2 * k]);
            let kf = k as f64;
            s += a * (kf * t).sin() / kf + b * (1.0 - (kf * t).cos()) / kf;
        }
        s
    }

    fn at_arc(&self, target: f64) -> f64 {
        let mut t = 2.0 * PI * target / self.length;
        for _ in 0..50 {
            let step = (self.arc(t) - target) / Self::speed(t);
            t -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        t
    }
}

fn moment_eigenvalues(x: &DMatrix<f64>, w: &WeightMatrix) -> DVector<f64> {
    let w = w.normalized();
    let o = curve::center(&LandmarkCurve::new("c", x.clone()).unwrap(), &w).unwrap().o;
    sst::weighted_eigensolve(&o, &w).unwrap().1
}

fn quadrature_convergence() -> Outcome {
    let curve = Analytic::new();
    let param_landmarks = |n: usize| {
        let s = curve::param_nodes(n);
        DMatrix::from_fn(n, 2, |i, j| Analytic::point(s[i])[j])
    };
    let reference = {
        let x = param_landmarks(4096);
        moment_eigenvalues(&x, &quadrature::spectral_weights(&x).unwrap())
    };
    let err = |l: DVector<f64>| (l - &reference).abs().max() / reference[0];
    let ns = [16usize, 32, 64, 128];
    let mut rows: Vec<(&str, Vec<f64>)> = Vec::new();
    for (name, scheme, offset) in [("left", Scheme::LeftRiemann, 0.0), ("midpoint", Scheme::Midpoint, 0.5)] {
        let e = ns
            .iter()
            .map(|&n| {
                let x = DMatrix::from_fn(n, 2, |i, j| {
                    Analytic::point(curve.at_arc((i as f64 + offset) * curve.length / n as f64))[j]
                });
                err(moment_eigenvalues(&x, &quadrature::riemann_weights(n, scheme).unwrap()))
            })
            .collect();
        rows.push((name, e));
    }
    let spectral: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let x = param_landmarks(n);
            err(moment_eigenvalues(&x, &quadrature::spectral_weights(&x).unwrap()))
        })
        .collect();

    let fitted = |e: &[f64]| fitted_order(&ns, e);
    let (left, mid, spec) = (fitted(&rows[0].1), fitted(&rows[1].1), fitted(&spectral));
    let fmt = |e: &[f64]| {
        let ratios: Vec<String> = e.windows(2).map(|w| format!("{:.1}", w[0] / w[1])).collect();
        let errs: Vec<String> = e.iter().map(|v| format!("{v:.1e}")).collect();
        format!("[{}] step ratios [{}]", errs.join(" "), ratios.join(" "))
    };
    outcome(
        left >= 1.0 && mid >= 2.0 && spec > 4.0,
        format!(
            "fitted orders left {left:.2}, midpoint {mid:.2}, spectral {spec:.2}; errors n=16..128: left {}, midpoint {}, spectral {}",
            fmt(&rows[0].1),
            fmt(&rows[1].1),
            fmt(&spectral)
        ),
    )
}

/// Least-squares slope of −log e against log n, ignoring errors at the
/// rounding floor.
fn fitted_order(ns: &[usize], e: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = ns
        .iter()
        .zip(e)
        .filter(|(_, &v)| v > 1e-14)
        .map(|(&n, &v)| ((n as f64).ln(), -v.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let k = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, dim: usize, mean: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        mean + z
    })
}

fn brute_force_mmd2(xs: &DMatrix<f64>, ys: &DMatrix<f64>, h: f64) -> f64 {
    let k = |a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize| {
        let mut d2 = 0.0;
        for c in 0..a.ncols() {
            d2 += (a[(i, c)] - b[(j, c)]).powi(2);
        }
        (-d2 / (2.0 * h * h)).exp()
    };
    let (m, n) = (xs.nrows(), ys.nrows());
    let mut sxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sxx += k(xs, i, xs, j);
            }
        }
    }
    let mut syy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                syy += k(ys, i, ys, j);
            }
        }
    }
    let mut sxy = 0.0;
    for i in 0..m {
        for j in 0..n {
            sxy += k(xs, i, ys, j);
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    sxx / (mf * (mf - 1.0)) + syy / (nf * (nf - 1.0)) - 2.0 * sxy / (mf * nf)
}

fn mmd_oracle_and_size() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs = gaussian(&mut rng, 10, 3, 0.0);
    let ys = gaussian(&mut rng, 10, 3, 0.5);
    let oracle_gap = [0.5, 1.0, 2.5]
        .iter()
        .map(|&h| (discrepancy::mmd2_unbiased(&xs, &ys, &KernelSpec::rbf(h)).unwrap() - brute_force_mmd2(&xs, &ys, h)).abs())
        .fold(0.0, f64::max);

    let trials = 200;
    let p_values: Vec<f64> = (0..trials)
        .map(|t| {
            let mut r = ChaCha8Rng::seed_from_u64(1000 + t);
            let a = gaussian(&mut r, 40, 2, 0.0);
            let b = gaussian(&mut r, 40, 2, 0.0);
            discrepancy::permutation_test(&a, &b, &KernelSpec::rbf_median(), 500, 0.05, t).unwrap().p_value
        })
        .collect();
    let rejections = p_values.iter().filter(|&&p| p <= 0.05).count();
    let rate = rejections as f64 / trials as f64;
    let mut sorted = p_values.clone();
    sorted.sort_by(f64::total_cmp);
    let ks = sorted
        .iter()
        .enumerate()
        .map(|(i, &p)| (p - i as f64 / trials as f64).abs().max(((i + 1) as f64 / trials as f64 - p).abs()))
        .fold(0.0, f64::max);
    outcome(
        oracle_gap < 1e-12 && (0.02..=0.08).contains(&rate),
        format!("oracle gap {oracle_gap:.1e}, null rejection rate {rate:.3} over {trials} trials, p-value KS distance {ks:.3}"),
    )
}

fn truth_table() -> Outcome {
    let seeds = 5u64;
    let mut agree = [0usize; 4];
    let mut seen: Vec<Vec<TruthCase>> = vec![Vec::new(); 4];
    for seed in 0..seeds {
        let cfg = PipelineConfig {
            seed,
            ..PipelineConfig::default()
        };
        for (k, (case, a, b)) in synth::four_case_suite(seed).unwrap().into_iter().enumerate() {
            let got = pipeline::classify_ensembles(&a, &b, &cfg).unwrap().report.case;
            seen[k].push(got);
            if got == case.expected {
                agree[k] += 1;
            }
        }
    }
    let expected = ["1^1", "1^0", "0^1", "0^0"];
    let detail = (0..4)
        .map(|k| {
            let got: Vec<&str> = seen[k].iter().map(|c| c.as_str()).collect();
            format!("{} {}/{} [{}]", expected[k], agree[k], seeds, got.join(" "))
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(agree.iter().all(|&a| a >= 4), detail)
}

fn vanishing_mmd() -> Outcome {
    let lin = KernelSpec::linear();
    let cfg = |seed| ClassifyConfig {
        kernel_t: lin,
        kernel_l: lin,
        permutations: 1000,
        alpha: 0.05,
        p_norm: 2.0,
        correction: Default::default(),
        seed,
    };
    let mut joint_p = Vec::new();
    let mut factors_reject = true;
    let mut pmmd_above = true;
    for seed in 0..5u64 {
        let c = discrepancy::vanishing_counterexample(300, 2, 1.0, 40 + seed);
        let joint = discrepancy::joint_permutation_test((&c.t.0, &c.t.1), (&c.l.0, &c.l.1), &lin, &lin, 1000, 0.05, seed).unwrap();
        joint_p.push(joint.p_value);
        let rep = discrepancy::classify((&c.t.0, &c.t.1), (&c.l.0, &c.l.1), &cfg(seed)).unwrap();
        factors_reject &= rep.undulation_test.reject && rep.scale_test.reject;
        // Thresholds live on the MMD² scale, pMMD on the MMD scale.
        pmmd_above &= rep.pmmd > rep.undulation_test.threshold.max(0.0).sqrt()
            && rep.pmmd > rep.scale_test.threshold.max(0.0).sqrt();
    }
    let mut sorted = joint_p.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[2];
    outcome(
        median > 0.2 && factors_reject && pmmd_above,
        format!(
            "joint p-values {:?} (median {median:.3}), both factor tests reject: {factors_reject}, pMMD above thresholds: {pmmd_above}",
            joint_p.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let m = (x.len() as f64 - 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let var: f64 = rx.iter().map(|a| (a - m).powi(2)).sum();
    cov / var
}

fn regularization_trend() -> Outcome {
    let spec = EnsembleSpec {
        id: "grains".into(),
        count: 200,
        seed: 8,
        undulation: synth::UndulationDist {
            harmonics: 24,
            amplitude: 0.06,
            decay: 0.5,
            ..Default::default()
        },
        ..EnsembleSpec::default()
    };
    let cfg = PipelineConfig::default();
    let processed = pipeline::process_ensemble(&synth::generate_ensemble(&spec).unwrap(), &cfg).unwrap();
    let factors: Vec<Factors> = processed.curves.iter().map(|c| Factors::from_tensor(c.id.clone(), &c.tensor)).collect();
    let full = factors.len().min(2 * (cfg.n - 2));
    let fitted = EnsembleModel::fit(&factors, full, KarcherOptions::default()).unwrap();
    let ranks = [10usize, 50, 150, full];
    let sample: Vec<ShapeCoords> = fitted.coords[..50].to_vec();
    let sweep = pipeline::reconstruct_sweep(&fitted.model, &sample, &ranks).unwrap();
    let rf: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    let per_curve: Vec<f64> = (0..sample.len())
        .map(|i| {
            let lam: Vec<f64> = sweep.iter().map(|(_, _, l)| l[i]).collect();
            spearman(&rf, &lam)
        })
        .collect();
    let mean = per_curve.iter().sum::<f64>() / per_curve.len() as f64;
    let mean_lambda: Vec<String> = sweep
        .iter()
        .map(|(r, _, l)| format!("r={r}: {:.3}", l.iter().sum::<f64>() / l.len() as f64))
        .collect();
    outcome(
        mean > 0.8,
        format!("mean per-curve Spearman(λ, r) {mean:.3}; mean λ {}", mean_lambda.join(", ")),
    )
}

fn throughput_ensembles() -> (Ensemble, Ensemble) {
    let a = synth::generate_ensemble(&EnsembleSpec {
        id: "A".into(),
        count: 500,
        seed: 91,
        ..EnsembleSpec::default()
    })
    .unwrap();
    let mut sb = EnsembleSpec {
        id: "B".into(),
        count: 500,
        seed: 92,
        ..EnsembleSpec::default()
    };
    sb.undulation.multiplier = synth::SHIFTED_UNDULATION;
    (a, synth::generate_ensemble(&sb).unwrap())
}

fn throughput() -> Outcome {
    let (a, b) = throughput_ensembles();
    let cfg = PipelineConfig::default();
    let clock = Instant::now();
    let out = pipeline::classify_ensembles(&a, &b, &cfg).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    let stages: Vec<String> = out.timings.iter().map(|(k, v)| format!("{k} {v:.2}s")).collect();
    outcome(
        secs < 60.0,
        format!(
            "2x500 curves, n={} r={} B={} in {secs:.2}s on {} worker thread(s) ({}); case {}",
            cfg.n,
            cfg.r,
            cfg.permutations,
            rayon::current_num_threads(),
            stages.join(", "),
            out.report.case
        ),
    )
}

fn determinism() -> Outcome {
    let suite = synth::four_case_suite(7).unwrap();
    let (_, a, b) = &suite[3];
    let cfg = PipelineConfig {
        seed: 7,
        ..PipelineConfig::default()
    };
    let report = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let out = pool.install(|| pipeline::classify_ensembles(a, b, &cfg)).unwrap();
        let full = pipeline::report_json(&out, threads).unwrap();
        serde_json::to_string(&pipeline::strip_meta(&full).unwrap()).unwrap()
    };
    let first = report(1);
    let second = report(1);
    let threaded = report(4);
    outcome(
        first == second && first == threaded,
        format!(
            "{} bytes; repeat identical: {}; 1 vs 4 threads identical: {}",
            first.len(),
            first == second,
            first == threaded
        ),
    )
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        run(1, "analytic eigensolutions", secs(1), analytic_eigensolutions),
        run(2, "rigid invariance", secs(10), rigid_invariance),
        run(3, "cyclic Procrustes recovery", secs(1), cyclic_recovery),
        run(4, "spectral vs Riemann quadrature", secs(30), quadrature_convergence),
        run(5, "MMD oracle and test size", secs(120), mmd_oracle_and_size),
        run(6, "truth-table reproduction", secs(300), truth_table),
        run(7, "vanishing joint MMD", secs(60), vanishing_mmd),
        run(8, "regularization trend", secs(120), regularization_trend),
        run(9, "throughput", secs(60), throughput),
        run(10, "determinism", secs(600), determinism),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
