//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mziln::composition::{
    all_presence_patterns, log_ratio_transform, mziln_log_density, CompositionSample, MzilnParams,
    SubcompositionTransform,
};
use mziln::penalized::{adaptive_weights, fit_penalized, univariate_threshold, PathOptions, Penalty, PenaltySpec};
use mziln::regression::{
    assemble_system, estimating_equation_residual, fit_ols, whitening_matrix, CovariateRecord, WhitenedSystem,
    WorkingCovariance,
};
use mziln::simulation::{
    gen_covariates, gen_mziln_sample, gen_presence, generate_highdim, spearman_baseline, HighDimReport,
    ScenarioConfig,
};
use mziln_cli::commands::{cmd_simulate, CellReport, CellResult, SimulateOptions};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn manifest(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("manifests").join(name)
}

fn simulate(name: &str, out: &Path) -> Vec<CellResult> {
    cmd_simulate(&SimulateOptions {
        manifest: manifest(name),
        out_dir: out.to_path_buf(),
    })
    .unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn highdim(cell: &CellResult) -> &HighDimReport {
    match &cell.report {
        CellReport::HighDim(h) => h,
        CellReport::LowDim(_) => panic!("expected a high-dimensional cell"),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Kolmogorov-Smirnov p-value against a fully specified normal law.
fn ks_p_value(sample: &mut [f64], dist: &Normal) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    let d = sample
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = dist.cdf(*x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p: f64 = (1..=100)
        .map(|j| {
            let j = j as f64;
            2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp()
        })
        .sum();
    p.clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// 1. Low-dimensional bias and coverage

fn criterion_1(tmp: &Path) -> Outcome {
    let cells = simulate("table1_desk.toml", tmp);
    let CellReport::LowDim(report) = &cells[0].report else {
        panic!("table1_desk.toml is a low-dimensional manifest");
    };
    let mut pass = report.n_failed == 0;
    let mut parts = Vec::new();
    for row in &report.rows {
        let bias_ok = !row.parameter.starts_with("beta") || row.ave_bias.abs() <= 0.01;
        let cp_ok = (91.0..=98.0).contains(&row.ave_cp);
        pass &= bias_ok && cp_ok;
        parts.push(format!("{} bias {:+.4} CP {:.1}", row.parameter, row.ave_bias, row.ave_cp));
    }
    parts.push(format!("{} failed fits", report.n_failed));
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 2. Estimating equation at the least-squares fit

fn random_spd(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| normal(rng));
    &g * g.transpose() / k as f64 + DMatrix::identity(k, k) * 0.5
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let n_taxa = rng.random_range(3..=10);
        let k = n_taxa - 1;
        let q = rng.random_range(0..=4);
        let n = rng.random_range(80..=200);
        let x = gen_covariates(n, q, 0.3, &mut rng).unwrap();
        let covs: Vec<CovariateRecord> = x.into_iter().map(CovariateRecord::from_values).collect();
        let beta: Vec<f64> = (0..k * (q + 1)).map(|_| normal(&mut rng)).collect();
        let beta = mziln::regression::CoefficientVector::new(beta, k, q).unwrap();
        let chol = random_spd(k, &mut rng).cholesky().unwrap().l();
        let (presence, _) = gen_presence(n, n_taxa, 0.7, &mut rng).unwrap();
        let samples: Vec<CompositionSample> = covs
            .iter()
            .zip(&presence)
            .map(|(c, z)| {
                let mu = mziln::regression::build_design_row_block(c, k).mul(&beta);
                gen_mziln_sample(&mu, &chol, z, &mut rng).unwrap()
            })
            .collect();
        let working = match trial % 3 {
            0 => WorkingCovariance::Identity,
            1 => WorkingCovariance::Exchangeable { sd: 1.3, rho: 0.3 },
            _ => WorkingCovariance::Unstructured(random_spd(k, &mut rng)),
        };
        let sys = assemble_system(&samples, &covs, &working).unwrap();
        let fit = fit_ols(&sys).unwrap();
        let lhs = estimating_equation_residual(&sys, &fit);
        let scale = 1.0 + sys.transpose_mul(sys.u_tilde()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let norm = lhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(norm / (1e-8 * scale));
    }
    outcome(
        worst <= 1.0,
        format!("largest residual is {worst:.2e} of the allowed bound over 50 systems"),
    )
}

// ---------------------------------------------------------------------------
// 3. Penalized solver against brute-force minimization

/// Exact minimizer of `a/2 t^2 - z t + w pen(|t|)` built only from
/// `Penalty::value`: on each piece between knots the penalty is quadratic, so
/// its coefficients are recovered from three evaluations.
fn oracle_1d(a: f64, z: f64, w: f64, pen: Penalty, lambda: f64) -> f64 {
    let knots = match pen {
        Penalty::Mcp { gamma } => vec![gamma * lambda],
        Penalty::Scad { gamma } => vec![lambda, gamma * lambda],
        _ => vec![],
    };
    let g = |t: f64| 0.5 * a * t * t - z * t + w * pen.value(t.abs(), lambda);
    let mut edges = vec![0.0];
    edges.extend(&knots);
    edges.push(f64::INFINITY);
    let mut candidates = vec![0.0];
    for k in &knots {
        candidates.extend([*k, -*k]);
    }
    for s in [1.0, -1.0] {
        for piece in edges.windows(2) {
            let (lo, hi) = (piece[0], piece[1]);
            let p: [f64; 3] = if hi.is_finite() {
                [0.25, 0.5, 0.75].map(|f| lo + f * (hi - lo))
            } else {
                [1.0, 2.0, 3.0].map(|f| lo + f)
            };
            let v = p.map(|t| pen.value(t, lambda));
            let d1 = (v[1] - v[0]) / (p[1] - p[0]);
            let d2 = (v[2] - v[1]) / (p[2] - p[1]);
            let c2 = (d2 - d1) / (p[2] - p[0]);
            let c1 = d1 - c2 * (p[0] + p[1]);
            let denom = a + 2.0 * w * c2;
            if denom > 0.0 {
                let tau = (s * z - w * c1) / denom;
                if tau >= lo && tau <= hi {
                    candidates.push(s * tau);
                }
            }
        }
    }
    candidates
        .into_iter()
        .min_by(|x, y| g(*x).total_cmp(&g(*y)).then(x.abs().total_cmp(&y.abs())))
        .unwrap()
}

struct Tiny {
    h: DMatrix<f64>,
    c: Vec<f64>,
    w: Vec<f64>,
    pen: Penalty,
    lambda: f64,
}

impl Tiny {
    fn value(&self, b: &[f64]) -> f64 {
        let m = b.len();
        let mut f = 0.0;
        for i in 0..m {
            f -= self.c[i] * b[i];
            f += self.w[i] * self.pen.value(b[i].abs(), self.lambda);
            for j in 0..m {
                f += 0.5 * self.h[(i, j)] * b[i] * b[j];
            }
        }
        f
    }

    /// Completes a prefix with the exact minimizer in the last coordinate.
    fn complete(&self, prefix: &[f64]) -> (f64, Vec<f64>) {
        let last = prefix.len();
        let z = self.c[last] - (0..last).map(|i| self.h[(last, i)] * prefix[i]).sum::<f64>();
        let t = oracle_1d(self.h[(last, last)], z, self.w[last], self.pen, self.lambda);
        let mut b = prefix.to_vec();
        b.push(t);
        (self.value(&b), b)
    }

    /// Grid over all coordinates but the last, from a coarse box that must
    /// contain the global minimizer down to a fine mesh around the best
    /// coarse local minima.
    fn minimize(&self) -> Vec<f64> {
        let m = self.c.len();
        let d = m - 1;
        if d == 0 {
            return self.complete(&[]).1;
        }
        // f(b) <= f(0) forces ||b|| <= 2 ||c|| / eig_min(H).
        let eig_min = SymmetricEigen::new(self.h.clone()).eigenvalues.min();
        let c_norm = self.c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bound = 2.0 * c_norm / eig_min + 1e-3;
        let n = 100i64;
        let step = bound / n as f64;
        let points = |center: &[f64], half: i64, step: f64| -> Vec<Vec<f64>> {
            let axis: Vec<f64> = (-half..=half).map(|i| i as f64 * step).collect();
            match d {
                1 => axis.iter().map(|a| vec![center[0] + a]).collect(),
                _ => axis
                    .iter()
                    .flat_map(|a| axis.iter().map(move |b| vec![center[0] + a, center[1] + b]))
                    .collect(),
            }
        };
        let coarse = points(&vec![0.0; d], n, step);
        let values: Vec<f64> = coarse.iter().map(|p| self.complete(p).0).collect();
        let side = (2 * n + 1) as usize;
        let index = |i: i64, j: i64| -> Option<usize> {
            let ok = |v: i64| (0..side as i64).contains(&v);
            match d {
                1 => ok(i).then_some(i as usize),
                _ => (ok(i) && ok(j)).then(|| i as usize * side + j as usize),
            }
        };
        let mut minima: Vec<usize> = (0..coarse.len())
            .filter(|&p| {
                let (i, j) = if d == 1 { (p as i64, 0) } else { ((p / side) as i64, (p % side) as i64) };
                let js: &[i64] = if d == 1 { &[0] } else { &[-1, 0, 1] };
                [-1i64, 0, 1].iter().all(|di| {
                    js.iter().all(|dj| index(i + di, j + dj).is_none_or(|o| values[o] >= values[p]))
                })
            })
            .collect();
        minima.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
        minima.truncate(30);
        let mut best = (f64::INFINITY, Vec::new());
        for start in minima {
            let mut center = coarse[start].clone();
            let mut s = step;
            for _ in 0..5 {
                s /= 10.0;
                center = points(&center, 20, s)
                    .into_iter()
                    .min_by(|a, b| self.complete(a).0.total_cmp(&self.complete(b).0))
                    .unwrap();
            }
            let (v, b) = self.complete(&center);
            if v < best.0 {
                best = (v, b);
            }
        }
        best.1
    }
}

fn families() -> [Penalty; 5] {
    [Penalty::Lasso, Penalty::AdaptiveLasso, Penalty::elastic_net(), Penalty::scad(), Penalty::mcp()]
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = 20;
    let mut parts = Vec::new();
    let mut pass = true;
    for pen in families() {
        let mut misses = 0;
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let m = rng.random_range(1..=3);
            let x = DMatrix::from_fn(r, m, |_, _| normal(&mut rng));
            let truth: Vec<f64> = (0..m)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        0.0
                    } else {
                        rng.random_range(0.5..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
                    }
                })
                .collect();
            let u: Vec<f64> = (0..r)
                .map(|i| (0..m).map(|j| x[(i, j)] * truth[j]).sum::<f64>() + normal(&mut rng))
                .collect();
            let sys = WhitenedSystem::from_dense(&x, &u, 1).unwrap();
            let weights = match pen {
                Penalty::AdaptiveLasso => adaptive_weights(&sys, true, &PathOptions::default()).unwrap(),
                _ => vec![1.0; m],
            };
            let spec = PenaltySpec {
                family: pen,
                adaptive_weights: Some(weights.clone()),
                penalize_intercepts: true,
            };
            let probe = fit_penalized(&sys, &spec, &PathOptions { n_lambdas: 1, ..PathOptions::default() }).unwrap();
            let target = probe.lambda_max * rng.random_range(0.05..0.8);
            let lambdas: Vec<f64> = (0..15)
                .map(|i| probe.lambda_max * (target / probe.lambda_max).powf(i as f64 / 14.0))
                .collect();
            let opts = PathOptions {
                lambdas: Some(lambdas),
                tol: 1e-11,
                restarts: if pen.is_convex() { 0 } else { 10 },
                ..PathOptions::default()
            };
            let path = fit_penalized(&sys, &spec, &opts).unwrap();
            let beta = path.coefficients.last().unwrap().as_slice().to_vec();

            let scale: Vec<f64> = (0..m).map(|j| (x.column(j).norm_squared() / r as f64).sqrt()).collect();
            let zmat = DMatrix::from_fn(r, m, |i, j| x[(i, j)] / scale[j]);
            let h = zmat.transpose() * &zmat / r as f64;
            let c: Vec<f64> = (0..m).map(|j| zmat.column(j).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() / r as f64).collect();
            let tiny = Tiny { h, c, w: weights, pen, lambda: *path.lambdas.last().unwrap() };
            let b = tiny.minimize();
            let gap = (0..m).map(|j| (b[j] / scale[j] - beta[j]).abs()).fold(0.0, f64::max);
            worst = worst.max(gap);
            if gap > 0.02 {
                misses += 1;
            }
        }
        pass &= misses == 0;
        parts.push(format!("{} {misses} misses (max gap {worst:.1e})", pen.name()));
    }

    let mut draws_worst: f64 = 0.0;
    let mut draw_misses = 0;
    for pen in families() {
        for i in 0..10_000 {
            let z = 2.0 * normal(&mut rng);
            let norm = rng.random_range(0.2..2.0);
            let lambda = rng.random_range(0.05..2.0);
            let got = univariate_threshold(z, norm, pen, lambda);
            let want = oracle_1d(norm, z, 1.0, pen, lambda);
            if i < 200 {
                // The oracle itself must beat a fine grid.
                let g = |t: f64| 0.5 * norm * t * t - z * t + pen.value(t.abs(), lambda);
                let span = 2.0 * z.abs() / norm + 1.0;
                let grid = (-20_000..=20_000).map(|j| j as f64 * span / 20_000.0).map(g).fold(f64::INFINITY, f64::min);
                assert!(g(want) <= grid + 1e-12, "1-D oracle beaten by grid at z = {z}, norm = {norm}");
            }
            let gap = (got - want).abs();
            draws_worst = draws_worst.max(gap);
            if gap > 1e-3 {
                draw_misses += 1;
            }
        }
    }
    pass &= draw_misses == 0;
    parts.push(format!("threshold: {draw_misses} misses in 5x10^4 draws (max gap {draws_worst:.1e})"));
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 4. Whitening closed form against an eigendecomposition

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for _ in 0..500 {
        let n_taxa = rng.random_range(2..=40);
        let l = rng.random_range(2..=n_taxa.min(30));
        let mut taxa: Vec<usize> = (0..n_taxa).collect();
        taxa.shuffle(&mut rng);
        let mut nonzero = taxa[..l].to_vec();
        nonzero.sort();
        let t = SubcompositionTransform::new(n_taxa, nonzero).unwrap();
        let closed = whitening_matrix(&t, &WorkingCovariance::Identity).unwrap();
        let a = t.matrix_a();
        let eig = SymmetricEigen::new(&a * a.transpose());
        let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
        let reference = &eig.eigenvectors * d * eig.eigenvectors.transpose();
        worst = worst.max((closed - reference).amax());
        count += 1;
    }
    outcome(worst <= 1e-10, format!("max entry gap {worst:.1e} over {count} patterns"))
}

// ---------------------------------------------------------------------------
// 5. Density normalization and subcomposition margins

/// Mean and covariance of the log-ratios of the present taxa against the last
/// present one, computed from the full-composition parameters.
fn sub_moments(mu: &[f64], sigma: &DMatrix<f64>, present: &[usize]) -> (Vec<f64>, DMatrix<f64>) {
    let k = mu.len();
    let d = *present.last().unwrap();
    let mut a = DMatrix::<f64>::zeros(present.len() - 1, k);
    for (l, &j) in present[..present.len() - 1].iter().enumerate() {
        if j < k {
            a[(l, j)] += 1.0;
        }
        if d < k {
            a[(l, d)] -= 1.0;
        }
    }
    let m: Vec<f64> = (&a * nalgebra::DVector::<f64>::from_column_slice(mu)).iter().copied().collect();
    (m, &a * sigma * a.transpose())
}

fn criterion_5() -> Outcome {
    let mu = vec![0.3, -0.5];
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]);
    let patterns = all_presence_patterns(3).unwrap();
    let raw = [3.0, 1.0, 2.0, 1.5, 0.5, 2.5, 4.0];
    let total: f64 = raw.iter().sum();
    let masses: BTreeMap<Vec<bool>, f64> = patterns.iter().cloned().zip(raw.iter().map(|r| r / total)).collect();
    let params = MzilnParams::new(mu.clone(), sigma.clone(), masses).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 1_000_000;
    let pick = 1.0 / patterns.len() as f64;
    let mut sum = 0.0;
    for _ in 0..draws {
        let z = &patterns[rng.random_range(0..patterns.len())];
        let present: Vec<usize> = (0..3).filter(|&j| z[j]).collect();
        let mut values = vec![0.0; 3];
        let mut proposal = pick;
        if present.len() == 1 {
            values[present[0]] = 1.0;
        } else {
            let (m, s) = sub_moments(&mu, &sigma, &present);
            let u: Vec<f64> = (0..m.len())
                .map(|l| {
                    let sd = 2.0 * s[(l, l)].sqrt();
                    let v = m[l] + sd * normal(&mut rng);
                    proposal *= Normal::new(m[l], sd).unwrap().pdf(v);
                    v
                })
                .collect();
            let denom = 1.0 + u.iter().map(|v| v.exp()).sum::<f64>();
            for (l, &j) in present[..present.len() - 1].iter().enumerate() {
                values[j] = u[l].exp() / denom;
            }
            values[*present.last().unwrap()] = 1.0 / denom;
        }
        let sample = CompositionSample::new(values).unwrap();
        sum += mziln_log_density(&sample, &params).unwrap().exp() / proposal;
    }
    let normalization = sum / draws as f64;

    let chol = sigma.clone().cholesky().unwrap().l();
    let mut p_min: f64 = 1.0;
    let mut tests = 0;
    for z in patterns.iter().filter(|z| z.iter().filter(|p| **p).count() >= 2) {
        let present: Vec<usize> = (0..3).filter(|&j| z[j]).collect();
        let (m, s) = sub_moments(&mu, &sigma, &present);
        let mut margins = vec![Vec::with_capacity(10_000); m.len()];
        for _ in 0..10_000 {
            let sample = gen_mziln_sample(&mu, &chol, z, &mut rng).unwrap();
            let (_, u) = log_ratio_transform(&sample).unwrap();
            for (l, v) in u.into_iter().enumerate() {
                margins[l].push(v);
            }
        }
        for (l, margin) in margins.iter_mut().enumerate() {
            let p = ks_p_value(margin, &Normal::new(m[l], s[(l, l)].sqrt()).unwrap());
            p_min = p_min.min(p);
            tests += 1;
        }
    }
    outcome(
        (normalization - 1.0).abs() <= 0.01 && p_min > 0.01,
        format!("normalization {normalization:.4}; smallest KS p-value {p_min:.3} over {tests} margins"),
    )
}

// ---------------------------------------------------------------------------
// 6-8. High-dimensional selection

fn recalls(cells: &[CellResult]) -> Vec<f64> {
    cells.iter().map(|c| highdim(c).mziln.recall_mean).collect()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn criterion_6(tmp: &Path) -> Outcome {
    let snr = recalls(&simulate("snr_sweep.toml", &tmp.join("snr")));
    let rho = recalls(&simulate("rho_sweep.toml", &tmp.join("rho")));
    let sparsity = recalls(&simulate("sparsity_sweep.toml", &tmp.join("sparsity")));
    let a = snr.windows(2).all(|w| w[0] <= w[1]) && snr[2] >= 0.8;
    let spread = rho.iter().copied().fold(f64::NEG_INFINITY, f64::max) - rho.iter().copied().fold(f64::INFINITY, f64::min);
    let b = spread <= 0.15;
    let c = sparsity.iter().all(|r| *r >= 0.6);
    outcome(
        a && b && c,
        format!(
            "(a) recall over SNR 1.5/4.5/7.5: {} {}; (b) over rho 0.2/0.5/0.8: {} spread {spread:.3} {}; (c) over presence 0.2/0.54/0.8: {} {}",
            fmt(&snr),
            if a { "ok" } else { "FAIL" },
            fmt(&rho),
            if b { "ok" } else { "FAIL" },
            fmt(&sparsity),
            if c { "ok" } else { "FAIL" },
        ),
    )
}

fn criterion_7(tmp: &Path) -> Outcome {
    let cells = simulate("comparison.toml", tmp);
    let mut pass = true;
    let mut parts = Vec::new();
    for cell in &cells {
        let h = highdim(cell);
        let ours = h.mziln.f1_mean;
        let theirs = h.spearman.expect("comparison runs the baseline").f1_mean;
        pass &= ours > theirs;
        let key: Vec<String> = cell.key.iter().map(|(k, v)| format!("{k}={v}")).collect();
        parts.push(format!("[{}] {ours:.3} vs {theirs:.3}", key.join(" ")));
    }
    outcome(pass, format!("F1 mziln vs spearman: {}", parts.join("; ")))
}

fn criterion_8(tmp: &Path) -> Outcome {
    let r = recalls(&simulate("misspecification.toml", tmp));
    let gap = (r[2] - r[0]).abs();
    outcome(gap <= 0.2, format!("recall at gamma 0/0.5/1: {}; gap {gap:.3}", fmt(&r)))
}

// ---------------------------------------------------------------------------
// 9. Baseline under a permuted null

fn criterion_9() -> Outcome {
    let config = ScenarioConfig {
        n_taxa: 40,
        n_covariates: 10,
        ..ScenarioConfig::desk_highdim()
    };
    let mut total = 0usize;
    let mut n_tests = 0;
    for seed in 0..100u64 {
        let (data, _) = generate_highdim(&config, seed).unwrap();
        let mut covariates = data.covariates.clone();
        covariates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let tests = spearman_baseline(&data.samples, &covariates, 0.05).unwrap();
        n_tests = tests.len();
        total += tests.iter().filter(|t| t.selected).count();
    }
    let mean = total as f64 / 100.0;
    outcome(
        mean <= 2.0 && n_tests == 400,
        format!("{mean:.2} pairs selected on average, {n_tests} tests per dataset"),
    )
}

// ---------------------------------------------------------------------------
// 10. Reruns are byte-identical

const DETERMINISM_HIGHDIM: &str = r#"
mode = "highdim"
n_subjects = 60
n_taxa = 12
n_covariates = 4
n_active_covariates = 2
taxa_per_active_covariate = 2
run_spearman = true
folds = 5
lambda_grid_size = 30
n_replicates = 6
seed = 10

[sweep]
snr = [2.0, "inf"]
misspec_gamma = [0.0, 0.5]
"#;

const DETERMINISM_LOWDIM: &str = r#"
mode = "lowdim"
n_subjects = 200
n_taxa = 5
n_covariates = 1
n_active_covariates = 0
outcome_structure = "exchangeable"
outcome_rho = 0.3
n_replicates = 6
seed = 11
"#;

fn criterion_10(tmp: &Path) -> Outcome {
    let mut pass = true;
    let mut compared = 0;
    for (name, text) in [("highdim", DETERMINISM_HIGHDIM), ("lowdim", DETERMINISM_LOWDIM)] {
        let path = tmp.join(format!("{name}.toml"));
        std::fs::write(&path, text).unwrap();
        let run = |threads: usize, out: PathBuf| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                cmd_simulate(&SimulateOptions {
                    manifest: path.clone(),
                    out_dir: out,
                })
                .unwrap()
            });
        };
        let (first, second) = (tmp.join(format!("{name}-1")), tmp.join(format!("{name}-2")));
        run(1, first.clone());
        run(3, second.clone());
        for file in ["table1.tsv", "replicates.tsv", "summary.tsv", "summary.json"] {
            let a = first.join(file);
            if a.exists() {
                pass &= std::fs::read(&a).unwrap() == std::fs::read(second.join(file)).unwrap();
                compared += 1;
            }
        }
    }
    outcome(pass, format!("{compared} metric files compared across 1 and 3 worker threads"))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |n: usize| {
        let d = tmp.path().join(format!("c{n}"));
        std::fs::create_dir_all(&d).unwrap();
        d
    };
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let checks: Vec<(usize, &str, Check)> = vec![
        (1, "low-dimensional bias and coverage", Box::new(|| criterion_1(&dir(1)))),
        (2, "estimating equation at the fit", Box::new(criterion_2)),
        (3, "penalized solver oracle", Box::new(criterion_3)),
        (4, "whitening closed form", Box::new(criterion_4)),
        (5, "distributional fidelity", Box::new(criterion_5)),
        (6, "selection trends", Box::new(|| criterion_6(&dir(6)))),
        (7, "comparison with spearman", Box::new(|| criterion_7(&dir(7)))),
        (8, "misspecification robustness", Box::new(|| criterion_8(&dir(8)))),
        (9, "null calibration", Box::new(criterion_9)),
        (10, "determinism", Box::new(|| criterion_10(&dir(10)))),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in checks {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {status}  {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
