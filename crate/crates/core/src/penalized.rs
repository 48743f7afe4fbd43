//! Penalized least squares on a [`WhitenedSystem`].
//!
//! Cyclic coordinate descent minimizes
//!
//! ```text
//! 1/(2R) ||Ũ - X̃ beta||^2 + sum_m w_m pen_lambda(|b_m|)
//! ```
//!
//! where `b_m = s_m beta_m` are coefficients on columns scaled to unit root
//! mean square (`s_m^2 = ||x̃_m||^2 / R`). With that scaling every coordinate
//! subproblem has unit curvature, so `gamma` for MCP and SCAD keeps its usual
//! meaning. Coefficients are reported on the original scale.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::composition::Direction;
use crate::error::{Error, Result};
use crate::regression::{dot, CoefficientVector, WhitenedSystem};

/// Penalty family with its shape parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Penalty {
    Lasso,
    AdaptiveLasso,
    /// `lambda [alpha |b| + (1 - alpha) b^2 / 2]`.
    ElasticNet { alpha: f64 },
    Scad { gamma: f64 },
    Mcp { gamma: f64 },
}

impl Penalty {
    pub const DEFAULT_MCP_GAMMA: f64 = 3.0;
    pub const DEFAULT_SCAD_GAMMA: f64 = 3.7;
    pub const DEFAULT_ENET_ALPHA: f64 = 0.5;

    pub fn mcp() -> Self {
        Penalty::Mcp {
            gamma: Self::DEFAULT_MCP_GAMMA,
        }
    }

    pub fn scad() -> Self {
        Penalty::Scad {
            gamma: Self::DEFAULT_SCAD_GAMMA,
        }
    }

    pub fn elastic_net() -> Self {
        Penalty::ElasticNet {
            alpha: Self::DEFAULT_ENET_ALPHA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Penalty::Lasso => "lasso",
            Penalty::AdaptiveLasso => "alasso",
            Penalty::ElasticNet { .. } => "enet",
            Penalty::Scad { .. } => "scad",
            Penalty::Mcp { .. } => "mcp",
        }
    }

    pub fn is_convex(&self) -> bool {
        !matches!(self, Penalty::Scad { .. } | Penalty::Mcp { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Penalty::Mcp { gamma } if !(gamma > 1.0) => Err(Error::InvalidInput(format!(
                "MCP needs gamma > 1, got {gamma}"
            ))),
            Penalty::Scad { gamma } if !(gamma > 2.0) => Err(Error::InvalidInput(format!(
                "SCAD needs gamma > 2, got {gamma}"
            ))),
            Penalty::ElasticNet { alpha } if !(alpha > 0.0 && alpha <= 1.0) => Err(
                Error::InvalidInput(format!("elastic-net alpha must lie in (0, 1], got {alpha}")),
            ),
            _ => Ok(()),
        }
    }

    /// `pen_lambda(t)` for `t >= 0`.
    pub fn value(&self, t: f64, lambda: f64) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        match *self {
            Penalty::Lasso | Penalty::AdaptiveLasso => lambda * t,
            Penalty::ElasticNet { alpha } => lambda * (alpha * t + 0.5 * (1.0 - alpha) * t * t),
            Penalty::Mcp { gamma } => {
                if t <= gamma * lambda {
                    lambda * t - t * t / (2.0 * gamma)
                } else {
                    0.5 * gamma * lambda * lambda
                }
            }
            Penalty::Scad { gamma } => {
                if t <= lambda {
                    lambda * t
                } else if t <= gamma * lambda {
                    (2.0 * gamma * lambda * t - t * t - lambda * lambda) / (2.0 * (gamma - 1.0))
                } else {
                    0.5 * lambda * lambda * (gamma + 1.0)
                }
            }
        }
    }

    /// Factor applied to the largest gradient to get the smallest `lambda`
    /// with an all-zero solution.
    fn lambda_max_scale(&self) -> f64 {
        match *self {
            Penalty::ElasticNet { alpha } => alpha.max(1e-3),
            _ => 1.0,
        }
    }
}

fn soft(z: f64, t: f64) -> f64 {
    z.signum() * (z.abs() - t).max(0.0)
}

/// `argmin_b 1/2 norm b^2 - z b + pen_lambda(|b|)`, the coordinate-wise
/// minimizer.
///
/// Uses the closed forms when the subproblem is convex. MCP with
/// `norm <= 1/gamma` and SCAD with `norm <= 1/(gamma - 1)` are solved by
/// enumerating the stationary points and breakpoints of each quadratic piece.
pub fn univariate_threshold(z: f64, norm: f64, penalty: Penalty, lambda: f64) -> f64 {
    debug_assert!(norm > 0.0);
    if z == 0.0 {
        return 0.0;
    }
    match penalty {
        Penalty::Lasso | Penalty::AdaptiveLasso => soft(z, lambda) / norm,
        Penalty::ElasticNet { alpha } => soft(z, alpha * lambda) / (norm + lambda * (1.0 - alpha)),
        Penalty::Mcp { gamma } => {
            if norm * gamma > 1.0 {
                if z.abs() <= norm * gamma * lambda {
                    soft(z, lambda) / (norm - 1.0 / gamma)
                } else {
                    z / norm
                }
            } else {
                enumerate_pieces(z, norm, penalty, lambda)
            }
        }
        Penalty::Scad { gamma } => {
            if norm * (gamma - 1.0) > 1.0 {
                let a = z.abs();
                if a <= lambda * (norm + 1.0) {
                    soft(z, lambda) / norm
                } else if a <= norm * gamma * lambda {
                    soft(z, gamma * lambda / (gamma - 1.0)) / (norm - 1.0 / (gamma - 1.0))
                } else {
                    z / norm
                }
            } else {
                enumerate_pieces(z, norm, penalty, lambda)
            }
        }
    }
}

/// Exact minimization over the piecewise-quadratic objective.
fn enumerate_pieces(z: f64, norm: f64, penalty: Penalty, lambda: f64) -> f64 {
    let f = |b: f64| 0.5 * norm * b * b - z * b + penalty.value(b.abs(), lambda);
    let breaks: Vec<f64> = match penalty {
        Penalty::Mcp { gamma } => vec![0.0, gamma * lambda],
        Penalty::Scad { gamma } => vec![0.0, lambda, gamma * lambda],
        _ => vec![0.0],
    };
    // On each piece pen(t) = c0 + c1 t + c2 t^2.
    let piece = |lo: f64| -> (f64, f64) {
        match penalty {
            Penalty::Mcp { gamma } if lo < gamma * lambda => (lambda, -0.5 / gamma),
            Penalty::Scad { .. } if lo < lambda => (lambda, 0.0),
            Penalty::Scad { gamma } if lo < gamma * lambda => {
                (gamma * lambda / (gamma - 1.0), -0.5 / (gamma - 1.0))
            }
            _ => (0.0, 0.0),
        }
    };
    let s = z.signum();
    let mut best: (f64, f64) = (f(0.0), 0.0);
    let mut consider = |b: f64| {
        let v = f(b);
        if v < best.0 || (v == best.0 && b.abs() < best.1.abs()) {
            best = (v, b);
        }
    };
    for (i, &lo) in breaks.iter().enumerate() {
        let hi = breaks.get(i + 1).copied().unwrap_or(f64::INFINITY);
        consider(s * lo);
        if hi.is_finite() {
            consider(s * hi);
        }
        // Minimize 1/2 norm t^2 - |z| t + c1 t + c2 t^2 over t in [lo, hi].
        let (c1, c2) = piece(lo);
        let curv = norm + 2.0 * c2;
        if curv > 0.0 {
            let t = (z.abs() - c1) / curv;
            if t >= lo && t <= hi {
                consider(s * t);
            }
        }
    }
    best.1
}

/// Penalty family plus weighting choices.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    pub family: Penalty,
    /// Per-coefficient multipliers of `lambda`. For the adaptive LASSO these
    /// default to `1/(|ridge pilot| + 1e-6)`.
    pub adaptive_weights: Option<Vec<f64>>,
    pub penalize_intercepts: bool,
}

impl PenaltySpec {
    pub fn new(family: Penalty) -> Self {
        Self {
            family,
            adaptive_weights: None,
            penalize_intercepts: false,
        }
    }
}

/// Grid and convergence controls.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOptions {
    pub n_lambdas: usize,
    /// Smallest grid value as a fraction of `lambda_max`.
    pub min_ratio: f64,
    /// Convergence threshold on `max_m |Δb_m| / (1 + |b_m|)`.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Explicit descending grid; overrides `n_lambdas` and `min_ratio`.
    pub lambdas: Option<Vec<f64>>,
    /// Extra random starting points tried at each `lambda` for MCP and SCAD.
    pub restarts: usize,
    pub restart_seed: u64,
    /// Largest coefficient count solved with a precomputed Gram matrix;
    /// bigger problems update the residual directly.
    pub gram_limit: usize,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            n_lambdas: 100,
            min_ratio: 0.01,
            tol: 1e-7,
            max_sweeps: 10_000,
            lambdas: None,
            restarts: 0,
            restart_seed: 0,
            gram_limit: 2048,
        }
    }
}

/// Cross-validated error along the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSummary {
    pub folds: usize,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub index_min: usize,
    pub index_1se: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub family: Penalty,
    pub lambda_max: f64,
    /// Descending.
    pub lambdas: Vec<f64>,
    pub coefficients: Vec<CoefficientVector>,
    /// Number of nonzero penalized coefficients per `lambda`.
    pub support_sizes: Vec<usize>,
    pub sweeps: Vec<usize>,
    pub converged: Vec<bool>,
    pub cv: Option<CvSummary>,
    pub selected_index: Option<usize>,
    pub lambda_selected: Option<f64>,
}

impl PathResult {
    pub fn selected_coefficients(&self) -> Option<&CoefficientVector> {
        self.selected_index.map(|i| &self.coefficients[i])
    }

    fn select(&mut self, index: usize) {
        self.selected_index = Some(index);
        self.lambda_selected = Some(self.lambdas[index]);
    }
}

/// Precomputed column data for one system and penalty.
struct Problem<'a> {
    sys: &'a WhitenedSystem,
    width: usize,
    /// For each taxon: (block, column within block, squared column norm).
    by_taxon: Vec<Vec<(usize, usize, f64)>>,
    /// Root-mean-square column scale; zero for empty columns.
    scale: Vec<f64>,
    penalized: Vec<bool>,
    weights: Vec<f64>,
    family: Penalty,
    n_rows: f64,
    gram: Option<Gram>,
}

/// Standardized cross-products: `h[m][n] = x̃_m^T x̃_n / (R s_m s_n)`,
/// `c[m] = x̃_m^T ũ / (R s_m)` and `yy = ũ^T ũ / R`.
struct Gram {
    h: DMatrix<f64>,
    c: Vec<f64>,
    yy: f64,
}

#[derive(Clone)]
struct State {
    b: Vec<f64>,
    /// Residual, or in Gram mode the standardized gradient `c - h b`.
    r: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(sys: &'a WhitenedSystem, spec: &PenaltySpec, weights: Vec<f64>) -> Self {
        let width = sys.n_covariates() + 1;
        let m = sys.n_coefficients();
        let mut by_taxon = vec![Vec::new(); sys.n_log_ratios()];
        let mut sq = vec![0.0; m];
        for (bi, block) in sys.blocks.iter().enumerate() {
            for (c, &k) in block.taxa.iter().enumerate() {
                let g2 = block.weights.column(c).norm_squared();
                by_taxon[k].push((bi, c, g2));
                for (j, z) in block.design.iter().enumerate() {
                    sq[k * width + j] += g2 * z * z;
                }
            }
        }
        let n_rows = sys.n_rows() as f64;
        let scale = sq.iter().map(|s| (s / n_rows).sqrt()).collect();
        let penalized = (0..m)
            .map(|i| spec.penalize_intercepts || i % width != 0)
            .collect();
        Self {
            sys,
            width,
            by_taxon,
            scale,
            penalized,
            weights,
            family: spec.family,
            n_rows,
            gram: None,
        }
    }

    /// Switches to Gram updates when there are at most `limit` coefficients.
    fn with_gram_limit(mut self, limit: usize) -> Self {
        if self.scale.len() <= limit {
            self.gram = Some(self.build_gram());
        }
        self
    }

    /// Each subject adds `(G^T G) ⊗ z z^T` on its taxa.
    fn build_gram(&self) -> Gram {
        let m = self.scale.len();
        let w = self.width;
        let mut h = DMatrix::<f64>::zeros(m, m);
        for block in &self.sys.blocks {
            let gtg = block.weights.transpose() * &block.weights;
            for (a, &ka) in block.taxa.iter().enumerate() {
                for (b, &kb) in block.taxa.iter().enumerate() {
                    let v = gtg[(a, b)];
                    for (j, zj) in block.design.iter().enumerate() {
                        let vj = v * zj;
                        for (i, zi) in block.design.iter().enumerate() {
                            h[(ka * w + i, kb * w + j)] += vj * zi;
                        }
                    }
                }
            }
        }
        let inv: Vec<f64> = self
            .scale
            .iter()
            .map(|s| if *s > 0.0 { 1.0 / s } else { 0.0 })
            .collect();
        for j in 0..m {
            for i in 0..m {
                h[(i, j)] *= inv[i] * inv[j] / self.n_rows;
            }
        }
        let c = self
            .sys
            .transpose_mul(&self.sys.u_tilde)
            .iter()
            .zip(&inv)
            .map(|(g, i)| g * i / self.n_rows)
            .collect();
        let yy = dot(&self.sys.u_tilde, &self.sys.u_tilde) / self.n_rows;
        Gram { h, c, yy }
    }

    fn initial_state(&self) -> State {
        let r = match &self.gram {
            Some(g) => g.c.clone(),
            None => self.sys.u_tilde.clone(),
        };
        State {
            b: vec![0.0; self.scale.len()],
            r,
        }
    }

    /// `x̃_m^T r / (R s_m)` for every column.
    fn state_gradient(&self, st: &State) -> Vec<f64> {
        match &self.gram {
            Some(_) => st.r.clone(),
            None => self.gradient(&st.r),
        }
    }

    fn gradient(&self, r: &[f64]) -> Vec<f64> {
        self.sys
            .transpose_mul(r)
            .iter()
            .zip(&self.scale)
            .map(|(g, s)| if *s > 0.0 { g / (self.n_rows * s) } else { 0.0 })
            .collect()
    }

    fn objective(&self, st: &State, lambda: f64) -> f64 {
        let loss = match &self.gram {
            // ||r||^2 / R = yy - 2 b^T c + b^T h b, with h b = c - g.
            Some(g) => 0.5 * (g.yy - st.b.iter().zip(&g.c).zip(&st.r).map(|((b, c), r)| b * (c + r)).sum::<f64>()),
            None => st.r.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.n_rows),
        };
        let pen: f64 = st
            .b
            .iter()
            .enumerate()
            .filter(|&(m, b)| self.penalized[m] && *b != 0.0)
            .map(|(m, b)| self.family.value(b.abs(), lambda * self.weights[m]))
            .sum();
        loss + pen
    }

    fn coordinate(&self, m: usize, z: f64, lambda: f64) -> f64 {
        if !self.penalized[m] {
            z
        } else if lambda.is_infinite() {
            0.0
        } else {
            univariate_threshold(z, 1.0, self.family, lambda * self.weights[m])
        }
    }

    /// One cyclic pass; with `active` set, only those coordinates move.
    /// Returns the largest relative coefficient change.
    fn sweep(&self, st: &mut State, lambda: f64, active: Option<&[bool]>) -> f64 {
        if let Some(gram) = &self.gram {
            return self.sweep_gram(gram, st, lambda, active);
        }
        let mut max_change: f64 = 0.0;
        let mut h = Vec::new();
        let mut delta = Vec::new();
        for (k, entries) in self.by_taxon.iter().enumerate() {
            let base = k * self.width;
            let moving = |j: usize| {
                self.scale[base + j] > 0.0 && active.is_none_or(|a| a[base + j])
            };
            if entries.is_empty() || !(0..self.width).any(moving) {
                continue;
            }
            h.clear();
            delta.clear();
            for &(bi, c, _) in entries {
                let block = &self.sys.blocks[bi];
                let r = &st.r[block.rows.clone()];
                h.push(block.weights.column(c).iter().zip(r).map(|(g, v)| g * v).sum::<f64>());
                delta.push(0.0);
            }
            for j in (0..self.width).filter(|&j| moving(j)) {
                let m = base + j;
                let s = self.scale[m];
                let grad: f64 = entries
                    .iter()
                    .zip(&h)
                    .map(|(&(bi, _, _), hv)| self.sys.blocks[bi].design[j] * hv)
                    .sum();
                let old = st.b[m];
                let new = self.coordinate(m, grad / (self.n_rows * s) + old, lambda);
                if new == old {
                    continue;
                }
                st.b[m] = new;
                max_change = max_change.max((new - old).abs() / (1.0 + new.abs()));
                let step = (new - old) / s;
                for (e, &(bi, _, g2)) in entries.iter().enumerate() {
                    let z = self.sys.blocks[bi].design[j];
                    h[e] -= step * z * g2;
                    delta[e] += step * z;
                }
            }
            for (e, &(bi, c, _)) in entries.iter().enumerate() {
                if delta[e] != 0.0 {
                    let block = &self.sys.blocks[bi];
                    let col = block.weights.column(c);
                    for (rv, g) in st.r[block.rows.clone()].iter_mut().zip(col.iter()) {
                        *rv -= delta[e] * g;
                    }
                }
            }
        }
        max_change
    }

    fn sweep_gram(&self, gram: &Gram, st: &mut State, lambda: f64, active: Option<&[bool]>) -> f64 {
        let mut max_change: f64 = 0.0;
        let n = st.b.len();
        for m in 0..n {
            if self.scale[m] == 0.0 || active.is_some_and(|a| !a[m]) {
                continue;
            }
            let old = st.b[m];
            let new = self.coordinate(m, st.r[m] + old, lambda);
            if new == old {
                continue;
            }
            st.b[m] = new;
            max_change = max_change.max((new - old).abs() / (1.0 + new.abs()));
            let step = new - old;
            let col = &gram.h.as_slice()[m * n..(m + 1) * n];
            for (g, h) in st.r.iter_mut().zip(col) {
                *g -= step * h;
            }
        }
        max_change
    }

    fn checked_sweep(
        &self,
        st: &mut State,
        lambda: f64,
        active: Option<&[bool]>,
    ) -> Result<f64> {
        let before = self.objective(st, lambda);
        let change = self.sweep(st, lambda, active);
        let after = self.objective(st, lambda);
        if after > before + 1e-10 * (1.0 + before.abs()) {
            return Err(Error::Divergence {
                before,
                after,
                lambda,
            });
        }
        Ok(change)
    }

    /// Coordinate descent to convergence with an active-set strategy:
    /// iterate on the current nonzeros, then confirm with a full sweep.
    fn solve(&self, st: &mut State, lambda: f64, opts: &PathOptions) -> Result<(usize, bool)> {
        let mut sweeps = 0;
        while sweeps < opts.max_sweeps {
            sweeps += 1;
            let change = self.checked_sweep(st, lambda, None)?;
            if change < opts.tol {
                return Ok((sweeps, true));
            }
            let active: Vec<bool> = st
                .b
                .iter()
                .enumerate()
                .map(|(m, b)| *b != 0.0 || (!self.penalized[m] && self.scale[m] > 0.0))
                .collect();
            while sweeps < opts.max_sweeps {
                sweeps += 1;
                if self.checked_sweep(st, lambda, Some(&active))? < opts.tol {
                    break;
                }
            }
        }
        Ok((sweeps, false))
    }

    fn coefficients(&self, st: &State) -> CoefficientVector {
        let beta = st
            .b
            .iter()
            .zip(&self.scale)
            .map(|(b, s)| if *s > 0.0 { b / s } else { 0.0 })
            .collect();
        CoefficientVector::new(beta, self.sys.n_log_ratios(), self.sys.n_covariates())
            .expect("dimensions come from the system")
    }

    fn support_size(&self, st: &State) -> usize {
        st.b
            .iter()
            .enumerate()
            .filter(|&(m, b)| self.penalized[m] && *b != 0.0)
            .count()
    }

    fn lambda_max(&self, st: &State) -> f64 {
        let g = self.state_gradient(st);
        (0..g.len())
            .filter(|&m| self.penalized[m] && self.scale[m] > 0.0 && self.weights[m] > 0.0)
            .map(|m| g[m].abs() / self.weights[m])
            .fold(0.0, f64::max)
            / self.family.lambda_max_scale()
            // Absorbs rounding differences between this gradient and the one
            // accumulated inside a sweep.
            * (1.0 + 1e-12)
    }

    /// Starts from the state with every penalized coefficient at zero.
    fn null_state(&self, opts: &PathOptions) -> Result<State> {
        let mut st = self.initial_state();
        self.solve(&mut st, f64::INFINITY, opts)?;
        Ok(st)
    }

    fn restart_from(&self, base: &State, rng: &mut ChaCha8Rng) -> State {
        let mut st = base.clone();
        for (m, b) in st.b.iter_mut().enumerate() {
            if self.penalized[m] && self.scale[m] > 0.0 && rng.random_bool(0.5) {
                *b += rng.random_range(-1.0..1.0);
            }
        }
        st.r = match &self.gram {
            Some(g) => {
                let hb = &g.h * DVector::from_column_slice(&st.b);
                g.c.iter().zip(hb.iter()).map(|(c, h)| c - h).collect()
            }
            None => self.sys.residual(self.coefficients(&st).as_slice()),
        };
        st
    }
}

fn resolve_weights(sys: &WhitenedSystem, spec: &PenaltySpec, opts: &PathOptions) -> Result<Vec<f64>> {
    let m = sys.n_coefficients();
    if let Some(w) = &spec.adaptive_weights {
        if w.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{} penalty weights for {m} coefficients",
                w.len()
            )));
        }
        if let Some(v) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!("penalty weight {v} must be finite and nonnegative")));
        }
        return Ok(w.clone());
    }
    if spec.family == Penalty::AdaptiveLasso {
        adaptive_weights(sys, spec.penalize_intercepts, opts)
    } else {
        Ok(vec![1.0; m])
    }
}

/// Adaptive-LASSO weights `1/(|b_ridge| + 1e-6)` from a ridge pilot fit at
/// `1e-3 lambda_max`, on the standardized scale.
pub fn adaptive_weights(
    sys: &WhitenedSystem,
    penalize_intercepts: bool,
    opts: &PathOptions,
) -> Result<Vec<f64>> {
    let m = sys.n_coefficients();
    let lasso = PenaltySpec {
        family: Penalty::Lasso,
        adaptive_weights: None,
        penalize_intercepts,
    };
    let probe = Problem::new(sys, &lasso, vec![1.0; m]).with_gram_limit(opts.gram_limit);
    let null = probe.null_state(opts)?;
    let lambda_max = probe.lambda_max(&null);
    if !(lambda_max > 0.0) {
        return Err(Error::NoSignal);
    }
    let ridge_spec = PenaltySpec {
        family: Penalty::ElasticNet { alpha: 0.0 },
        ..lasso
    };
    let ridge = Problem::new(sys, &ridge_spec, vec![1.0; m]).with_gram_limit(opts.gram_limit);
    let mut st = null;
    ridge.solve(&mut st, 1e-3 * lambda_max, opts)?;
    Ok(st.b.iter().map(|b| 1.0 / (b.abs() + 1e-6)).collect())
}

/// Regularization path with warm starts down a descending `lambda` grid.
pub fn fit_penalized(
    sys: &WhitenedSystem,
    spec: &PenaltySpec,
    opts: &PathOptions,
) -> Result<PathResult> {
    spec.family.validate()?;
    let weights = resolve_weights(sys, spec, opts)?;
    let problem = Problem::new(sys, spec, weights).with_gram_limit(opts.gram_limit);
    let null = problem.null_state(opts)?;
    let lambda_max = problem.lambda_max(&null);
    let lambdas = match &opts.lambdas {
        Some(l) => {
            if l.iter().any(|v| !(*v >= 0.0)) || l.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::InvalidInput(
                    "lambda grid must be nonnegative and descending".into(),
                ));
            }
            l.clone()
        }
        None => {
            if !(lambda_max > 0.0 && lambda_max.is_finite()) {
                return Err(Error::NoSignal);
            }
            lambda_grid(lambda_max, opts.n_lambdas, opts.min_ratio)?
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.restart_seed);
    let mut st = null;
    let mut out = PathResult {
        family: spec.family,
        lambda_max,
        lambdas: lambdas.clone(),
        coefficients: Vec::with_capacity(lambdas.len()),
        support_sizes: Vec::with_capacity(lambdas.len()),
        sweeps: Vec::with_capacity(lambdas.len()),
        converged: Vec::with_capacity(lambdas.len()),
        cv: None,
        selected_index: None,
        lambda_selected: None,
    };
    for &lambda in &lambdas {
        let (mut sweeps, mut converged) = problem.solve(&mut st, lambda, opts)?;
        if !spec.family.is_convex() {
            let mut best = problem.objective(&st, lambda);
            for _ in 0..opts.restarts {
                let mut trial = problem.restart_from(&st, &mut rng);
                let (s, c) = problem.solve(&mut trial, lambda, opts)?;
                let value = problem.objective(&trial, lambda);
                if value < best {
                    best = value;
                    st = trial;
                    sweeps = s;
                    converged = c;
                }
            }
        }
        if !converged {
            log::warn!("coordinate descent hit {} sweeps at lambda = {lambda:e}", opts.max_sweeps);
        }
        out.coefficients.push(problem.coefficients(&st));
        out.support_sizes.push(problem.support_size(&st));
        out.sweeps.push(sweeps);
        out.converged.push(converged);
    }
    Ok(out)
}

/// `n` values log-spaced from `lambda_max` down to `min_ratio lambda_max`.
pub fn lambda_grid(lambda_max: f64, n: usize, min_ratio: f64) -> Result<Vec<f64>> {
    if n == 0 || !(min_ratio > 0.0 && min_ratio < 1.0) {
        return Err(Error::InvalidInput(format!(
            "grid needs n >= 1 and 0 < min_ratio < 1, got n = {n}, min_ratio = {min_ratio}"
        )));
    }
    if n == 1 {
        return Ok(vec![lambda_max]);
    }
    let step = min_ratio.ln() / (n - 1) as f64;
    Ok((0..n).map(|i| lambda_max * (step * i as f64).exp()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    /// Select the largest `lambda` within one standard error of the minimum.
    pub one_se: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            seed: 0,
            one_se: false,
        }
    }
}

/// Fold label of each subject block: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n_subjects: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 || folds > n_subjects {
        return Err(Error::InvalidInput(format!(
            "{folds} folds for {n_subjects} eligible subjects"
        )));
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n_subjects];
    for (pos, &s) in order.iter().enumerate() {
        fold[s] = pos % folds;
    }
    Ok(fold)
}

/// K-fold cross-validation over subjects.
///
/// The grid and any adaptive weights come from the full data. Each fold fits
/// the path on the remaining subjects and scores the mean squared whitened
/// residual over its held-out rows. The smallest `lambda` attaining the
/// minimal mean error is selected unless `one_se` is set.
pub fn cross_validate(
    sys: &WhitenedSystem,
    spec: &PenaltySpec,
    opts: &PathOptions,
    cv: &CvOptions,
) -> Result<PathResult> {
    spec.family.validate()?;
    let n = sys.n_subjects_used();
    let fold = fold_assignment(n, cv.folds, cv.seed)?;
    let spec = PenaltySpec {
        adaptive_weights: Some(resolve_weights(sys, spec, opts)?),
        ..spec.clone()
    };
    let mut full = fit_penalized(sys, &spec, opts)?;
    let fold_opts = PathOptions {
        lambdas: Some(full.lambdas.clone()),
        ..opts.clone()
    };

    let errors: Vec<Vec<f64>> = (0..cv.folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&s| fold[s] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&s| fold[s] == f).collect();
            let train = sys.subset(&train);
            let test = sys.subset(&test);
            let path = fit_penalized(&train, &spec, &fold_opts)?;
            Ok(path
                .coefficients
                .iter()
                .map(|beta| {
                    let r = test.residual(beta.as_slice());
                    r.iter().map(|v| v * v).sum::<f64>() / r.len().max(1) as f64
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let n_lambda = full.lambdas.len();
    let k = cv.folds as f64;
    let mean: Vec<f64> = (0..n_lambda)
        .map(|i| errors.iter().map(|e| e[i]).sum::<f64>() / k)
        .collect();
    let se: Vec<f64> = (0..n_lambda)
        .map(|i| {
            let var = errors.iter().map(|e| (e[i] - mean[i]).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        })
        .collect();
    let mut index_min = 0;
    for i in 1..n_lambda {
        if mean[i] <= mean[index_min] {
            index_min = i;
        }
    }
    let bound = mean[index_min] + se[index_min];
    let index_1se = (0..=index_min).find(|&i| mean[i] <= bound).unwrap_or(index_min);
    full.cv = Some(CvSummary {
        folds: cv.folds,
        mean,
        se,
        index_min,
        index_1se,
    });
    full.select(if cv.one_se { index_1se } else { index_min });
    Ok(full)
}

/// A selected covariate-taxon association.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelectedPair {
    /// Log-ratio index, 0-based.
    pub taxon: usize,
    /// Covariate index, 1-based (0 is the intercept).
    pub covariate: usize,
    pub direction: Direction,
    pub estimate: f64,
}

/// Nonzero covariate effects (`|beta| > threshold`, intercepts excluded) at
/// the selected `lambda`.
pub fn selected_support(path: &PathResult, threshold: f64) -> Result<Vec<SelectedPair>> {
    let beta = path
        .selected_coefficients()
        .ok_or_else(|| Error::InvalidInput("no lambda has been selected".into()))?;
    Ok(support_of(beta, threshold))
}

pub fn support_of(beta: &CoefficientVector, threshold: f64) -> Vec<SelectedPair> {
    let mut out = Vec::new();
    for k in 0..beta.n_log_ratios() {
        for q in 1..=beta.n_covariates() {
            let v = beta.get(k, q);
            if v.abs() > threshold {
                out.push(SelectedPair {
                    taxon: k,
                    covariate: q,
                    direction: Direction::of(v),
                    estimate: v,
                });
            }
        }
    }
    out
}
