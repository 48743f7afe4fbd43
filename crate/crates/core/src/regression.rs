//! Log-ratio regression: Kronecker design, per-subject whitening, the stacked
//! least-squares system, the estimating equation, and the low-dimensional
//! maximum-likelihood fit with sandwich variances.
//!
//! For subject `i` with covariates `x_i`, the mean log-ratio vector is
//! `X_i beta` with `X_i = I_K ⊗ (1, x_i^T)`. Only the nonzero subcomposition is
//! observed, so the subject contributes the rows `W_i A_i X_i` and the response
//! `W_i u_sub`, where `W_i = (A_i Sigma A_i^T)^{-1/2}`. Stacking all subjects
//! turns the estimating equation `sum_i X̃_i^T (Ũ_i - X̃_i beta) = 0` into
//! ordinary least squares.
//!
//! Each whitened row is `a ⊗ (1, x_i^T)` for a taxon-weight vector `a` that is
//! supported on the subject's nonzero taxa, so the system is stored in that
//! factored form rather than as a dense `R x M` matrix.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::composition::{log_ratio_transform, CompositionSample, SubcompositionTransform};
use crate::error::{Error, Result};
use crate::linalg;
use crate::optim;

/// Largest coefficient count for which dense factorizations are used.
pub const DENSE_LIMIT: usize = 5000;

/// Covariates of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateRecord {
    pub subject_id: String,
    pub x: Vec<f64>,
}

impl CovariateRecord {
    pub fn new(subject_id: impl Into<String>, x: Vec<f64>) -> Result<Self> {
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("covariate {v} is not finite")));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            x,
        })
    }

    /// Anonymous record, for generated data.
    pub fn from_values(x: Vec<f64>) -> Self {
        Self {
            subject_id: String::new(),
            x,
        }
    }

    /// `(1, x^T)`.
    pub fn design_row(&self) -> Vec<f64> {
        std::iter::once(1.0).chain(self.x.iter().copied()).collect()
    }
}

/// Regression coefficients `beta` of length `M = K (Q + 1)`.
///
/// The layout is taxon-major: entry `k (Q + 1) + q` (0-based) is the effect of
/// covariate `q` on log-ratio `k`, with `q = 0` the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    beta: Vec<f64>,
    n_log_ratios: usize,
    n_covariates: usize,
}

impl CoefficientVector {
    pub fn new(beta: Vec<f64>, n_log_ratios: usize, n_covariates: usize) -> Result<Self> {
        if beta.len() != n_log_ratios * (n_covariates + 1) {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for K = {n_log_ratios}, Q = {n_covariates}",
                beta.len()
            )));
        }
        Ok(Self {
            beta,
            n_log_ratios,
            n_covariates,
        })
    }

    pub fn zeros(n_log_ratios: usize, n_covariates: usize) -> Self {
        Self {
            beta: vec![0.0; n_log_ratios * (n_covariates + 1)],
            n_log_ratios,
            n_covariates,
        }
    }

    /// Number of log-ratios, `K`.
    pub fn n_log_ratios(&self) -> usize {
        self.n_log_ratios
    }

    /// Number of covariates, `Q`.
    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.beta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.beta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Flat position of the effect of covariate `q` on log-ratio `k`.
    pub fn index(&self, k: usize, q: usize) -> usize {
        k * (self.n_covariates + 1) + q
    }

    pub fn get(&self, k: usize, q: usize) -> f64 {
        self.beta[self.index(k, q)]
    }

    /// Coefficients of log-ratio `k` (`beta_{0k}`): intercept then covariates.
    pub fn taxon_block(&self, k: usize) -> Result<&[f64]> {
        if k >= self.n_log_ratios {
            return Err(Error::IndexOutOfRange {
                index: k,
                lower: 0,
                upper: self.n_log_ratios.saturating_sub(1),
            });
        }
        let w = self.n_covariates + 1;
        Ok(&self.beta[k * w..(k + 1) * w])
    }

    /// Coefficients of covariate `q` across all log-ratios (`beta_{q0}`);
    /// `q = 0` gives the intercept vector.
    pub fn covariate_effects(&self, q: usize) -> Result<Vec<f64>> {
        if q > self.n_covariates {
            return Err(Error::IndexOutOfRange {
                index: q,
                lower: 0,
                upper: self.n_covariates,
            });
        }
        Ok(self
            .beta
            .iter()
            .skip(q)
            .step_by(self.n_covariates + 1)
            .copied()
            .collect())
    }
}

/// The subject design `X_i = I_K ⊗ (1, x_i^T)` kept in Kronecker form.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlock {
    n_log_ratios: usize,
    row: Vec<f64>,
}

impl DesignBlock {
    /// The shared `(1, x^T)` row.
    pub fn row(&self) -> &[f64] {
        &self.row
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let w = self.row.len();
        let mut m = DMatrix::zeros(self.n_log_ratios, self.n_log_ratios * w);
        for k in 0..self.n_log_ratios {
            for (j, &v) in self.row.iter().enumerate() {
                m[(k, k * w + j)] = v;
            }
        }
        m
    }

    /// `X_i beta`, the mean log-ratio vector of the subject.
    pub fn mul(&self, beta: &CoefficientVector) -> Vec<f64> {
        let w = self.row.len();
        beta.as_slice()
            .chunks(w)
            .map(|b| dot(b, &self.row))
            .collect()
    }
}

pub fn build_design_row_block(x: &CovariateRecord, n_log_ratios: usize) -> DesignBlock {
    DesignBlock {
        n_log_ratios,
        row: x.design_row(),
    }
}

/// Working covariance `Sigma` of the full log-ratio vector.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkingCovariance {
    Identity,
    /// `sd^2 [(1 - rho) I + rho 1 1^T]`.
    Exchangeable { sd: f64, rho: f64 },
    Unstructured(DMatrix<f64>),
}

impl WorkingCovariance {
    pub fn validate(&self, k: usize) -> Result<()> {
        match self {
            WorkingCovariance::Identity => Ok(()),
            WorkingCovariance::Exchangeable { sd, rho } => {
                let lower = if k > 1 { -1.0 / (k as f64 - 1.0) } else { -1.0 };
                if !(*sd > 0.0 && sd.is_finite()) || !(*rho > lower && *rho < 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "exchangeable covariance needs sd > 0 and {lower} < rho < 1, got sd = {sd}, rho = {rho}"
                    )));
                }
                Ok(())
            }
            WorkingCovariance::Unstructured(s) => {
                if s.nrows() != k || s.ncols() != k {
                    return Err(Error::DimensionMismatch(format!(
                        "working covariance is {}x{}, expected {k}x{k}",
                        s.nrows(),
                        s.ncols()
                    )));
                }
                if !linalg::is_symmetric(s, 1e-10) {
                    return Err(Error::InvalidInput("working covariance is not symmetric".into()));
                }
                linalg::cholesky(s).map(|_| ())
            }
        }
    }

    pub fn matrix(&self, k: usize) -> DMatrix<f64> {
        match self {
            WorkingCovariance::Identity => DMatrix::identity(k, k),
            WorkingCovariance::Exchangeable { sd, rho } => {
                let v = sd * sd;
                DMatrix::from_fn(k, k, |i, j| if i == j { v } else { v * rho })
            }
            WorkingCovariance::Unstructured(s) => s.clone(),
        }
    }
}

/// `Omega^{1/2} = (A Sigma A^T)^{-1/2}`, the symmetric whitening matrix of one
/// subject.
///
/// Under the identity working covariance `A A^T` is `I` when the reference
/// taxon is present and `I + 1 1^T` otherwise, and the square root has the
/// closed form `I - c 1 1^T` with `c = (1 - 1/sqrt(L)) / (L - 1)`.
pub fn whitening_matrix(
    transform: &SubcompositionTransform,
    working: &WorkingCovariance,
) -> Result<DMatrix<f64>> {
    let d = transform.n_rows();
    match working {
        WorkingCovariance::Identity => {
            if transform.reference_present() {
                Ok(DMatrix::identity(d, d))
            } else {
                let l = transform.n_present() as f64;
                let c = (1.0 - 1.0 / l.sqrt()) / (l - 1.0);
                Ok(DMatrix::from_fn(d, d, |i, j| {
                    if i == j {
                        1.0 - c
                    } else {
                        -c
                    }
                }))
            }
        }
        other => {
            let s = transform.project_covariance(&other.matrix(transform.dim()));
            linalg::inverse_sqrt_spd(&s)
        }
    }
}

/// One subject's whitened rows, in factored form.
///
/// Row `l` of `X̃_i` equals `sum_c weights[l, c] e_{taxa[c]} ⊗ design`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedSubject {
    pub taxa: Vec<usize>,
    pub weights: DMatrix<f64>,
    pub design: Vec<f64>,
    pub u_tilde: Vec<f64>,
}

impl WhitenedSubject {
    /// Dense `(L - 1) x K(Q + 1)` block `X̃_i`.
    pub fn x_tilde(&self, n_log_ratios: usize) -> DMatrix<f64> {
        let w = self.design.len();
        let mut m = DMatrix::zeros(self.weights.nrows(), n_log_ratios * w);
        for l in 0..self.weights.nrows() {
            for (c, &k) in self.taxa.iter().enumerate() {
                for (j, &z) in self.design.iter().enumerate() {
                    m[(l, k * w + j)] = self.weights[(l, c)] * z;
                }
            }
        }
        m
    }
}

/// Whitens one subject: returns `W A X_i` (factored) and `W u_sub`.
pub fn whiten_subject(
    transform: &SubcompositionTransform,
    x: &CovariateRecord,
    u_sub: &[f64],
    working: &WorkingCovariance,
) -> Result<WhitenedSubject> {
    if u_sub.len() != transform.n_rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} log-ratios for a subcomposition of {} taxa",
            u_sub.len(),
            transform.n_present()
        )));
    }
    let w = whitening_matrix(transform, working)?;
    let taxa = transform.active_columns().to_vec();
    let d = transform.n_rows();
    let weights = if transform.reference_present() {
        w.clone()
    } else {
        // A restricted to its active columns is [I | -1].
        let mut a = DMatrix::zeros(d, d + 1);
        for l in 0..d {
            a[(l, l)] = 1.0;
            a[(l, d)] = -1.0;
        }
        &w * a
    };
    let u_tilde = (&w * DVector::from_column_slice(u_sub)).as_slice().to_vec();
    Ok(WhitenedSubject {
        taxa,
        weights,
        design: x.design_row(),
        u_tilde,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SubjectBlock {
    pub(crate) design: Vec<f64>,
    pub(crate) taxa: Vec<usize>,
    pub(crate) weights: DMatrix<f64>,
    pub(crate) rows: Range<usize>,
}

/// The stacked whitened least-squares system `(X̃, Ũ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedSystem {
    n_log_ratios: usize,
    n_covariates: usize,
    pub(crate) blocks: Vec<SubjectBlock>,
    pub(crate) u_tilde: Vec<f64>,
    subjects: Vec<usize>,
    n_skipped: usize,
}

impl WhitenedSystem {
    /// Number of log-ratios, `K`.
    pub fn n_log_ratios(&self) -> usize {
        self.n_log_ratios
    }

    /// Number of covariates, `Q`.
    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    /// Number of coefficients, `M = K (Q + 1)`.
    pub fn n_coefficients(&self) -> usize {
        self.n_log_ratios * (self.n_covariates + 1)
    }

    /// Number of stacked rows, `R = sum_i (L_i - 1)`.
    pub fn n_rows(&self) -> usize {
        self.u_tilde.len()
    }

    pub fn n_subjects_used(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_subjects_skipped(&self) -> usize {
        self.n_skipped
    }

    /// Input positions of the subjects that contributed rows.
    pub fn subject_indices(&self) -> &[usize] {
        &self.subjects
    }

    pub fn subject_row_spans(&self) -> Vec<Range<usize>> {
        self.blocks.iter().map(|b| b.rows.clone()).collect()
    }

    pub fn u_tilde(&self) -> &[f64] {
        &self.u_tilde
    }

    /// Builds a system from an arbitrary dense design. Consecutive groups of
    /// `rows_per_subject` rows form one subject. The result has `K = p`
    /// log-ratios and no covariates, so coefficient `m` is column `m`.
    pub fn from_dense(x: &DMatrix<f64>, u: &[f64], rows_per_subject: usize) -> Result<Self> {
        if x.nrows() != u.len() || rows_per_subject == 0 || !x.nrows().is_multiple_of(rows_per_subject) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} design, {} responses, {} rows per subject",
                x.nrows(),
                x.ncols(),
                u.len(),
                rows_per_subject
            )));
        }
        let p = x.ncols();
        let blocks: Vec<_> = (0..x.nrows() / rows_per_subject)
            .map(|s| {
                let rows = s * rows_per_subject..(s + 1) * rows_per_subject;
                SubjectBlock {
                    design: vec![1.0],
                    taxa: (0..p).collect(),
                    weights: x.rows(rows.start, rows_per_subject).into_owned(),
                    rows,
                }
            })
            .collect();
        Ok(Self {
            n_log_ratios: p,
            n_covariates: 0,
            subjects: (0..blocks.len()).collect(),
            blocks,
            u_tilde: u.to_vec(),
            n_skipped: 0,
        })
    }

    /// Restricts the system to the listed subject blocks, in that order.
    pub fn subset(&self, blocks: &[usize]) -> Self {
        let mut out = Vec::with_capacity(blocks.len());
        let mut u = Vec::new();
        for &b in blocks {
            let block = &self.blocks[b];
            let start = u.len();
            u.extend_from_slice(&self.u_tilde[block.rows.clone()]);
            out.push(SubjectBlock {
                rows: start..u.len(),
                ..block.clone()
            });
        }
        Self {
            n_log_ratios: self.n_log_ratios,
            n_covariates: self.n_covariates,
            subjects: blocks.iter().map(|&b| self.subjects[b]).collect(),
            blocks: out,
            u_tilde: u,
            n_skipped: 0,
        }
    }

    fn check_beta(&self, beta: &[f64]) {
        assert_eq!(
            beta.len(),
            self.n_coefficients(),
            "coefficient vector does not match the system"
        );
    }

    /// `X̃ beta`.
    pub fn predict(&self, beta: &[f64]) -> Vec<f64> {
        self.check_beta(beta);
        let w = self.n_covariates + 1;
        let mut out = vec![0.0; self.n_rows()];
        for b in &self.blocks {
            let eta: Vec<f64> = b
                .taxa
                .iter()
                .map(|&k| dot(&beta[k * w..(k + 1) * w], &b.design))
                .collect();
            for (l, o) in out[b.rows.clone()].iter_mut().enumerate() {
                *o = (0..eta.len()).map(|c| b.weights[(l, c)] * eta[c]).sum();
            }
        }
        out
    }

    /// `Ũ - X̃ beta`.
    pub fn residual(&self, beta: &[f64]) -> Vec<f64> {
        self.predict(beta)
            .iter()
            .zip(&self.u_tilde)
            .map(|(p, u)| u - p)
            .collect()
    }

    /// `X̃^T v` for a length-`R` vector.
    pub fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_rows());
        let mut out = vec![0.0; self.n_coefficients()];
        for b in &self.blocks {
            self.accumulate_block_score(b, &v[b.rows.clone()], &mut out);
        }
        out
    }

    fn accumulate_block_score(&self, b: &SubjectBlock, v: &[f64], out: &mut [f64]) {
        let w = self.n_covariates + 1;
        for (c, &k) in b.taxa.iter().enumerate() {
            let h: f64 = v.iter().enumerate().map(|(l, r)| b.weights[(l, c)] * r).sum();
            for (j, z) in b.design.iter().enumerate() {
                out[k * w + j] += h * z;
            }
        }
    }

    /// Per-subject scores `X̃_i^T r_i` for a residual vector `r`.
    pub fn subject_scores(&self, r: &[f64]) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|b| {
                let mut s = vec![0.0; self.n_coefficients()];
                self.accumulate_block_score(b, &r[b.rows.clone()], &mut s);
                s
            })
            .collect()
    }

    /// Dense `X̃`.
    pub fn x_tilde_dense(&self) -> DMatrix<f64> {
        let w = self.n_covariates + 1;
        let mut m = DMatrix::zeros(self.n_rows(), self.n_coefficients());
        for b in &self.blocks {
            for (l, row) in b.rows.clone().enumerate() {
                for (c, &k) in b.taxa.iter().enumerate() {
                    for (j, &z) in b.design.iter().enumerate() {
                        m[(row, k * w + j)] = b.weights[(l, c)] * z;
                    }
                }
            }
        }
        m
    }
}

/// Stacks the whitened rows of every subject with two or more nonzero taxa.
///
/// Subjects with a single nonzero taxon inform only the discrete part of the
/// model; they are skipped and counted.
pub fn assemble_system(
    samples: &[CompositionSample],
    covariates: &[CovariateRecord],
    working: &WorkingCovariance,
) -> Result<WhitenedSystem> {
    let (n_log_ratios, n_covariates) = check_inputs(samples, covariates)?;
    working.validate(n_log_ratios)?;
    let whitened: Vec<Option<WhitenedSubject>> = samples
        .par_iter()
        .zip(covariates.par_iter())
        .map(|(s, x)| match log_ratio_transform(s) {
            Ok((t, u)) => whiten_subject(&t, x, &u, working).map(Some),
            Err(Error::DegenerateSample) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;

    let mut blocks = Vec::new();
    let mut u_tilde = Vec::new();
    let mut subjects = Vec::new();
    let mut n_skipped = 0;
    for (i, w) in whitened.into_iter().enumerate() {
        let Some(w) = w else {
            n_skipped += 1;
            continue;
        };
        let start = u_tilde.len();
        u_tilde.extend_from_slice(&w.u_tilde);
        blocks.push(SubjectBlock {
            design: w.design,
            taxa: w.taxa,
            weights: w.weights,
            rows: start..u_tilde.len(),
        });
        subjects.push(i);
    }
    if blocks.is_empty() {
        return Err(Error::EmptySystem);
    }
    Ok(WhitenedSystem {
        n_log_ratios,
        n_covariates,
        blocks,
        u_tilde,
        subjects,
        n_skipped,
    })
}

fn check_inputs(
    samples: &[CompositionSample],
    covariates: &[CovariateRecord],
) -> Result<(usize, usize)> {
    if samples.len() != covariates.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} samples but {} covariate records",
            samples.len(),
            covariates.len()
        )));
    }
    let first = samples.first().ok_or(Error::EmptySystem)?;
    let n_taxa = first.n_taxa();
    let q = covariates[0].x.len();
    if n_taxa < 2 {
        return Err(Error::InvalidInput("need at least two taxa".into()));
    }
    if samples.iter().any(|s| s.n_taxa() != n_taxa) {
        return Err(Error::DimensionMismatch("samples disagree on the number of taxa".into()));
    }
    if covariates.iter().any(|c| c.x.len() != q) {
        return Err(Error::DimensionMismatch(
            "covariate records disagree on the number of covariates".into(),
        ));
    }
    Ok((n_taxa - 1, q))
}

/// Ordinary least squares on the whitened system via Householder QR.
pub fn fit_ols(system: &WhitenedSystem) -> Result<CoefficientVector> {
    let m = system.n_coefficients();
    if m > DENSE_LIMIT {
        return Err(Error::InvalidInput(format!(
            "{m} coefficients exceed the dense least-squares limit of {DENSE_LIMIT}; use a penalized fit"
        )));
    }
    if system.n_rows() < m {
        return Err(Error::RankDeficient {
            rank: system.n_rows(),
            columns: m,
        });
    }
    let x = system.x_tilde_dense();
    let qr = x.qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    let rank = r
        .diagonal()
        .iter()
        .filter(|d| d.abs() > 1e-10 * diag_max)
        .count();
    if rank < m || diag_max == 0.0 {
        return Err(Error::RankDeficient { rank, columns: m });
    }
    let mut qtu = DVector::from_column_slice(system.u_tilde());
    qr.q_tr_mul(&mut qtu);
    let rhs = qtu.rows(0, m).into_owned();
    let beta = r
        .solve_upper_triangular(&rhs)
        .ok_or(Error::RankDeficient { rank, columns: m })?;
    CoefficientVector::new(
        beta.as_slice().to_vec(),
        system.n_log_ratios(),
        system.n_covariates(),
    )
}

/// Left-hand side of the estimating equation,
/// `sum_i X̃_i^T (Ũ_i - X̃_i beta)`.
pub fn estimating_equation_residual(system: &WhitenedSystem, beta: &CoefficientVector) -> Vec<f64> {
    system.transpose_mul(&system.residual(beta.as_slice()))
}

/// Sandwich covariance `B^{-1} M B^{-1}` of a least-squares solution, with
/// `B = X̃^T X̃` and `M = sum_i X̃_i^T r_i r_i^T X̃_i`.
pub fn sandwich_covariance(system: &WhitenedSystem, beta: &CoefficientVector) -> Result<DMatrix<f64>> {
    let m = system.n_coefficients();
    if m > DENSE_LIMIT {
        return Err(Error::InvalidInput(format!(
            "{m} coefficients exceed the dense limit of {DENSE_LIMIT}"
        )));
    }
    let x = system.x_tilde_dense();
    let bread = x.tr_mul(&x);
    let chol = linalg::cholesky(&bread)?;
    let r = system.residual(beta.as_slice());
    let mut meat = DMatrix::zeros(m, m);
    for s in system.subject_scores(&r) {
        let s = DVector::from_vec(s);
        meat.ger(1.0, &s, &s, 1.0);
    }
    let half = chol.solve(&meat);
    let v = chol.solve(&half.transpose());
    Ok((&v + v.transpose()) * 0.5)
}

/// Wald intervals `estimate ± z_{(1+level)/2} · se`.
pub fn confidence_intervals(
    estimates: &[f64],
    covariance: &DMatrix<f64>,
    level: f64,
) -> Result<Vec<(f64, f64)>> {
    use statrs::distribution::{ContinuousCDF, Normal};
    if covariance.nrows() != estimates.len() || covariance.ncols() != estimates.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates but a {}x{} covariance",
            estimates.len(),
            covariance.nrows(),
            covariance.ncols()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("confidence level {level} outside (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    estimates
        .iter()
        .enumerate()
        .map(|(m, &b)| {
            let var = covariance[(m, m)];
            if var < 0.0 || !var.is_finite() {
                return Err(Error::InvalidInput(format!("variance {var} of estimate {m}")));
            }
            let half = z * var.sqrt();
            Ok((b - half, b + half))
        })
        .collect()
}

/// Which family of outcome covariances the low-dimensional MLE searches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceStructure {
    Exchangeable,
    Unstructured,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleOptions {
    pub max_iter: usize,
    /// Stop once the profile log-likelihood changes by less than this.
    pub tol: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MleFit {
    pub beta: CoefficientVector,
    pub covariance: WorkingCovariance,
    /// Sandwich covariance of `beta`.
    pub beta_covariance: DMatrix<f64>,
    /// Sandwich covariance of `(sd, rho)` for the exchangeable structure.
    pub param_covariance: Option<DMatrix<f64>>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_subjects_used: usize,
    pub n_subjects_skipped: usize,
}

/// The unwhitened pieces of one regression-eligible subject.
#[derive(Debug, Clone)]
struct SubjectData {
    transform: SubcompositionTransform,
    u_sub: Vec<f64>,
    design: DesignBlock,
}

impl SubjectData {
    fn residual(&self, beta: &CoefficientVector) -> Vec<f64> {
        let mean = self.transform.apply(&self.design.mul(beta));
        self.u_sub.iter().zip(mean).map(|(u, m)| u - m).collect()
    }
}

fn prepare_subjects(
    samples: &[CompositionSample],
    covariates: &[CovariateRecord],
) -> Result<(Vec<SubjectData>, usize, usize)> {
    let (k, _) = check_inputs(samples, covariates)?;
    let mut out = Vec::new();
    let mut skipped = 0;
    for (s, x) in samples.iter().zip(covariates) {
        match log_ratio_transform(s) {
            Ok((transform, u_sub)) => out.push(SubjectData {
                transform,
                u_sub,
                design: build_design_row_block(x, k),
            }),
            Err(Error::DegenerateSample) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptySystem);
    }
    Ok((out, skipped, k))
}

/// Profile objective `l(beta, Sigma) = sum_i [-1/2 log|A_i Sigma A_i^T| - 1/2 r_i^T (A_i Sigma A_i^T)^{-1} r_i]`
/// for arbitrary `Sigma`, with `r_i = u_sub - A_i X_i beta`.
pub fn profile_log_likelihood(
    samples: &[CompositionSample],
    covariates: &[CovariateRecord],
    beta: &CoefficientVector,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let (subjects, _, _) = prepare_subjects(samples, covariates)?;
    let residuals: Vec<_> = subjects.iter().map(|s| s.residual(beta)).collect();
    general_log_likelihood(&subjects, &residuals, sigma)
}

fn general_log_likelihood(
    subjects: &[SubjectData],
    residuals: &[Vec<f64>],
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for (s, r) in subjects.iter().zip(residuals) {
        let cov = s.transform.project_covariance(sigma);
        let chol = linalg::cholesky(&cov)?;
        let l = chol.l_dirty();
        let log_det: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        let z = l
            .solve_lower_triangular(&DVector::from_column_slice(r))
            .ok_or(Error::SingularCovariance)?;
        total += -0.5 * log_det - 0.5 * z.norm_squared();
    }
    Ok(total)
}

/// Sufficient statistics of one subject's residual under an exchangeable
/// `Sigma`: with `a = A 1`, `A Sigma A^T` is `v[(1-rho) A A^T + rho a a^T]`,
/// which is `alpha I + b 1 1^T` in both the reference-present and
/// reference-absent cases.
#[derive(Debug, Clone, Copy)]
struct ExchangeableStats {
    dim: f64,
    sum_sq: f64,
    sum: f64,
    reference_present: bool,
}

impl ExchangeableStats {
    fn new(subject: &SubjectData, r: &[f64]) -> Self {
        Self {
            dim: r.len() as f64,
            sum_sq: r.iter().map(|v| v * v).sum(),
            sum: r.iter().sum(),
            reference_present: subject.transform.reference_present(),
        }
    }

    fn log_likelihood(&self, sd: f64, rho: f64) -> f64 {
        let v = sd * sd;
        let alpha = v * (1.0 - rho);
        let b = if self.reference_present { v * rho } else { alpha };
        let lead = alpha + self.dim * b;
        if alpha <= 0.0 || lead <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let log_det = (self.dim - 1.0) * alpha.ln() + lead.ln();
        let quad = (self.sum_sq - b / lead * self.sum * self.sum) / alpha;
        -0.5 * log_det - 0.5 * quad
    }
}

fn exchangeable_total(stats: &[ExchangeableStats], sd: f64, rho: f64) -> f64 {
    stats.iter().map(|s| s.log_likelihood(sd, rho)).sum()
}

/// Maps the unconstrained pair `(log sd, z)` to `(sd, rho)` with
/// `rho = lower + (1 - lower)(1 + tanh z) / 2`.
#[derive(Debug, Clone, Copy)]
struct ExchangeableMap {
    lower: f64,
}

impl ExchangeableMap {
    fn new(k: usize) -> Self {
        Self {
            lower: if k > 1 { -1.0 / (k as f64 - 1.0) } else { -1.0 },
        }
    }

    fn to_natural(self, theta: &[f64]) -> (f64, f64) {
        let rho = self.lower + (1.0 - self.lower) * 0.5 * (1.0 + theta[1].tanh());
        (theta[0].exp(), rho)
    }

    fn to_unconstrained(self, sd: f64, rho: f64) -> [f64; 2] {
        let t = (2.0 * (rho - self.lower) / (1.0 - self.lower) - 1.0).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
        [sd.ln(), t.atanh()]
    }
}

fn update_exchangeable(stats: &[ExchangeableStats], k: usize, start: (f64, f64)) -> (f64, f64) {
    let map = ExchangeableMap::new(k);
    let fixed_rho = k == 1;
    let objective = |theta: &DVector<f64>| {
        let (sd, rho) = map.to_natural(theta.as_slice());
        let rho = if fixed_rho { 0.0 } else { rho };
        let v = -exchangeable_total(stats, sd, rho);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let gradient = |theta: &DVector<f64>| {
        let mut g = optim::central_gradient(&objective, theta, 1e-6);
        if fixed_rho {
            g[1] = 0.0;
        }
        g
    };
    let x0 = DVector::from_row_slice(&map.to_unconstrained(start.0, start.1));
    let res = optim::minimize_bfgs(&objective, &gradient, x0, 200, 1e-9);
    if !res.converged {
        log::debug!("exchangeable covariance update stopped before convergence");
    }
    let (sd, rho) = map.to_natural(res.x.as_slice());
    (sd, if fixed_rho { 0.0 } else { rho })
}

/// Log-Cholesky parameterization of an SPD matrix: the lower triangle of `L`
/// row by row, with diagonal entries stored as logarithms.
fn log_cholesky_pack(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let l = linalg::cholesky(sigma)?.l();
    let k = l.nrows();
    let mut out = Vec::with_capacity(k * (k + 1) / 2);
    for i in 0..k {
        for j in 0..=i {
            out.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
        }
    }
    Ok(DVector::from_vec(out))
}

fn log_cholesky_unpack(theta: &[f64], k: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(k, k);
    let mut p = 0;
    for i in 0..k {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[p].exp() } else { theta[p] };
            p += 1;
        }
    }
    l
}

/// Gradient of the profile objective with respect to `Sigma`:
/// `1/2 sum_i A_i^T (Omega_i r_i r_i^T Omega_i - Omega_i) A_i`.
fn sigma_gradient(
    subjects: &[SubjectData],
    residuals: &[Vec<f64>],
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = sigma.nrows();
    let mut g = DMatrix::zeros(k, k);
    for (s, r) in subjects.iter().zip(residuals) {
        let cov = s.transform.project_covariance(sigma);
        let chol = linalg::cholesky(&cov)?;
        let omega = chol.inverse();
        let w = &omega * DVector::from_column_slice(r);
        let local = (&w * w.transpose() - &omega) * 0.5;
        // Scatter A^T local A: row l of A is e_{k_l} - [ref absent] e_{k_L}.
        let nz = s.transform.nonzero_indices();
        let d = s.transform.n_rows();
        let absent = !s.transform.reference_present();
        let denom = s.transform.denominator();
        for i in 0..d {
            for j in 0..d {
                let v = local[(i, j)];
                g[(nz[i], nz[j])] += v;
                if absent {
                    g[(denom, nz[j])] -= v;
                    g[(nz[i], denom)] -= v;
                    g[(denom, denom)] += v;
                }
            }
        }
    }
    Ok(g)
}

fn update_unstructured(
    subjects: &[SubjectData],
    residuals: &[Vec<f64>],
    start: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = start.nrows();
    let objective = |theta: &DVector<f64>| {
        let sigma = {
            let l = log_cholesky_unpack(theta.as_slice(), k);
            &l * l.transpose()
        };
        match general_log_likelihood(subjects, residuals, &sigma) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        }
    };
    let gradient = |theta: &DVector<f64>| {
        let l = log_cholesky_unpack(theta.as_slice(), k);
        let sigma = &l * l.transpose();
        let g_sigma = match sigma_gradient(subjects, residuals, &sigma) {
            Ok(g) => g,
            Err(_) => return DVector::zeros(theta.len()),
        };
        let g_l = (&g_sigma + g_sigma.transpose()) * &l;
        let mut out = Vec::with_capacity(theta.len());
        for i in 0..k {
            for j in 0..=i {
                let v = if i == j { g_l[(i, i)] * l[(i, i)] } else { g_l[(i, j)] };
                out.push(-v);
            }
        }
        DVector::from_vec(out)
    };
    let x0 = log_cholesky_pack(start)?;
    let res = optim::minimize_bfgs(&objective, &gradient, x0, 500, 1e-8);
    if !res.converged {
        log::debug!("unstructured covariance update stopped before convergence");
    }
    let l = log_cholesky_unpack(res.x.as_slice(), k);
    Ok(&l * l.transpose())
}

/// Maximum-likelihood fit of `beta` and a structured `Sigma` for data with
/// fewer taxa than subjects.
///
/// Alternates generalized least squares for `beta` given `Sigma` with a
/// numerical maximization of the profile objective over `Sigma` given `beta`.
/// Returns sandwich covariances, which stay valid if the structure is wrong.
pub fn fit_mle_lowdim(
    samples: &[CompositionSample],
    covariates: &[CovariateRecord],
    structure: CovarianceStructure,
    options: MleOptions,
) -> Result<MleFit> {
    let (subjects, n_skipped, k) = prepare_subjects(samples, covariates)?;
    let q = covariates[0].x.len();
    if k >= samples.len() {
        return Err(Error::InvalidInput(format!(
            "the likelihood fit needs fewer log-ratios ({k}) than subjects ({})",
            samples.len()
        )));
    }
    let mut covariance = WorkingCovariance::Identity;
    let mut beta = fit_ols(&assemble_system(samples, covariates, &covariance)?)?;
    let mut exch = (1.0, 0.0);
    let mut sigma = DMatrix::identity(k, k);
    let mut previous = f64::NEG_INFINITY;
    let mut log_likelihood = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iter {
        iterations += 1;
        let residuals: Vec<_> = subjects.iter().map(|s| s.residual(&beta)).collect();
        covariance = match structure {
            CovarianceStructure::Exchangeable => {
                let stats: Vec<_> = subjects
                    .iter()
                    .zip(&residuals)
                    .map(|(s, r)| ExchangeableStats::new(s, r))
                    .collect();
                exch = update_exchangeable(&stats, k, exch);
                WorkingCovariance::Exchangeable {
                    sd: exch.0,
                    rho: exch.1,
                }
            }
            CovarianceStructure::Unstructured => {
                sigma = update_unstructured(&subjects, &residuals, &sigma)?;
                WorkingCovariance::Unstructured(sigma.clone())
            }
        };
        let system = assemble_system(samples, covariates, &covariance)?;
        beta = fit_ols(&system)?;
        let residuals: Vec<_> = subjects.iter().map(|s| s.residual(&beta)).collect();
        log_likelihood = general_log_likelihood(&subjects, &residuals, &covariance.matrix(k))?;
        if (log_likelihood - previous).abs() < options.tol {
            converged = true;
            break;
        }
        previous = log_likelihood;
    }

    let system = assemble_system(samples, covariates, &covariance)?;
    let beta_covariance = sandwich_covariance(&system, &beta)?;
    let param_covariance = match structure {
        CovarianceStructure::Exchangeable if k > 1 => {
            let stats: Vec<_> = subjects
                .iter()
                .map(|s| ExchangeableStats::new(s, &s.residual(&beta)))
                .collect();
            Some(exchangeable_sandwich(&stats, exch)?)
        }
        _ => None,
    };
    debug_assert_eq!(beta.n_covariates(), q);
    Ok(MleFit {
        beta,
        covariance,
        beta_covariance,
        param_covariance,
        log_likelihood,
        iterations,
        converged,
        n_subjects_used: subjects.len(),
        n_subjects_skipped: n_skipped,
    })
}

/// Sandwich covariance of `(sd, rho)`: `H^{-1} (sum_i s_i s_i^T) H^{-1}` with
/// per-subject scores `s_i` and Hessian `H` from central differences.
fn exchangeable_sandwich(stats: &[ExchangeableStats], at: (f64, f64)) -> Result<DMatrix<f64>> {
    let h = [1e-5 * at.0.abs().max(1e-3), 1e-5];
    let score = |s: &ExchangeableStats, sd: f64, rho: f64| {
        [
            (s.log_likelihood(sd + h[0], rho) - s.log_likelihood(sd - h[0], rho)) / (2.0 * h[0]),
            (s.log_likelihood(sd, rho + h[1]) - s.log_likelihood(sd, rho - h[1])) / (2.0 * h[1]),
        ]
    };
    let total_score = |sd: f64, rho: f64| {
        stats.iter().fold([0.0, 0.0], |acc, s| {
            let g = score(s, sd, rho);
            [acc[0] + g[0], acc[1] + g[1]]
        })
    };
    let mut hess = DMatrix::zeros(2, 2);
    for j in 0..2 {
        let (plus, minus) = if j == 0 {
            (total_score(at.0 + h[0], at.1), total_score(at.0 - h[0], at.1))
        } else {
            (total_score(at.0, at.1 + h[1]), total_score(at.0, at.1 - h[1]))
        };
        for i in 0..2 {
            hess[(i, j)] = -(plus[i] - minus[i]) / (2.0 * h[j]);
        }
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    let mut meat = DMatrix::zeros(2, 2);
    for s in stats {
        let g = score(s, at.0, at.1);
        let g = DVector::from_row_slice(&g);
        meat.ger(1.0, &g, &g, 1.0);
    }
    let chol = linalg::cholesky(&hess)?;
    let half = chol.solve(&meat);
    let v = chol.solve(&half.transpose());
    Ok((&v + v.transpose()) * 0.5)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
