//! Data generators, scenario runners and evaluation metrics.
//!
//! Each replicate draws from its own ChaCha8 stream, keyed by the scenario
//! seed and the replicate index, so results do not depend on scheduling.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::{Data, OrderStatistics, RankTieBreaker};

use crate::composition::{masked_softmax, CompositionSample, Direction};
use crate::error::{Error, Result};
use crate::linalg;
use crate::penalized::{
    cross_validate, support_of, CvOptions, PathOptions, Penalty, PenaltySpec,
};
use crate::regression::{
    assemble_system, build_design_row_block, confidence_intervals, fit_mle_lowdim,
    CoefficientVector, CovarianceStructure, CovariateRecord, MleOptions, WorkingCovariance,
};

/// Generator for replicate `replicate` of a scenario seeded with `seed`.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// `rho^|i-j|` correlation matrix.
fn ar1(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32))
}

fn lower_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(linalg::cholesky(m)?.l())
}

fn normal_vector(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn lower_mul(l: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    (0..l.nrows())
        .map(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum())
        .collect()
}

/// `N x Q` covariates with rows drawn from `N(0, C)`, `C_ij = rho_x^|i-j|`.
pub fn gen_covariates(n: usize, q: usize, rho_x: f64, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if !(rho_x.abs() < 1.0) {
        return Err(Error::InvalidInput(format!("covariate_rho must lie in (-1, 1), got {rho_x}")));
    }
    let l = lower_factor(&ar1(q, rho_x))?;
    Ok((0..n).map(|_| lower_mul(&l, &normal_vector(q, rng))).collect())
}

/// A planted coefficient vector and its support.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTruth {
    pub beta: CoefficientVector,
    /// `(log-ratio k, covariate q >= 1, sign)`, sorted.
    pub pairs: Vec<(usize, usize, Direction)>,
}

impl SparseTruth {
    pub fn support(&self) -> BTreeSet<(usize, usize)> {
        self.pairs.iter().map(|&(k, q, _)| (k, q)).collect()
    }
}

/// Plants `n_active` covariates, each affecting `taxa_per_cov` log-ratios,
/// with magnitudes uniform on `[a, b)` and random signs. Intercepts are zero.
pub fn gen_sparse_beta(
    k: usize,
    q: usize,
    n_active: usize,
    taxa_per_cov: usize,
    interval: (f64, f64),
    rng: &mut impl Rng,
) -> Result<SparseTruth> {
    if n_active > q || (n_active > 0 && taxa_per_cov > k) {
        return Err(Error::InvalidInput(format!(
            "cannot plant {n_active} covariates x {taxa_per_cov} taxa with Q = {q}, K = {k}"
        )));
    }
    let (a, b) = interval;
    if !(a >= 0.0 && a < b) {
        return Err(Error::InvalidInput(format!("beta_interval ({a}, {b}) is not valid")));
    }
    let mut beta = CoefficientVector::zeros(k, q);
    let mut pairs = Vec::new();
    let mut covs = sample_indices(rng, q, n_active).into_vec();
    covs.sort_unstable();
    for cov in covs {
        let mut taxa = sample_indices(rng, k, taxa_per_cov).into_vec();
        taxa.sort_unstable();
        for taxon in taxa {
            let magnitude = rng.random_range(a..b);
            let value = if rng.random_bool(0.5) { magnitude } else { -magnitude };
            let i = beta.index(taxon, cov + 1);
            beta.as_mut_slice()[i] = value;
            pairs.push((taxon, cov + 1, Direction::of(value)));
        }
    }
    pairs.sort_by_key(|&(k, q, _)| (k, q));
    Ok(SparseTruth { beta, pairs })
}

/// Shape of the outcome covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStructure {
    /// `sigma^2 rho^|i-j|`.
    Ar1,
    /// `sigma^2 [(1 - rho) I + rho 1 1^T]`.
    Exchangeable,
}

pub fn gen_outcome_covariance(
    k: usize,
    sigma: f64,
    rho: f64,
    structure: OutcomeStructure,
) -> Result<DMatrix<f64>> {
    if !(sigma >= 0.0) || !(rho.abs() < 1.0) {
        return Err(Error::InvalidInput(format!(
            "outcome covariance needs sigma >= 0 and |rho| < 1, got sigma = {sigma}, rho = {rho}"
        )));
    }
    let corr = match structure {
        OutcomeStructure::Ar1 => ar1(k, rho),
        OutcomeStructure::Exchangeable => {
            DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho })
        }
    };
    Ok(corr * (sigma * sigma))
}

/// `sigma = sd(mu) / snr` over every entry of the linear predictors; an
/// infinite SNR gives `sigma = 0`.
pub fn calibrate_sigma(target_snr: f64, mu: &[f64]) -> Result<f64> {
    if !(target_snr > 0.0) {
        return Err(Error::InvalidInput(format!("snr must be positive, got {target_snr}")));
    }
    let n = mu.len() as f64;
    let mean = mu.iter().sum::<f64>() / n;
    let sd = (mu.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::NoSignal);
    }
    Ok(if target_snr.is_infinite() { 0.0 } else { sd / target_snr })
}

/// Independent `Bernoulli(p)` presence; all-absent rows are redrawn. Returns
/// the rows and the number of redraws.
pub fn gen_presence(n: usize, n_taxa: usize, p: f64, rng: &mut impl Rng) -> Result<(Vec<Vec<bool>>, usize)> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("sparsity must lie in (0, 1], got {p}")));
    }
    let mut redraws = 0;
    let rows = (0..n)
        .map(|_| loop {
            let row: Vec<bool> = (0..n_taxa).map(|_| rng.random_bool(p)).collect();
            if row.iter().any(|&z| z) {
                break row;
            }
            redraws += 1;
        })
        .collect();
    Ok((rows, redraws))
}

/// `U = mu + (1 - gamma) eps + gamma sigma (delta - 1)` with `eps = L z` and
/// `delta` i.i.d. chi-square(1). For `gamma = 0` no chi-square draws are made,
/// so the stream matches [`gen_mziln_sample`].
pub fn gen_misspecified_u(
    mu: &[f64],
    sigma_chol: &DMatrix<f64>,
    gamma: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let eps = lower_mul(sigma_chol, &normal_vector(mu.len(), rng));
    if gamma == 0.0 {
        return mu.iter().zip(&eps).map(|(m, e)| m + e).collect();
    }
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    mu.iter()
        .zip(&eps)
        .map(|(m, e)| {
            let delta: f64 = chi.sample(rng);
            m + (1.0 - gamma) * e + gamma * sigma * (delta - 1.0)
        })
        .collect()
}

/// Latent log-ratios `U ~ N(mu, L L^T)`, closed to the simplex over the
/// present taxa.
pub fn gen_mziln_sample(
    mu: &[f64],
    sigma_chol: &DMatrix<f64>,
    presence: &[bool],
    rng: &mut impl Rng,
) -> Result<CompositionSample> {
    let u = gen_misspecified_u(mu, sigma_chol, 0.0, 0.0, rng);
    close_with_presence(&u, presence)
}

fn close_with_presence(u: &[f64], presence: &[bool]) -> Result<CompositionSample> {
    if presence.len() != u.len() + 1 || !presence.iter().any(|&z| z) {
        return Err(Error::InvalidInput("presence row must cover K + 1 taxa with at least one present".into()));
    }
    CompositionSample::new(masked_softmax(u, presence))
}

/// Recall, precision and F1 over `(taxon, covariate)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelectionMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// With an empty truth set recall is 1; with an empty selection precision is
/// 0 unless the truth is empty too.
pub fn selection_metrics(
    selected: &BTreeSet<(usize, usize)>,
    truth: &BTreeSet<(usize, usize)>,
) -> SelectionMetrics {
    let tp = selected.intersection(truth).count();
    let fp = selected.len() - tp;
    let fn_ = truth.len() - tp;
    let recall = if truth.is_empty() { 1.0 } else { tp as f64 / truth.len() as f64 };
    let precision = if selected.is_empty() {
        if truth.is_empty() { 1.0 } else { 0.0 }
    } else {
        tp as f64 / selected.len() as f64
    };
    let f1 = if recall > 0.0 && precision > 0.0 {
        2.0 * recall * precision / (recall + precision)
    } else {
        0.0
    };
    SelectionMetrics { tp, fp, fn_, recall, precision, f1 }
}

/// Benjamini-Hochberg step-up rule: rejects the `k` smallest p-values for
/// the largest `k` with `p_(k) <= k q / m`.
pub fn benjamini_hochberg(p_values: &[f64], q: f64) -> Vec<bool> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let cutoff = (1..=m)
        .rev()
        .find(|&k| p_values[order[k - 1]] <= k as f64 * q / m as f64)
        .unwrap_or(0);
    let mut reject = vec![false; m];
    for &i in &order[..cutoff] {
        reject[i] = true;
    }
    reject
}

/// Spearman correlation with average ranks for ties, or `None` when either
/// input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let ra = Data::new(a.to_vec()).ranks(RankTieBreaker::Average);
    let rb = Data::new(b.to_vec()).ranks(RankTieBreaker::Average);
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value of a Spearman correlation by the t approximation.
pub fn spearman_p_value(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = n as f64 - 2.0;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("n >= 3");
    2.0 * dist.sf(t.abs())
}

/// One Spearman test of a taxon against a covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpearmanTest {
    /// Taxon column, 0-based over all `K + 1` taxa.
    pub taxon: usize,
    /// Covariate, 1-based.
    pub covariate: usize,
    pub rho: f64,
    pub p_value: f64,
    pub selected: bool,
    pub direction: Direction,
}

/// Tests every taxon-covariate pair by Spearman correlation (zeros kept) and
/// selects by Benjamini-Hochberg at level `fdr_q`. Constant columns are
/// skipped.
pub fn spearman_baseline(
    samples: &[CompositionSample],
    covariates: &[CovariateRecord],
    fdr_q: f64,
) -> Result<Vec<SpearmanTest>> {
    let n = samples.len();
    if n < 10 || covariates.len() != n {
        return Err(Error::InvalidInput(format!(
            "the Spearman baseline needs at least 10 subjects with covariates, got {n}"
        )));
    }
    let n_taxa = samples[0].n_taxa();
    let q = covariates[0].x.len();
    let mut tests = Vec::new();
    let mut skipped = 0;
    for taxon in 0..n_taxa {
        let y: Vec<f64> = samples.iter().map(|s| s.values()[taxon]).collect();
        for cov in 0..q {
            let x: Vec<f64> = covariates.iter().map(|c| c.x[cov]).collect();
            match spearman(&y, &x) {
                Some(rho) => tests.push(SpearmanTest {
                    taxon,
                    covariate: cov + 1,
                    rho,
                    p_value: spearman_p_value(rho, n),
                    selected: false,
                    direction: Direction::of(rho),
                }),
                None => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} Spearman tests with a constant column");
    }
    let p: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
    for (t, keep) in tests.iter_mut().zip(benjamini_hochberg(&p, fdr_q)) {
        t.selected = keep;
    }
    Ok(tests)
}

/// Low- or high-dimensional experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioMode {
    LowDim,
    HighDim,
}

/// Every parameter of one simulation scenario.
///
/// Defaults describe the desk-scale high-dimensional setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mode: ScenarioMode,
    pub n_subjects: usize,
    /// `K + 1`.
    pub n_taxa: usize,
    pub n_covariates: usize,
    pub covariate_rho: f64,
    pub outcome_rho: f64,
    pub outcome_structure: OutcomeStructure,
    /// Outcome standard deviation for low-dimensional runs.
    pub outcome_sd: f64,
    /// Target signal-to-noise ratio; `inf` removes the noise.
    #[serde(with = "extended_float")]
    pub snr: f64,
    /// Probability that a taxon is present.
    pub sparsity: f64,
    pub n_active_covariates: usize,
    pub taxa_per_active_covariate: usize,
    pub beta_interval: (f64, f64),
    pub misspec_gamma: f64,
    /// 1-based taxon used as reference in the fit; the last taxon if unset.
    pub reference_taxon: Option<usize>,
    pub n_replicates: usize,
    pub seed: u64,
    /// Low-dimensional intercepts.
    pub intercept: f64,
    /// Low-dimensional covariate effects.
    pub slope: f64,
    pub penalty: String,
    pub penalty_gamma: Option<f64>,
    pub enet_alpha: Option<f64>,
    pub folds: usize,
    pub lambda_grid_size: usize,
    pub run_spearman: bool,
    pub fdr_q: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: ScenarioMode::HighDim,
            n_subjects: 100,
            n_taxa: 50,
            n_covariates: 10,
            covariate_rho: 0.5,
            outcome_rho: 0.5,
            outcome_structure: OutcomeStructure::Ar1,
            outcome_sd: 1.0,
            snr: 4.5,
            sparsity: 0.54,
            n_active_covariates: 3,
            taxa_per_active_covariate: 5,
            beta_interval: (1.0, 3.0),
            misspec_gamma: 0.0,
            reference_taxon: None,
            n_replicates: 20,
            seed: 1,
            intercept: -0.1,
            slope: 0.8,
            penalty: "mcp".into(),
            penalty_gamma: None,
            enet_alpha: None,
            folds: 10,
            lambda_grid_size: 100,
            run_spearman: false,
            fdr_q: 0.05,
        }
    }
}

mod extended_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "+inf" => Ok(f64::INFINITY),
                other => other
                    .parse()
                    .map_err(|_| de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
            },
        }
    }
}

impl ScenarioConfig {
    /// The low-dimensional exchangeable setting with `N = 1000` and 20 taxa.
    pub fn table1() -> Self {
        Self {
            mode: ScenarioMode::LowDim,
            n_subjects: 1000,
            n_taxa: 20,
            n_covariates: 1,
            n_active_covariates: 0,
            outcome_rho: 0.3,
            outcome_structure: OutcomeStructure::Exchangeable,
            outcome_sd: 1.0,
            sparsity: 0.5,
            n_replicates: 100,
            ..Self::default()
        }
    }

    /// `N = 100`, `K + 1 = 50`, `Q = 10`, 3 active covariates x 5 taxa.
    pub fn desk_highdim() -> Self {
        Self::default()
    }

    /// `N = 300`, `K + 1 = 400`, `Q = 40`, 4 active covariates x 9 taxa.
    /// Slow.
    pub fn full_scale_highdim() -> Self {
        Self {
            n_subjects: 300,
            n_taxa: 400,
            n_covariates: 40,
            n_active_covariates: 4,
            taxa_per_active_covariate: 9,
            n_replicates: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = |field: &str, msg: String| field_error(field, msg);
        if self.n_replicates == 0 {
            return Err(f("n_replicates", "must be at least 1".to_string()));
        }
        if self.n_taxa < 2 {
            return Err(f("n_taxa", "must be at least 2".to_string()));
        }
        if self.n_subjects < 2 {
            return Err(f("n_subjects", "must be at least 2".to_string()));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(f("sparsity", format!("{} is not in (0, 1]", self.sparsity)));
        }
        if !(self.covariate_rho.abs() < 1.0) {
            return Err(f("covariate_rho", format!("{} is not in (-1, 1)", self.covariate_rho)));
        }
        let k = self.n_taxa - 1;
        let rho_lower = match self.outcome_structure {
            OutcomeStructure::Exchangeable if k > 1 => -1.0 / (k as f64 - 1.0),
            _ => -1.0,
        };
        if !(self.outcome_rho > rho_lower && self.outcome_rho < 1.0) {
            return Err(f("outcome_rho", format!("{} is not in ({rho_lower}, 1)", self.outcome_rho)));
        }
        if !(self.outcome_sd > 0.0 && self.outcome_sd.is_finite()) {
            return Err(f("outcome_sd", "must be positive and finite".to_string()));
        }
        if !(self.snr > 0.0) {
            return Err(f("snr", "must be positive or inf".to_string()));
        }
        if !(self.misspec_gamma >= 0.0 && self.misspec_gamma <= 1.0) {
            return Err(f("misspec_gamma", format!("{} is not in [0, 1]", self.misspec_gamma)));
        }
        let (a, b) = self.beta_interval;
        if !(a >= 1.0 && a < b && b.is_finite()) {
            return Err(f("beta_interval", format!("({a}, {b}) must satisfy 1 <= a < b")));
        }
        if self.n_active_covariates > self.n_covariates {
            return Err(f("n_active_covariates", "exceeds n_covariates".to_string()));
        }
        if self.n_active_covariates > 0 && self.taxa_per_active_covariate > k {
            return Err(f("taxa_per_active_covariate", "exceeds the number of log-ratios".to_string()));
        }
        if let Some(r) = self.reference_taxon {
            if r == 0 || r > self.n_taxa {
                return Err(f("reference_taxon", format!("{r} is not in 1..={}", self.n_taxa)));
            }
        }
        self.penalty_family()?;
        if self.folds < 2 || self.folds > self.n_subjects {
            return Err(f("folds", format!("{} folds for {} subjects", self.folds, self.n_subjects)));
        }
        if self.lambda_grid_size == 0 {
            return Err(f("lambda_grid_size", "must be at least 1".to_string()));
        }
        if !(self.fdr_q > 0.0 && self.fdr_q < 1.0) {
            return Err(f("fdr_q", format!("{} is not in (0, 1)", self.fdr_q)));
        }
        if self.mode == ScenarioMode::LowDim && k >= self.n_subjects {
            return Err(f("n_taxa", "low-dimensional mode needs fewer log-ratios than subjects".to_string()));
        }
        Ok(())
    }

    pub fn penalty_family(&self) -> Result<Penalty> {
        let p = parse_penalty(&self.penalty, self.penalty_gamma, self.enet_alpha)
            .map_err(|e| field_error("penalty", e))?;
        p.validate().map_err(|e| field_error("penalty_gamma", e.to_string()))?;
        Ok(p)
    }
}

fn field_error(field: &str, msg: impl Into<String>) -> Error {
    let msg = msg.into();
    Error::InvalidInput(format!("{field}: {msg}"))
}

/// Parses `lasso | alasso | enet | scad | mcp` with optional shape overrides.
pub fn parse_penalty(name: &str, gamma: Option<f64>, alpha: Option<f64>) -> std::result::Result<Penalty, String> {
    Ok(match name {
        "lasso" => Penalty::Lasso,
        "alasso" | "adaptive_lasso" => Penalty::AdaptiveLasso,
        "enet" | "elastic_net" => Penalty::ElasticNet {
            alpha: alpha.unwrap_or(Penalty::DEFAULT_ENET_ALPHA),
        },
        "scad" => Penalty::Scad {
            gamma: gamma.unwrap_or(Penalty::DEFAULT_SCAD_GAMMA),
        },
        "mcp" => Penalty::Mcp {
            gamma: gamma.unwrap_or(Penalty::DEFAULT_MCP_GAMMA),
        },
        other => return Err(format!("unknown penalty {other:?}")),
    })
}

/// One generated dataset with the coefficients in the fitted
/// parameterization.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub samples: Vec<CompositionSample>,
    pub covariates: Vec<CovariateRecord>,
    pub truth: SparseTruth,
    pub sigma: f64,
    pub presence_redraws: usize,
}

/// Generates replicate `replicate` of a high-dimensional scenario.
///
/// With `reference_taxon = r`, taxa are reordered so `r` comes last and the
/// truth becomes `beta'_k = beta_k - beta_r`, with `-beta_r` for the former
/// reference.
pub fn generate_highdim(config: &ScenarioConfig, replicate: u64) -> Result<(SimulatedDataset, ChaCha8Rng)> {
    let mut rng = replicate_rng(config.seed, replicate);
    let n = config.n_subjects;
    let k = config.n_taxa - 1;
    let q = config.n_covariates;
    let x = gen_covariates(n, q, config.covariate_rho, &mut rng)?;
    let truth = gen_sparse_beta(
        k,
        q,
        config.n_active_covariates,
        config.taxa_per_active_covariate,
        config.beta_interval,
        &mut rng,
    )?;
    let covariates: Vec<CovariateRecord> = x.into_iter().map(CovariateRecord::from_values).collect();
    let mu: Vec<Vec<f64>> = covariates
        .iter()
        .map(|c| build_design_row_block(c, k).mul(&truth.beta))
        .collect();
    let flat: Vec<f64> = mu.iter().flatten().copied().collect();
    let sigma = calibrate_sigma(config.snr, &flat)?;
    let corr = gen_outcome_covariance(k, 1.0, config.outcome_rho, config.outcome_structure)?;
    let chol = lower_factor(&corr)? * sigma;
    let (presence, presence_redraws) = gen_presence(n, k + 1, config.sparsity, &mut rng)?;
    let mut samples = Vec::with_capacity(n);
    for (m, z) in mu.iter().zip(&presence) {
        let u = gen_misspecified_u(m, &chol, config.misspec_gamma, sigma, &mut rng);
        samples.push(close_with_presence(&u, z)?);
    }
    let mut data = SimulatedDataset {
        samples,
        covariates,
        truth,
        sigma,
        presence_redraws,
    };
    if let Some(r) = config.reference_taxon {
        data = rereference(data, r - 1)?;
    }
    Ok((data, rng))
}

/// Moves taxon `r` (0-based) to the last position and re-expresses the
/// coefficients against it.
fn rereference(data: SimulatedDataset, r: usize) -> Result<SimulatedDataset> {
    let n_taxa = data.samples[0].n_taxa();
    if r + 1 == n_taxa {
        return Ok(data);
    }
    let order: Vec<usize> = (0..n_taxa).filter(|&t| t != r).chain([r]).collect();
    let samples = data
        .samples
        .iter()
        .map(|s| CompositionSample::new(order.iter().map(|&t| s.values()[t]).collect()))
        .collect::<Result<Vec<_>>>()?;
    let old = &data.truth.beta;
    let (k, q) = (old.n_log_ratios(), old.n_covariates());
    let coef = |t: usize, j: usize| if t == k { 0.0 } else { old.get(t, j) };
    let mut beta = CoefficientVector::zeros(k, q);
    for (new_k, &t) in order[..k].iter().enumerate() {
        for j in 0..=q {
            let i = beta.index(new_k, j);
            beta.as_mut_slice()[i] = coef(t, j) - coef(r, j);
        }
    }
    let pairs = support_of(&beta, 0.0)
        .into_iter()
        .map(|p| (p.taxon, p.covariate, p.direction))
        .collect();
    Ok(SimulatedDataset {
        samples,
        truth: SparseTruth { beta, pairs },
        ..data
    })
}

/// Outcome of one high-dimensional replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateOutcome {
    pub replicate: u64,
    pub sigma: f64,
    pub lambda_selected: Option<f64>,
    pub n_selected: usize,
    pub mziln: Option<SelectionMetrics>,
    pub spearman: Option<SelectionMetrics>,
    pub error: Option<String>,
}

/// Mean and standard deviation of each metric across replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub n: usize,
    pub recall_mean: f64,
    pub recall_sd: f64,
    pub precision_mean: f64,
    pub precision_sd: f64,
    pub f1_mean: f64,
    pub f1_sd: f64,
}

impl MetricSummary {
    pub fn from_metrics(metrics: &[SelectionMetrics]) -> Self {
        let stat = |f: &dyn Fn(&SelectionMetrics) -> f64| {
            let n = metrics.len() as f64;
            let mean = metrics.iter().map(f).sum::<f64>() / n;
            let sd = if metrics.len() > 1 {
                (metrics.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (mean, sd)
        };
        let (recall_mean, recall_sd) = stat(&|m| m.recall);
        let (precision_mean, precision_sd) = stat(&|m| m.precision);
        let (f1_mean, f1_sd) = stat(&|m| m.f1);
        Self {
            n: metrics.len(),
            recall_mean,
            recall_sd,
            precision_mean,
            precision_sd,
            f1_mean,
            f1_sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HighDimReport {
    pub replicates: Vec<ReplicateOutcome>,
    pub mziln: MetricSummary,
    pub spearman: Option<MetricSummary>,
    pub n_failed: usize,
}

fn run_highdim_replicate(config: &ScenarioConfig, replicate: u64) -> Result<ReplicateOutcome> {
    let (data, mut rng) = generate_highdim(config, replicate)?;
    let cv_seed: u64 = rng.random();
    let truth = data.truth.support();
    let system = assemble_system(&data.samples, &data.covariates, &WorkingCovariance::Identity)?;
    let spec = PenaltySpec::new(config.penalty_family()?);
    let opts = PathOptions {
        n_lambdas: config.lambda_grid_size,
        ..PathOptions::default()
    };
    let cv = CvOptions {
        folds: config.folds,
        seed: cv_seed,
        one_se: false,
    };
    let path = cross_validate(&system, &spec, &opts, &cv)?;
    let beta = path.selected_coefficients().expect("cross-validation selects a lambda");
    let selected: BTreeSet<(usize, usize)> = support_of(beta, 0.0)
        .iter()
        .map(|p| (p.taxon, p.covariate))
        .collect();
    let spearman = if config.run_spearman {
        let tests = spearman_baseline(&data.samples, &data.covariates, config.fdr_q)?;
        let picked: BTreeSet<(usize, usize)> = tests
            .iter()
            .filter(|t| t.selected)
            .map(|t| (t.taxon, t.covariate))
            .collect();
        Some(selection_metrics(&picked, &truth))
    } else {
        None
    };
    Ok(ReplicateOutcome {
        replicate,
        sigma: data.sigma,
        lambda_selected: path.lambda_selected,
        n_selected: selected.len(),
        mziln: Some(selection_metrics(&selected, &truth)),
        spearman,
        error: None,
    })
}

/// Runs every replicate of a high-dimensional scenario. Replicates that fail
/// are kept in the report with their error and left out of the summaries.
pub fn run_highdim_scenario(config: &ScenarioConfig) -> Result<HighDimReport> {
    config.validate()?;
    let replicates: Vec<ReplicateOutcome> = (0..config.n_replicates as u64)
        .into_par_iter()
        .map(|r| {
            run_highdim_replicate(config, r).unwrap_or_else(|e| ReplicateOutcome {
                replicate: r,
                sigma: f64::NAN,
                lambda_selected: None,
                n_selected: 0,
                mziln: None,
                spearman: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    let ok: Vec<SelectionMetrics> = replicates.iter().filter_map(|r| r.mziln).collect();
    let sp: Vec<SelectionMetrics> = replicates.iter().filter_map(|r| r.spearman).collect();
    let n_failed = replicates.len() - ok.len();
    if ok.is_empty() {
        return Err(Error::InvalidInput(format!(
            "every replicate failed; first error: {}",
            replicates[0].error.as_deref().unwrap_or("unknown")
        )));
    }
    Ok(HighDimReport {
        mziln: MetricSummary::from_metrics(&ok),
        spearman: (!sp.is_empty()).then(|| MetricSummary::from_metrics(&sp)),
        replicates,
        n_failed,
    })
}

/// Generates replicate `replicate` of a low-dimensional scenario: one
/// standard-normal covariate, common intercept and slope, exchangeable
/// outcome covariance.
pub fn generate_lowdim(config: &ScenarioConfig, replicate: u64) -> Result<SimulatedDataset> {
    let mut rng = replicate_rng(config.seed, replicate);
    let n = config.n_subjects;
    let k = config.n_taxa - 1;
    let q = config.n_covariates;
    let x = gen_covariates(n, q, config.covariate_rho, &mut rng)?;
    let beta = CoefficientVector::new(
        (0..k)
            .flat_map(|_| std::iter::once(config.intercept).chain(std::iter::repeat_n(config.slope, q)))
            .collect(),
        k,
        q,
    )?;
    let cov = gen_outcome_covariance(k, config.outcome_sd, config.outcome_rho, config.outcome_structure)?;
    let chol = lower_factor(&cov)?;
    let (presence, presence_redraws) = gen_presence(n, k + 1, config.sparsity, &mut rng)?;
    let covariates: Vec<CovariateRecord> = x.into_iter().map(CovariateRecord::from_values).collect();
    let samples = covariates
        .iter()
        .zip(&presence)
        .map(|(c, z)| gen_mziln_sample(&build_design_row_block(c, k).mul(&beta), &chol, z, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let pairs = support_of(&beta, 0.0)
        .into_iter()
        .map(|p| (p.taxon, p.covariate, p.direction))
        .collect();
    Ok(SimulatedDataset {
        samples,
        covariates,
        truth: SparseTruth { beta, pairs },
        sigma: config.outcome_sd,
        presence_redraws,
    })
}

/// One row of the low-dimensional summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Row {
    pub parameter: String,
    pub true_value: f64,
    /// Mean over parameters of the mean bias across replicates.
    pub ave_bias: f64,
    /// Mean over parameters of `|mean bias| / |true| x 100`.
    pub ave_percent_bias: f64,
    /// Mean over parameters of the 95% interval coverage, in percent.
    pub ave_cp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowDimReport {
    pub rows: Vec<Table1Row>,
    pub n_replicates: usize,
    pub n_failed: usize,
    pub n_not_converged: usize,
    pub failures: Vec<(u64, String)>,
}

/// Per-replicate estimates and coverage indicators, grouped by table row.
struct LowDimReplicate {
    estimates: Vec<Vec<f64>>,
    covered: Vec<Vec<bool>>,
    converged: bool,
}

fn run_lowdim_replicate(config: &ScenarioConfig, replicate: u64) -> Result<LowDimReplicate> {
    let data = generate_lowdim(config, replicate)?;
    let fit = fit_mle_lowdim(
        &data.samples,
        &data.covariates,
        CovarianceStructure::Exchangeable,
        MleOptions::default(),
    )?;
    let beta = fit.beta.as_slice();
    let ci = confidence_intervals(beta, &fit.beta_covariance, 0.95)?;
    let q = config.n_covariates;
    let mut estimates = Vec::new();
    let mut covered = Vec::new();
    for j in 0..=q {
        let truth = if j == 0 { config.intercept } else { config.slope };
        let idx: Vec<usize> = (0..fit.beta.n_log_ratios()).map(|k| fit.beta.index(k, j)).collect();
        estimates.push(idx.iter().map(|&i| beta[i]).collect());
        covered.push(idx.iter().map(|&i| ci[i].0 <= truth && truth <= ci[i].1).collect());
    }
    let WorkingCovariance::Exchangeable { sd, rho } = fit.covariance else {
        unreachable!("exchangeable fit returns an exchangeable covariance")
    };
    let param_cov = fit
        .param_covariance
        .ok_or_else(|| Error::InvalidInput("no covariance for (sd, rho)".into()))?;
    let param_ci = confidence_intervals(&[sd, rho], &param_cov, 0.95)?;
    for (i, (est, truth)) in [(sd, config.outcome_sd), (rho, config.outcome_rho)].into_iter().enumerate() {
        estimates.push(vec![est]);
        covered.push(vec![param_ci[i].0 <= truth && truth <= param_ci[i].1]);
    }
    Ok(LowDimReplicate {
        estimates,
        covered,
        converged: fit.converged,
    })
}

/// Runs a low-dimensional scenario and summarizes bias and coverage for the
/// intercepts, each covariate's effects, the outcome SD and `rho`.
pub fn run_lowdim_scenario(config: &ScenarioConfig) -> Result<LowDimReport> {
    config.validate()?;
    if config.outcome_structure != OutcomeStructure::Exchangeable {
        return Err(Error::InvalidInput(
            "outcome_structure: low-dimensional runs use the exchangeable structure".into(),
        ));
    }
    let results: Vec<(u64, Result<LowDimReplicate>)> = (0..config.n_replicates as u64)
        .into_par_iter()
        .map(|r| (r, run_lowdim_replicate(config, r)))
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results {
        match res {
            Ok(v) => ok.push(v),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if ok.is_empty() {
        return Err(Error::InvalidInput(format!("every replicate failed: {:?}", failures.first())));
    }
    let q = config.n_covariates;
    let mut labels: Vec<(String, f64)> = (0..=q)
        .map(|j| {
            let truth = if j == 0 { config.intercept } else { config.slope };
            (format!("beta_{j}0"), truth)
        })
        .collect();
    labels.push(("SD".into(), config.outcome_sd));
    labels.push(("rho".into(), config.outcome_rho));
    let n = ok.len() as f64;
    let rows = labels
        .into_iter()
        .enumerate()
        .map(|(g, (parameter, true_value))| {
            let width = ok[0].estimates[g].len();
            let mut bias = 0.0;
            let mut percent = 0.0;
            let mut cp = 0.0;
            for j in 0..width {
                let mean = ok.iter().map(|r| r.estimates[g][j]).sum::<f64>() / n;
                let b = mean - true_value;
                bias += b;
                percent += (b / true_value).abs() * 100.0;
                cp += ok.iter().filter(|r| r.covered[g][j]).count() as f64 / n * 100.0;
            }
            let w = width as f64;
            Table1Row {
                parameter,
                true_value,
                ave_bias: bias / w,
                ave_percent_bias: percent / w,
                ave_cp: cp / w,
            }
        })
        .collect();
    Ok(LowDimReport {
        rows,
        n_replicates: config.n_replicates,
        n_failed: failures.len(),
        n_not_converged: ok.iter().filter(|r| !r.converged).count(),
        failures,
    })
}
