//! Simplex data, log-ratio algebra and the zero-inflated logistic-normal law.
//!
//! A composition over `K + 1` taxa is stored with its last taxon acting as the
//! reference: the log-ratio vector of an all-positive composition is
//! `u_k = log(y_k / y_{K+1})` for `k = 1..K`. Zeros are never imputed. A sample
//! with zeros only carries information about the subcomposition of its nonzero
//! taxa, whose log-ratios (relative to the last nonzero taxon) are the linear
//! image `A u` of the full log-ratio vector.
//!
//! All indices in this module are 0-based.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on `sum(values) == 1` accepted by [`CompositionSample::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// An observed relative-abundance vector together with its presence pattern.
///
/// `presence[k]` is always exactly `values[k] > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionSample {
    values: Vec<f64>,
    presence: Vec<bool>,
}

impl CompositionSample {
    /// Validates a relative-abundance vector. Entries must be finite and
    /// nonnegative, sum to one within [`SUM_TOLERANCE`], and at least one must be
    /// positive.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_entries(&values)?;
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "relative abundances sum to {sum}, not 1"
            )));
        }
        Ok(Self::from_checked(values))
    }

    /// Builds a sample from raw nonnegative weights (counts, or abundances that
    /// drifted off the simplex) by dividing through by their total.
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        check_entries(&raw)?;
        let sum: f64 = raw.iter().sum();
        let values = raw.into_iter().map(|v| v / sum).collect();
        Ok(Self::from_checked(values))
    }

    fn from_checked(values: Vec<f64>) -> Self {
        let presence = values.iter().map(|&v| v > 0.0).collect();
        Self { values, presence }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    /// Number of taxa, `K + 1`.
    pub fn n_taxa(&self) -> usize {
        self.values.len()
    }

    /// Number of nonzero taxa, `L`.
    pub fn n_present(&self) -> usize {
        self.presence.iter().filter(|&&p| p).count()
    }

    /// Ascending indices of the nonzero taxa.
    pub fn nonzero_indices(&self) -> Vec<usize> {
        present_indices(&self.presence)
    }
}

fn check_entries(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidInput("composition has no taxa".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidInput(format!(
            "relative abundance {v} is negative or not finite"
        )));
    }
    if !values.iter().any(|&v| v > 0.0) {
        return Err(Error::InvalidInput("composition has no nonzero taxon".into()));
    }
    Ok(())
}

pub(crate) fn present_indices(presence: &[bool]) -> Vec<usize> {
    presence
        .iter()
        .enumerate()
        .filter_map(|(k, &p)| p.then_some(k))
        .collect()
}

/// The linear map from the full log-ratio vector `u` (length `K`) to the
/// log-ratios of the subcomposition formed by a sample's nonzero taxa.
///
/// Row `l` of `A` has `+1` in column `k_l`; when the last nonzero taxon `k_L`
/// is not the reference, every row also has `-1` in column `k_L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubcompositionTransform {
    n_taxa: usize,
    nonzero: Vec<usize>,
}

impl SubcompositionTransform {
    /// Builds the transform for the given ascending nonzero index set over
    /// `n_taxa = K + 1` taxa.
    pub fn new(n_taxa: usize, nonzero: Vec<usize>) -> Result<Self> {
        if nonzero.len() < 2 {
            return Err(Error::DegenerateSample);
        }
        if nonzero.windows(2).any(|w| w[0] >= w[1]) || *nonzero.last().unwrap() >= n_taxa {
            return Err(Error::InvalidInput(format!(
                "nonzero indices {nonzero:?} must be strictly increasing and below {n_taxa}"
            )));
        }
        Ok(Self { n_taxa, nonzero })
    }

    /// Number of taxa, `K + 1`.
    pub fn n_taxa(&self) -> usize {
        self.n_taxa
    }

    /// Length of the full log-ratio vector, `K`.
    pub fn dim(&self) -> usize {
        self.n_taxa - 1
    }

    pub fn nonzero_indices(&self) -> &[usize] {
        &self.nonzero
    }

    /// Index of the reference taxon (always the last one).
    pub fn reference_index(&self) -> usize {
        self.n_taxa - 1
    }

    /// Number of nonzero taxa, `L`.
    pub fn n_present(&self) -> usize {
        self.nonzero.len()
    }

    /// Number of subcomposition log-ratios, `L - 1`.
    pub fn n_rows(&self) -> usize {
        self.nonzero.len() - 1
    }

    /// The denominator taxon `k_L` of the subcomposition.
    pub fn denominator(&self) -> usize {
        *self.nonzero.last().unwrap()
    }

    pub fn reference_present(&self) -> bool {
        self.denominator() == self.reference_index()
    }

    /// Columns of `A` that carry a nonzero entry: `k_1..k_{L-1}`, plus `k_L` when
    /// it is not the reference.
    pub fn active_columns(&self) -> &[usize] {
        if self.reference_present() {
            &self.nonzero[..self.nonzero.len() - 1]
        } else {
            &self.nonzero
        }
    }

    /// Dense `(L - 1) x K` matrix `A`.
    pub fn matrix_a(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_rows(), self.dim());
        let denom = self.denominator();
        for (l, &k) in self.nonzero[..self.n_rows()].iter().enumerate() {
            a[(l, k)] = 1.0;
            if !self.reference_present() {
                a[(l, denom)] = -1.0;
            }
        }
        a
    }

    /// Computes `A v` for a length-`K` vector without forming `A`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim(), "vector length must equal K");
        let offset = if self.reference_present() {
            0.0
        } else {
            v[self.denominator()]
        };
        self.nonzero[..self.n_rows()]
            .iter()
            .map(|&k| v[k] - offset)
            .collect()
    }

    /// Computes `A S A^T` for a `K x K` matrix `S` without forming `A`.
    pub fn project_covariance(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let rows = &self.nonzero[..self.n_rows()];
        let d = rows.len();
        let mut out = DMatrix::from_fn(d, d, |i, j| s[(rows[i], rows[j])]);
        if !self.reference_present() {
            let m = self.denominator();
            for i in 0..d {
                for j in 0..d {
                    out[(i, j)] += s[(m, m)] - s[(rows[i], m)] - s[(m, rows[j])];
                }
            }
        }
        out
    }
}

/// Log-ratios of the nonzero subcomposition of `sample`.
///
/// Returns the transform and `u_sub[l] = log(y_{k_l} / y_{k_L})`. Samples with a
/// single nonzero taxon only inform the discrete part of the model and yield
/// [`Error::DegenerateSample`].
pub fn log_ratio_transform(
    sample: &CompositionSample,
) -> Result<(SubcompositionTransform, Vec<f64>)> {
    let transform =
        SubcompositionTransform::new(sample.n_taxa(), sample.nonzero_indices())?;
    let values = sample.values();
    let denom = values[transform.denominator()].ln();
    let u = transform.nonzero[..transform.n_rows()]
        .iter()
        .map(|&k| values[k].ln() - denom)
        .collect();
    Ok((transform, u))
}

/// Maps a full log-ratio vector back to the simplex (all taxa present).
pub fn inverse_log_ratio(u: &[f64]) -> Result<CompositionSample> {
    if let Some(v) = u.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("log-ratio {v} is not finite")));
    }
    let mask = vec![true; u.len() + 1];
    Ok(CompositionSample::from_checked(masked_softmax(u, &mask)))
}

/// `y_k ∝ exp(u_k) z_k` with `u_{K+1} = 0`, normalized over the taxa kept by
/// `mask`. Absent taxa get exactly zero.
pub(crate) fn masked_softmax(u: &[f64], mask: &[bool]) -> Vec<f64> {
    debug_assert_eq!(mask.len(), u.len() + 1);
    let logit = |k: usize| if k < u.len() { u[k] } else { 0.0 };
    let lse = linalg::log_sum_exp((0..mask.len()).filter(|&k| mask[k]).map(logit));
    (0..mask.len())
        .map(|k| {
            if mask[k] {
                (logit(k) - lse).exp()
            } else {
                0.0
            }
        })
        .collect()
}

/// Renormalizes the entries at `indices` to sum to one, dropping the other taxa.
pub fn subcomposition(sample: &CompositionSample, indices: &[usize]) -> Result<CompositionSample> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty index set".into()));
    }
    if let Some(&k) = indices.iter().find(|&&k| k >= sample.n_taxa()) {
        return Err(Error::IndexOutOfRange {
            index: k,
            lower: 0,
            upper: sample.n_taxa() - 1,
        });
    }
    let picked: Vec<f64> = indices.iter().map(|&k| sample.values()[k]).collect();
    let total: f64 = picked.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateSample);
    }
    Ok(CompositionSample::from_checked(
        picked.into_iter().map(|v| v / total).collect(),
    ))
}

/// Parameters of the zero-inflated logistic-normal law over `K + 1` taxa.
///
/// `discrete_masses` maps presence patterns to their probabilities. It may be
/// sparse (only the patterns that matter); when it lists every one of the
/// `2^{K+1} - 1` admissible patterns, the masses must sum to one.
#[derive(Debug, Clone)]
pub struct MzilnParams {
    mu: Vec<f64>,
    sigma: DMatrix<f64>,
    discrete_masses: BTreeMap<Vec<bool>, f64>,
}

impl MzilnParams {
    pub fn new(
        mu: Vec<f64>,
        sigma: DMatrix<f64>,
        discrete_masses: BTreeMap<Vec<bool>, f64>,
    ) -> Result<Self> {
        let k = mu.len();
        if sigma.nrows() != k || sigma.ncols() != k {
            return Err(Error::DimensionMismatch(format!(
                "mean has {k} entries but covariance is {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if !linalg::is_symmetric(&sigma, 1e-12) {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        linalg::cholesky(&sigma)?;
        for (pattern, &p) in &discrete_masses {
            if pattern.len() != k + 1 || !pattern.iter().any(|&z| z) {
                return Err(Error::InvalidInput(format!(
                    "pattern {} is not an admissible presence pattern over {} taxa",
                    pattern_label(pattern),
                    k + 1
                )));
            }
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidInput(format!("mass {p} outside (0, 1]")));
            }
        }
        let complete = k + 1 < usize::BITS as usize
            && discrete_masses.len() as u128 == (1u128 << (k + 1)) - 1;
        if complete {
            let total: f64 = discrete_masses.values().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "complete discrete masses sum to {total}"
                )));
            }
        }
        Ok(Self {
            mu,
            sigma,
            discrete_masses,
        })
    }

    /// Estimates the discrete masses by the empirical frequency of each
    /// observed presence pattern.
    pub fn with_empirical_masses(
        mu: Vec<f64>,
        sigma: DMatrix<f64>,
        samples: &[CompositionSample],
    ) -> Result<Self> {
        Self::new(mu, sigma, empirical_masses(samples))
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn discrete_masses(&self) -> &BTreeMap<Vec<bool>, f64> {
        &self.discrete_masses
    }
}

/// Empirical frequency of each presence pattern among `samples`.
pub fn empirical_masses(samples: &[CompositionSample]) -> BTreeMap<Vec<bool>, f64> {
    let mut counts: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.presence().to_vec()).or_default() += 1;
    }
    let n = samples.len() as f64;
    counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect()
}

/// Every nonempty presence pattern over `n_taxa` taxa, ordered by bit encoding.
///
/// Only supported up to 20 taxa.
pub fn all_presence_patterns(n_taxa: usize) -> Result<Vec<Vec<bool>>> {
    if n_taxa == 0 || n_taxa > 20 {
        return Err(Error::InvalidInput(format!(
            "pattern enumeration supports 1..=20 taxa, got {n_taxa}"
        )));
    }
    Ok((1u32..(1 << n_taxa))
        .map(|bits| (0..n_taxa).map(|k| bits & (1 << k) != 0).collect())
        .collect())
}

fn pattern_label(pattern: &[bool]) -> String {
    pattern.iter().map(|&z| if z { '1' } else { '0' }).collect()
}

/// Log density of the zero-inflated logistic-normal law at `sample`.
///
/// For `L >= 2` nonzero taxa this is `log p_pattern + log N(u_sub; A mu, A Sigma A^T)`,
/// a density with respect to Lebesgue measure on the subcomposition log-ratios.
/// A single nonzero taxon contributes `log p_pattern` alone.
pub fn mziln_log_density(sample: &CompositionSample, params: &MzilnParams) -> Result<f64> {
    if sample.n_taxa() != params.mu.len() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "sample has {} taxa, parameters describe {}",
            sample.n_taxa(),
            params.mu.len() + 1
        )));
    }
    let mass = *params
        .discrete_masses
        .get(sample.presence())
        .ok_or_else(|| Error::MissingMass(pattern_label(sample.presence())))?;
    if sample.n_present() == 1 {
        return Ok(mass.ln());
    }
    let (transform, u_sub) = log_ratio_transform(sample)?;
    let mean = transform.apply(&params.mu);
    let cov = transform.project_covariance(&params.sigma);
    Ok(mass.ln() + linalg::mvn_log_density(&u_sub, &mean, &cov)?)
}

/// Baseline composition implied by the intercept vector `beta_00`.
pub fn baseline_composition(beta_00: &[f64]) -> Result<Vec<f64>> {
    Ok(inverse_log_ratio(beta_00)?.values)
}

/// Direction of a covariate's association with a taxon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum Direction {
    Positive,
    Negative,
    Neutral,
}

impl Direction {
    pub fn of(x: f64) -> Self {
        if x > 0.0 {
            Direction::Positive
        } else if x < 0.0 {
            Direction::Negative
        } else {
            Direction::Neutral
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Direction::Positive => "+",
            Direction::Negative => "-",
            Direction::Neutral => "0",
        }
    }
}

/// Composition shift from baseline induced by a unit change in one covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionShift {
    pub shift: Vec<f64>,
    pub signs: Vec<Direction>,
}

/// Perturbation summary of a covariate's coefficient vector `beta_q0`: the
/// shifted composition and, per taxon, whether it exceeds the neutral share
/// `1 / (K + 1)`.
pub fn covariate_shift(beta_q0: &[f64]) -> Result<CompositionShift> {
    let shift = inverse_log_ratio(beta_q0)?.values;
    let neutral = 1.0 / shift.len() as f64;
    let signs = shift
        .iter()
        .map(|&s| {
            if s > neutral + 1e-12 {
                Direction::Positive
            } else if s < neutral - 1e-12 {
                Direction::Negative
            } else {
                Direction::Neutral
            }
        })
        .collect();
    Ok(CompositionShift { shift, signs })
}

/// Magnitude `sqrt(b^T (I + 1 1^T)^{-1} b)` of the overall disturbance induced
/// by a covariate, using `(I + 1 1^T)^{-1} = I - 1 1^T / (K + 1)`.
pub fn disturbance_magnitude(beta_q0: &[f64]) -> Result<f64> {
    if let Some(v) = beta_q0.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("coefficient {v} is not finite")));
    }
    let k = beta_q0.len() as f64;
    let sq: f64 = beta_q0.iter().map(|b| b * b).sum();
    let sum: f64 = beta_q0.iter().sum();
    Ok((sq - sum * sum / (k + 1.0)).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sample(v: &[f64]) -> CompositionSample {
        CompositionSample::new(v.to_vec()).unwrap()
    }

    #[test]
    fn all_present_transform() {
        let (t, u) = log_ratio_transform(&sample(&[0.2, 0.3, 0.5])).unwrap();
        assert_eq!(t.nonzero_indices(), &[0, 1, 2]);
        assert!(t.reference_present());
        assert_eq!(t.matrix_a(), DMatrix::identity(2, 2));
        assert_relative_eq!(u[0], -0.916_290_731_874_155, epsilon = 1e-12);
        assert_relative_eq!(u[1], -0.510_825_623_765_990_7, epsilon = 1e-12);
    }

    #[test]
    fn reference_absent_transform() {
        let (t, u) = log_ratio_transform(&sample(&[0.4, 0.0, 0.6, 0.0])).unwrap();
        assert_eq!(t.nonzero_indices(), &[0, 2]);
        assert_eq!(t.denominator(), 2);
        assert_eq!(t.matrix_a(), DMatrix::from_row_slice(1, 3, &[1.0, 0.0, -1.0]));
        assert_relative_eq!(u[0], (0.4f64 / 0.6).ln(), epsilon = 1e-15);
        assert_relative_eq!(u[0], -0.405_465_108_108_164_4, epsilon = 1e-12);
    }

    #[test]
    fn single_taxon_is_degenerate() {
        assert_eq!(
            log_ratio_transform(&sample(&[0.0, 1.0, 0.0])),
            Err(Error::DegenerateSample)
        );
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(inverse_log_ratio(&[0.0]).unwrap().values(), &[0.5, 0.5]);
        for v in inverse_log_ratio(&[0.0, 0.0]).unwrap().values() {
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let y = inverse_log_ratio(&[2f64.ln()]).unwrap();
        assert_relative_eq!(y.values()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(y.values()[1], 1.0 / 3.0, epsilon = 1e-15);
        assert!(inverse_log_ratio(&[f64::NAN]).is_err());
    }

    #[test]
    fn subcomposition_examples() {
        let y = sample(&[0.2, 0.3, 0.5]);
        let s = subcomposition(&y, &[0, 1]).unwrap();
        assert_relative_eq!(s.values()[0], 0.4, epsilon = 1e-15);
        assert_relative_eq!(s.values()[1], 0.6, epsilon = 1e-15);
        assert_eq!(subcomposition(&y, &[0, 1, 2]).unwrap(), y);
        assert_eq!(
            subcomposition(&sample(&[0.5, 0.5, 0.0]), &[2]),
            Err(Error::DegenerateSample)
        );
    }

    #[test]
    fn sample_validation() {
        assert!(CompositionSample::new(vec![0.5, 0.6]).is_err());
        assert!(CompositionSample::new(vec![0.0, 0.0]).is_err());
        assert!(CompositionSample::new(vec![-0.1, 1.1]).is_err());
        let s = CompositionSample::normalized(vec![2.0, 3.0, 5.0]).unwrap();
        assert_relative_eq!(s.values()[0], 0.2, epsilon = 1e-15);
        assert_eq!(
            CompositionSample::new(vec![0.0, 1.0]).unwrap().presence(),
            &[false, true]
        );
    }

    #[test]
    fn density_discrete_only() {
        let mut masses = BTreeMap::new();
        masses.insert(vec![true, false], 0.3);
        let params = MzilnParams::new(vec![0.0], DMatrix::identity(1, 1), masses).unwrap();
        let v = mziln_log_density(&sample(&[1.0, 0.0]), &params).unwrap();
        assert_relative_eq!(v, 0.3f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn density_continuous_part() {
        let mut masses = BTreeMap::new();
        masses.insert(vec![true, true], 0.5);
        let params = MzilnParams::new(vec![0.0], DMatrix::identity(1, 1), masses).unwrap();
        let v = mziln_log_density(&sample(&[0.5, 0.5]), &params).unwrap();
        let expected = 0.5f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(v, expected, epsilon = 1e-14);
        assert!(matches!(
            mziln_log_density(&sample(&[0.0, 1.0]), &params),
            Err(Error::MissingMass(_))
        ));
    }

    #[test]
    fn complete_masses_must_sum_to_one() {
        let patterns = all_presence_patterns(2).unwrap();
        assert_eq!(patterns.len(), 3);
        let masses: BTreeMap<_, _> = patterns.into_iter().map(|p| (p, 0.25)).collect();
        assert!(MzilnParams::new(vec![0.0], DMatrix::identity(1, 1), masses).is_err());
    }

    #[test]
    fn perturbation_summaries() {
        for v in baseline_composition(&[0.0, 0.0]).unwrap() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let b = baseline_composition(&[2f64.ln()]).unwrap();
        assert_relative_eq!(b[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(b, inverse_log_ratio(&[2f64.ln()]).unwrap().values());

        let none = covariate_shift(&[0.0, 0.0, 0.0]).unwrap();
        assert!(none.shift.iter().all(|&s| (s - 0.25).abs() < 1e-15));
        assert!(none.signs.iter().all(|&s| s == Direction::Neutral));
        let up = covariate_shift(&[2f64.ln()]).unwrap();
        assert_eq!(up.signs, vec![Direction::Positive, Direction::Negative]);

        assert_eq!(disturbance_magnitude(&[0.0, 0.0]).unwrap(), 0.0);
        assert_relative_eq!(
            disturbance_magnitude(&[1.0, 1.0]).unwrap(),
            0.816_496_580_927_726,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            disturbance_magnitude(&[1.0, -1.0]).unwrap(),
            std::f64::consts::SQRT_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn gram_structure() {
        let t = SubcompositionTransform::new(6, vec![0, 2, 3, 5]).unwrap();
        let a = t.matrix_a();
        assert_eq!(&a * a.transpose(), DMatrix::identity(3, 3));
        let t = SubcompositionTransform::new(6, vec![0, 2, 3]).unwrap();
        let a = t.matrix_a();
        let expected = DMatrix::identity(2, 2) + DMatrix::from_element(2, 2, 1.0);
        assert_eq!(&a * a.transpose(), expected);
    }

    fn positive_composition(max_taxa: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..10.0, 2..=max_taxa).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    fn index_set(n: usize) -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(any::<bool>(), n).prop_map(move |mut mask| {
            let n = mask.len();
            mask[n - 1] = false;
            let mut idx: Vec<usize> = present_indices(&mask);
            if idx.is_empty() {
                idx.push(0);
            }
            idx.push(n - 1);
            idx
        })
    }

    proptest! {
        #[test]
        fn round_trip(y in positive_composition(12)) {
            let s = CompositionSample::new(y.clone()).unwrap();
            let (_, u) = log_ratio_transform(&s).unwrap();
            let back = inverse_log_ratio(&u).unwrap();
            for (a, b) in back.values().iter().zip(&y) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn subcomposition_is_linear_image(
            (y, idx) in positive_composition(10).prop_flat_map(|y| {
                let n = y.len();
                (Just(y), index_set(n))
            })
        ) {
            let s = CompositionSample::new(y).unwrap();
            let (_, u) = log_ratio_transform(&s).unwrap();
            let sub = subcomposition(&s, &idx).unwrap();
            let (_, u_sub) = log_ratio_transform(&sub).unwrap();
            let mut mask = vec![false; s.n_taxa()];
            for &k in &idx { mask[k] = true; }
            let t = SubcompositionTransform::new(s.n_taxa(), idx.clone()).unwrap();
            let au = t.matrix_a() * nalgebra::DVector::from_vec(u.clone());
            for (a, b) in u_sub.iter().zip(au.iter()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            let fast = t.apply(&u);
            for (a, b) in fast.iter().zip(au.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn a_matrix_full_row_rank(mask in prop::collection::vec(any::<bool>(), 2..30)) {
            let idx = present_indices(&mask);
            prop_assume!(idx.len() >= 2);
            let t = SubcompositionTransform::new(mask.len(), idx).unwrap();
            let a = t.matrix_a();
            let gram = &a * a.transpose();
            prop_assert_eq!(gram.clone().rank(1e-9), t.n_rows());
            let d = t.n_rows();
            let expected = if t.reference_present() {
                DMatrix::identity(d, d)
            } else {
                DMatrix::identity(d, d) + DMatrix::from_element(d, d, 1.0)
            };
            prop_assert_eq!(gram, expected);
            for row in a.row_iter() {
                prop_assert!(row.iter().filter(|v| **v != 0.0).count() <= 2);
            }
        }

        #[test]
        fn presence_tracks_values(raw in prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..5.0], 1..15)) {
            prop_assume!(raw.iter().any(|&v| v > 0.0));
            let s = CompositionSample::normalized(raw).unwrap();
            for (v, z) in s.values().iter().zip(s.presence()) {
                prop_assert_eq!(*v > 0.0, *z);
            }
        }

        #[test]
        fn disturbance_matches_explicit_inverse(beta in prop::collection::vec(-5.0f64..5.0, 1..=20)) {
            let k = beta.len();
            let m = DMatrix::identity(k, k) + DMatrix::from_element(k, k, 1.0);
            let inv = m.try_inverse().unwrap();
            let b = nalgebra::DVector::from_vec(beta.clone());
            let direct = (b.transpose() * inv * &b)[(0, 0)].max(0.0).sqrt();
            prop_assert!((disturbance_magnitude(&beta).unwrap() - direct).abs() < 1e-10);
        }
    }
}
