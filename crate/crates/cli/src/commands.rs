use std::path::{Path, PathBuf};

use mziln::composition::{covariate_shift, disturbance_magnitude, log_ratio_transform, Direction};
use mziln::penalized::{cross_validate, selected_support, CvOptions, PathOptions, PenaltySpec};
use mziln::regression::{assemble_system, WorkingCovariance};
use mziln::simulation::{
    parse_penalty, run_highdim_scenario, run_lowdim_scenario, spearman_baseline, HighDimReport,
    LowDimReport, ScenarioConfig, ScenarioMode,
};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::ingest::{ingest, ingest_taxa, IngestOptions};
use crate::output::{full, header_line, short, write_json, Tsv};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct FitOptions {
    pub taxa: PathBuf,
    pub covariates: PathBuf,
    pub ingest: IngestOptions,
    pub penalty: String,
    pub penalty_gamma: Option<f64>,
    pub enet_alpha: Option<f64>,
    pub folds: usize,
    pub lambda_grid_size: usize,
    pub one_se: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            taxa: PathBuf::new(),
            covariates: PathBuf::new(),
            ingest: IngestOptions::default(),
            penalty: "mcp".into(),
            penalty_gamma: None,
            enet_alpha: None,
            folds: 10,
            lambda_grid_size: 100,
            one_se: false,
            seed: 0,
            out_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportedPair {
    pub taxon: String,
    pub covariate: String,
    pub direction: Direction,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateSummary {
    pub covariate: String,
    pub disturbance_magnitude: f64,
    /// Shifted composition over every taxon, reference last.
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub reference_taxon: String,
    pub penalty: String,
    pub lambda_max: f64,
    pub lambda_selected: f64,
    pub n_subjects_used: usize,
    pub n_subjects_skipped: usize,
    pub dropped_taxa: Vec<String>,
    pub missing_covariates: usize,
    /// Sorted by decreasing `|estimate|`.
    pub selected: Vec<ReportedPair>,
    pub shifts: Vec<CovariateSummary>,
}

/// Ingest, cross-validated penalized fit and per-covariate summaries.
///
/// Writes `coefficients.tsv`, `selected.tsv`, `shifts.tsv` and
/// `summary.json` under `out_dir`.
pub fn cmd_fit(opts: &FitOptions) -> Result<FitReport> {
    let family = parse_penalty(&opts.penalty, opts.penalty_gamma, opts.enet_alpha).map_err(CliError::Config)?;
    family.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let data = ingest(&opts.taxa, &opts.covariates, &opts.ingest)?;
    let taxa = &data.taxa;
    let sys = assemble_system(&taxa.samples, &data.covariates, &WorkingCovariance::Identity)?;
    if sys.n_subjects_used() < opts.folds {
        return Err(CliError::Config(format!(
            "{} folds requested but only {} subjects carry log-ratio information",
            opts.folds,
            sys.n_subjects_used()
        )));
    }
    let path_opts = PathOptions {
        n_lambdas: opts.lambda_grid_size,
        ..PathOptions::default()
    };
    let cv = CvOptions {
        folds: opts.folds,
        seed: opts.seed,
        one_se: opts.one_se,
    };
    let path = cross_validate(&sys, &PenaltySpec::new(family), &path_opts, &cv)?;
    let beta = path.selected_coefficients().expect("cross-validation selects a lambda");

    let mut selected: Vec<ReportedPair> = selected_support(&path, 0.0)?
        .into_iter()
        .map(|p| ReportedPair {
            taxon: taxa.taxa_names[p.taxon].clone(),
            covariate: data.covariate_names[p.covariate - 1].clone(),
            direction: p.direction,
            estimate: p.estimate,
        })
        .collect();
    selected.sort_by(|a, b| b.estimate.abs().total_cmp(&a.estimate.abs()));
    let shifts = (1..=beta.n_covariates())
        .map(|q| {
            let b = beta.covariate_effects(q)?;
            Ok(CovariateSummary {
                covariate: data.covariate_names[q - 1].clone(),
                disturbance_magnitude: disturbance_magnitude(&b)?,
                shift: covariate_shift(&b)?.shift,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = FitReport {
        reference_taxon: taxa.reference().to_string(),
        penalty: family.name().to_string(),
        lambda_max: path.lambda_max,
        lambda_selected: path.lambda_selected.expect("selected"),
        n_subjects_used: sys.n_subjects_used(),
        n_subjects_skipped: sys.n_subjects_skipped(),
        dropped_taxa: taxa.dropped_taxa.clone(),
        missing_covariates: data.missing_covariates,
        selected,
        shifts,
    };

    create_dir(&opts.out_dir)?;
    let header = header_line(Some(opts.seed), opts);
    let mut coef = Tsv::new(&header, &["taxon", "covariate", "estimate"]);
    for k in 0..beta.n_log_ratios() {
        for q in 0..=beta.n_covariates() {
            let cov = if q == 0 { "(intercept)" } else { &data.covariate_names[q - 1] };
            coef.row(&[taxa.taxa_names[k].as_str(), cov, &full(beta.get(k, q))]);
        }
    }
    coef.write(&opts.out_dir.join("coefficients.tsv"))?;
    let mut sel = Tsv::new(&header, &["taxon", "covariate", "direction", "estimate"]);
    for p in &report.selected {
        sel.row(&[p.taxon.as_str(), &p.covariate, p.direction.symbol(), &short(p.estimate)]);
    }
    sel.write(&opts.out_dir.join("selected.tsv"))?;
    let mut columns = vec!["covariate", "disturbance"];
    columns.extend(taxa.taxa_names.iter().map(String::as_str));
    let mut shift = Tsv::new(&header, &columns);
    for s in &report.shifts {
        let mut row = vec![s.covariate.clone(), full(s.disturbance_magnitude)];
        row.extend(s.shift.iter().map(|v| full(*v)));
        shift.row(&row);
    }
    shift.write(&opts.out_dir.join("shifts.tsv"))?;
    write_json(&opts.out_dir.join("summary.json"), &report)?;
    Ok(report)
}

/// One scenario of a manifest with the swept values that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct Cell {
    pub key: Vec<(String, String)>,
    pub config: ScenarioConfig,
}

/// Expands a manifest into its scenarios.
///
/// Top-level keys are [`ScenarioConfig`] fields. An optional `[sweep]` table
/// maps field names to arrays; every combination becomes one cell, the first
/// key varying slowest.
pub fn parse_manifest(text: &str) -> Result<Vec<Cell>> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    let sweep = match table.remove("sweep") {
        None => toml::Table::new(),
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(CliError::Config("sweep: must be a table of arrays".into())),
    };
    let mut cells = vec![(Vec::new(), table)];
    for (field, values) in &sweep {
        let toml::Value::Array(values) = values else {
            return Err(CliError::Config(format!("sweep.{field}: must be an array")));
        };
        if values.is_empty() {
            return Err(CliError::Config(format!("sweep.{field}: must not be empty")));
        }
        cells = cells
            .into_iter()
            .flat_map(|(key, base)| {
                values.iter().map(move |v| {
                    let mut key = key.clone();
                    key.push((field.clone(), display_value(v)));
                    let mut t = base.clone();
                    t.insert(field.clone(), v.clone());
                    (key, t)
                })
            })
            .collect();
    }
    cells
        .into_iter()
        .map(|(key, t)| {
            let config: ScenarioConfig = toml::Value::Table(t)
                .try_into()
                .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
            config.validate().map_err(|e| CliError::Config(e.to_string()))?;
            Ok(Cell { key, config })
        })
        .collect()
}

fn display_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Float(f) => f.to_string(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum CellReport {
    LowDim(LowDimReport),
    HighDim(HighDimReport),
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub key: Vec<(String, String)>,
    pub config: ScenarioConfig,
    pub report: CellReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateOptions {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
}

/// Runs every cell of a manifest.
///
/// Low-dimensional cells go to `table1.tsv`; high-dimensional cells to
/// `replicates.tsv` and `summary.tsv`. Everything is also in `summary.json`.
pub fn cmd_simulate(opts: &SimulateOptions) -> Result<Vec<CellResult>> {
    let text = std::fs::read_to_string(&opts.manifest).map_err(|e| CliError::io(&opts.manifest, e))?;
    let cells = parse_manifest(&text)?;
    let results = cells
        .into_iter()
        .map(|cell| {
            let report = match cell.config.mode {
                ScenarioMode::LowDim => CellReport::LowDim(run_lowdim_scenario(&cell.config)?),
                ScenarioMode::HighDim => CellReport::HighDim(run_highdim_scenario(&cell.config)?),
            };
            Ok(CellResult {
                key: cell.key,
                config: cell.config,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    create_dir(&opts.out_dir)?;
    let manifest: toml::Table = text.parse().expect("parsed above");
    let seed = results[0].config.seed;
    let header = header_line(Some(seed), &manifest);
    let key_names: Vec<String> = results[0].key.iter().map(|(k, _)| k.clone()).collect();
    let with_keys = |rest: &[&str]| -> Vec<String> {
        key_names.iter().map(String::as_str).chain(rest.iter().copied()).map(String::from).collect()
    };
    let key_values = |r: &CellResult| -> Vec<String> { r.key.iter().map(|(_, v)| v.clone()).collect() };

    let low: Vec<(&CellResult, &LowDimReport)> = results
        .iter()
        .filter_map(|r| match &r.report {
            CellReport::LowDim(l) => Some((r, l)),
            _ => None,
        })
        .collect();
    if !low.is_empty() {
        let cols = with_keys(&["Parameter", "True", "Ave.Bias", "Ave.Percent.Bias", "Ave.CP", "n_failed"]);
        let mut t = Tsv::new(&header, &cols.iter().map(String::as_str).collect::<Vec<_>>());
        for (cell, report) in &low {
            for row in &report.rows {
                let mut fields = key_values(cell);
                fields.extend([
                    row.parameter.clone(),
                    full(row.true_value),
                    full(row.ave_bias),
                    full(row.ave_percent_bias),
                    full(row.ave_cp),
                    report.n_failed.to_string(),
                ]);
                t.row(&fields);
            }
        }
        t.write(&opts.out_dir.join("table1.tsv"))?;
    }

    let high: Vec<(&CellResult, &HighDimReport)> = results
        .iter()
        .filter_map(|r| match &r.report {
            CellReport::HighDim(h) => Some((r, h)),
            _ => None,
        })
        .collect();
    if !high.is_empty() {
        let metric_cols = ["tp", "fp", "fn", "recall", "precision", "f1"];
        let mut cols = vec!["replicate", "sigma", "lambda_selected", "n_selected"];
        cols.extend(metric_cols);
        let sp_cols: Vec<String> = metric_cols.iter().map(|c| format!("spearman_{c}")).collect();
        cols.extend(sp_cols.iter().map(String::as_str));
        cols.push("error");
        let cols = with_keys(&cols);
        let mut reps = Tsv::new(&header, &cols.iter().map(String::as_str).collect::<Vec<_>>());
        let metrics = |m: Option<mziln::simulation::SelectionMetrics>| -> Vec<String> {
            match m {
                Some(m) => vec![
                    m.tp.to_string(),
                    m.fp.to_string(),
                    m.fn_.to_string(),
                    full(m.recall),
                    full(m.precision),
                    full(m.f1),
                ],
                None => vec!["NA".into(); 6],
            }
        };
        let summary_cols = with_keys(&[
            "n_ok", "n_failed", "recall_mean", "recall_sd", "precision_mean", "precision_sd", "f1_mean", "f1_sd",
            "spearman_recall_mean", "spearman_precision_mean", "spearman_f1_mean",
        ]);
        let mut summary = Tsv::new(&header, &summary_cols.iter().map(String::as_str).collect::<Vec<_>>());
        for (cell, report) in &high {
            for r in &report.replicates {
                let mut fields = key_values(cell);
                fields.extend([
                    r.replicate.to_string(),
                    full(r.sigma),
                    r.lambda_selected.map_or("NA".into(), full),
                    r.n_selected.to_string(),
                ]);
                fields.extend(metrics(r.mziln));
                fields.extend(metrics(r.spearman));
                fields.push(r.error.clone().unwrap_or_else(|| "NA".into()));
                reps.row(&fields);
            }
            let m = &report.mziln;
            let mut fields = key_values(cell);
            fields.extend([
                m.n.to_string(),
                report.n_failed.to_string(),
                full(m.recall_mean),
                full(m.recall_sd),
                full(m.precision_mean),
                full(m.precision_sd),
                full(m.f1_mean),
                full(m.f1_sd),
            ]);
            match &report.spearman {
                Some(s) => fields.extend([full(s.recall_mean), full(s.precision_mean), full(s.f1_mean)]),
                None => fields.extend(["NA".to_string(), "NA".into(), "NA".into()]),
            }
            summary.row(&fields);
        }
        reps.write(&opts.out_dir.join("replicates.tsv"))?;
        summary.write(&opts.out_dir.join("summary.tsv"))?;
    }
    write_json(&opts.out_dir.join("summary.json"), &results)?;
    Ok(results)
}

/// Human-readable rendering of the low-dimensional summary.
pub fn format_table1(report: &LowDimReport) -> String {
    let mut out = format!(
        "{:<10} {:>8} {:>10} {:>18} {:>8}\n",
        "Parameter", "True", "Ave.Bias", "Ave.Percent.Bias", "Ave.CP"
    );
    for r in &report.rows {
        out += &format!(
            "{:<10} {:>8} {:>10} {:>18} {:>8}\n",
            r.parameter,
            short(r.true_value),
            short(r.ave_bias),
            short(r.ave_percent_bias),
            short(r.ave_cp)
        );
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct TransformOptions {
    pub taxa: PathBuf,
    pub ingest: IngestOptions,
    pub out: PathBuf,
}

/// Writes each subject's log-ratios with its nonzero taxa (1-based) and
/// denominator. Subjects with a single nonzero taxon are marked `DEGENERATE`.
pub fn cmd_transform(opts: &TransformOptions) -> Result<usize> {
    let data = ingest_taxa(&opts.taxa, &opts.ingest)?;
    let header = header_line(None, opts);
    let mut t = Tsv::new(&header, &["subject", "status", "denominator", "nonzero", "log_ratios"]);
    let mut degenerate = 0;
    for (id, s) in data.subject_ids.iter().zip(&data.samples) {
        let nonzero: Vec<String> = s.nonzero_indices().iter().map(|k| (k + 1).to_string()).collect();
        match log_ratio_transform(s) {
            Ok((tr, u)) => {
                let values: Vec<String> = u.iter().map(|v| full(*v)).collect();
                t.row(&[
                    id.as_str(),
                    "OK",
                    &data.taxa_names[tr.denominator()],
                    &nonzero.join(","),
                    &values.join(","),
                ]);
            }
            Err(mziln::Error::DegenerateSample) => {
                degenerate += 1;
                let only = &data.taxa_names[s.nonzero_indices()[0]];
                t.row(&[id.as_str(), "DEGENERATE", only, &nonzero.join(","), ""]);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut text = t.as_str().to_string();
    text.insert_str(text.find('\n').expect("header line") + 1, &format!("# taxa\t{}\n", data.taxa_names.join("\t")));
    crate::output::write_atomic(&opts.out, text.as_bytes())?;
    Ok(degenerate)
}

/// One row of a transform table.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformRecord {
    pub subject: String,
    /// 1-based taxon positions with nonzero abundance.
    pub nonzero: Vec<usize>,
    /// `None` for degenerate subjects.
    pub log_ratios: Option<Vec<f64>>,
}

impl TransformRecord {
    /// Relative abundances of the nonzero taxa, in `nonzero` order.
    pub fn subcomposition(&self) -> Vec<f64> {
        match &self.log_ratios {
            None => vec![1.0],
            Some(u) => {
                let m = u.iter().copied().fold(0.0, f64::max);
                let w: Vec<f64> = u.iter().map(|v| (v - m).exp()).chain([(-m).exp()]).collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|v| v / total).collect()
            }
        }
    }
}

/// Reads a table written by [`cmd_transform`].
pub fn read_transform(path: &Path) -> Result<Vec<TransformRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let err = |line: usize, message: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        column: 1,
        message,
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#'))
        .skip(1)
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(i + 1, format!("expected 5 fields, found {}", f.len())));
            }
            let nonzero = f[3]
                .split(',')
                .map(|v| v.parse().map_err(|_| err(i + 1, format!("bad taxon position {v:?}"))))
                .collect::<Result<Vec<usize>>>()?;
            let log_ratios = match f[1] {
                "DEGENERATE" => None,
                _ => Some(
                    f[4].split(',')
                        .map(|v| v.parse().map_err(|_| err(i + 1, format!("bad log-ratio {v:?}"))))
                        .collect::<Result<Vec<f64>>>()?,
                ),
            };
            Ok(TransformRecord {
                subject: f[0].to_string(),
                nonzero,
                log_ratios,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SpearmanOptions {
    pub taxa: PathBuf,
    pub covariates: PathBuf,
    pub ingest: IngestOptions,
    pub fdr: f64,
    pub out: PathBuf,
}

/// Spearman tests of every taxon against every covariate with BH selection.
/// Returns the number of selected pairs.
pub fn cmd_spearman(opts: &SpearmanOptions) -> Result<usize> {
    if !(opts.fdr > 0.0 && opts.fdr < 1.0) {
        return Err(CliError::Config(format!("fdr {} is not in (0, 1)", opts.fdr)));
    }
    let data = ingest(&opts.taxa, &opts.covariates, &opts.ingest)?;
    let mut tests = spearman_baseline(&data.taxa.samples, &data.covariates, opts.fdr)?;
    tests.sort_by(|a, b| a.p_value.total_cmp(&b.p_value).then((a.taxon, a.covariate).cmp(&(b.taxon, b.covariate))));
    let header = header_line(None, opts);
    let mut t = Tsv::new(&header, &["taxon", "covariate", "rho", "p_value", "direction", "selected"]);
    for s in &tests {
        t.row(&[
            data.taxa.taxa_names[s.taxon].as_str(),
            &data.covariate_names[s.covariate - 1],
            &full(s.rho),
            &full(s.p_value),
            s.direction.symbol(),
            if s.selected { "yes" } else { "no" },
        ]);
    }
    t.write(&opts.out)?;
    Ok(tests.iter().filter(|s| s.selected).count())
}
