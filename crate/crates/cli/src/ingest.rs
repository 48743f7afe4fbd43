//! Tab-delimited taxa and covariate tables.
//!
//! Both files carry a header row and an identifier column. By default
//! subjects are rows; `Orientation::FeaturesAsRows` reads the transpose.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use mziln::composition::CompositionSample;
use mziln::regression::CovariateRecord;
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    #[default]
    SubjectsAsRows,
    FeaturesAsRows,
}

/// How abundance cells are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AbundanceMode {
    /// Counts when every cell is an integer and some row does not sum to one.
    #[default]
    Auto,
    Counts,
    Relative,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestOptions {
    pub orientation: Orientation,
    pub mode: AbundanceMode,
    /// Taxon name, or a 1-based column position; the last taxon if unset.
    pub reference_taxon: Option<String>,
}

/// Rows sum to one within this tolerance in relative mode.
pub const RELATIVE_TOLERANCE: f64 = 1e-6;

const MISSING: [&str; 4] = ["", "NA", "NaN", "nan"];

/// A numeric table with its labels, subjects always as rows.
#[derive(Debug, Clone)]
struct Table {
    subjects: Vec<String>,
    features: Vec<String>,
    cells: Vec<Vec<Option<f64>>>,
}

fn read_table(path: &Path, orientation: Orientation) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parse_err = |line: usize, column: usize, message: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, 1, "file has no header row".into()))?;
    let columns: Vec<String> = header.split('\t').skip(1).map(|s| s.trim().to_string()).collect();
    if columns.is_empty() {
        return Err(parse_err(1, 1, "header row has no data columns".into()));
    }
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns.len() + 1 {
            return Err(parse_err(
                line_no,
                1,
                format!("expected {} fields, found {}", columns.len() + 1, fields.len()),
            ));
        }
        rows.push(fields[0].trim().to_string());
        let row = fields[1..]
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let f = f.trim();
                if MISSING.contains(&f) {
                    return Ok(None);
                }
                match f.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    _ => Err(parse_err(line_no, j + 2, format!("{f:?} is not a number"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    let table = match orientation {
        Orientation::SubjectsAsRows => Table {
            subjects: rows,
            features: columns,
            cells,
        },
        Orientation::FeaturesAsRows => Table {
            cells: (0..columns.len())
                .map(|j| cells.iter().map(|r| r[j]).collect())
                .collect(),
            subjects: columns,
            features: rows,
        },
    };
    check_unique(path, "subject id", &table.subjects)?;
    check_unique(path, "column name", &table.features)?;
    Ok(table)
}

fn check_unique(path: &Path, what: &str, names: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    match names.iter().find(|n| !seen.insert(n.as_str())) {
        Some(dup) => Err(CliError::Ingest(format!("{}: duplicate {what} {dup:?}", path.display()))),
        None => Ok(()),
    }
}

/// Taxa table ready for modelling: reference taxon last, RA rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TaxaData {
    pub subject_ids: Vec<String>,
    pub taxa_names: Vec<String>,
    pub samples: Vec<CompositionSample>,
    /// Taxa removed because no retained subject had a nonzero reading.
    pub dropped_taxa: Vec<String>,
    /// Subjects removed because every reading was zero.
    pub empty_subjects: Vec<String>,
}

impl TaxaData {
    pub fn reference(&self) -> &str {
        self.taxa_names.last().expect("at least one taxon")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub taxa: TaxaData,
    pub covariate_names: Vec<String>,
    pub covariates: Vec<CovariateRecord>,
    /// Subjects dropped for a missing covariate value.
    pub missing_covariates: usize,
    /// Subjects found in only one of the two files.
    pub unmatched: usize,
}

fn resolve_reference(names: &[String], wanted: Option<&str>) -> Result<usize> {
    let Some(w) = wanted else {
        return Ok(names.len() - 1);
    };
    if let Some(i) = names.iter().position(|n| n == w) {
        return Ok(i);
    }
    match w.parse::<usize>() {
        Ok(i) if (1..=names.len()).contains(&i) => Ok(i - 1),
        _ => Err(CliError::Config(format!("reference taxon {w:?} is not a taxon name or column position"))),
    }
}

/// Builds samples from the taxa rows of `keep` (row indices into `table`).
fn build_taxa(path: &Path, table: &Table, keep: &[usize], opts: &IngestOptions) -> Result<TaxaData> {
    for &i in keep {
        for (j, v) in table.cells[i].iter().enumerate() {
            match v {
                None => {
                    return Err(CliError::Ingest(format!(
                        "{}: subject {:?} has no value for taxon {:?}",
                        path.display(),
                        table.subjects[i],
                        table.features[j]
                    )))
                }
                Some(v) if *v < 0.0 => {
                    return Err(CliError::Ingest(format!(
                        "{}: negative abundance {v} for subject {:?}, taxon {:?}",
                        path.display(),
                        table.subjects[i],
                        table.features[j]
                    )))
                }
                _ => {}
            }
        }
    }
    let row = |i: usize| table.cells[i].iter().map(|v| v.expect("checked above"));
    let integral = keep.iter().all(|&i| row(i).all(|v| v.fract() == 0.0));
    let off_simplex = keep
        .iter()
        .any(|&i| (row(i).sum::<f64>() - 1.0).abs() > RELATIVE_TOLERANCE);
    let counts = match opts.mode {
        AbundanceMode::Auto => integral && off_simplex,
        AbundanceMode::Counts => {
            if !integral {
                return Err(CliError::Ingest(format!("{}: counts must be whole numbers", path.display())));
            }
            true
        }
        AbundanceMode::Relative => false,
    };
    if !counts {
        if let Some(&i) = keep.iter().find(|&&i| (row(i).sum::<f64>() - 1.0).abs() > RELATIVE_TOLERANCE) {
            return Err(CliError::Ingest(format!(
                "{}: relative abundances of subject {:?} sum to {}",
                path.display(),
                table.subjects[i],
                row(i).sum::<f64>()
            )));
        }
    }

    let reference = resolve_reference(&table.features, opts.reference_taxon.as_deref())?;
    let observed: Vec<bool> = (0..table.features.len())
        .map(|j| keep.iter().any(|&i| table.cells[i][j] != Some(0.0)))
        .collect();
    if !observed[reference] {
        return Err(CliError::Ingest(format!(
            "reference taxon {:?} has no nonzero reading",
            table.features[reference]
        )));
    }
    let dropped_taxa: Vec<String> = (0..table.features.len())
        .filter(|&j| !observed[j])
        .map(|j| table.features[j].clone())
        .collect();
    for name in &dropped_taxa {
        log::warn!("dropping taxon {name:?}: no nonzero reading");
    }
    let columns: Vec<usize> = (0..table.features.len())
        .filter(|&j| observed[j] && j != reference)
        .chain([reference])
        .collect();

    let mut data = TaxaData {
        subject_ids: Vec::new(),
        taxa_names: columns.iter().map(|&j| table.features[j].clone()).collect(),
        samples: Vec::new(),
        dropped_taxa,
        empty_subjects: Vec::new(),
    };
    for &i in keep {
        let raw: Vec<f64> = columns.iter().map(|&j| table.cells[i][j].expect("checked")).collect();
        if raw.iter().all(|v| *v == 0.0) {
            log::warn!("dropping subject {:?}: every reading is zero", table.subjects[i]);
            data.empty_subjects.push(table.subjects[i].clone());
            continue;
        }
        let sum: f64 = raw.iter().sum();
        if !counts && (sum - 1.0).abs() > mziln::composition::SUM_TOLERANCE {
            log::warn!("renormalizing subject {:?}: abundances sum to {sum}", table.subjects[i]);
        }
        data.samples.push(CompositionSample::normalized(raw)?);
        data.subject_ids.push(table.subjects[i].clone());
    }
    Ok(data)
}

/// Reads a taxa table on its own.
pub fn ingest_taxa(path: &Path, opts: &IngestOptions) -> Result<TaxaData> {
    let table = read_table(path, opts.orientation)?;
    let keep: Vec<usize> = (0..table.subjects.len()).collect();
    build_taxa(path, &table, &keep, opts)
}

/// Reads both tables and keeps the subjects present in both with complete
/// covariates.
pub fn ingest(taxa_path: &Path, covariate_path: &Path, opts: &IngestOptions) -> Result<Dataset> {
    let taxa = read_table(taxa_path, opts.orientation)?;
    let covs = read_table(covariate_path, opts.orientation)?;
    let cov_row: HashMap<&str, usize> = covs
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let joined: Vec<(usize, usize)> = taxa
        .subjects
        .iter()
        .enumerate()
        .filter_map(|(i, s)| cov_row.get(s.as_str()).map(|&c| (i, c)))
        .collect();
    if joined.is_empty() {
        return Err(CliError::Ingest(format!(
            "no subject appears in both {} and {}",
            taxa_path.display(),
            covariate_path.display()
        )));
    }
    let unmatched = taxa.subjects.len() + covs.subjects.len() - 2 * joined.len();
    log::info!(
        "retained {} subjects ({} in taxa table, {} in covariate table)",
        joined.len(),
        taxa.subjects.len(),
        covs.subjects.len()
    );
    let complete: Vec<(usize, usize)> = joined
        .iter()
        .copied()
        .filter(|&(_, c)| covs.cells[c].iter().all(Option::is_some))
        .collect();
    let missing_covariates = joined.len() - complete.len();
    if missing_covariates > 0 {
        log::warn!("dropped {missing_covariates} subjects with a missing covariate");
    }
    if complete.is_empty() {
        return Err(CliError::Ingest("no subject has complete covariates".into()));
    }
    let keep: Vec<usize> = complete.iter().map(|&(i, _)| i).collect();
    let taxa_data = build_taxa(taxa_path, &taxa, &keep, opts)?;
    let cov_of: HashMap<&str, usize> = complete
        .iter()
        .map(|&(i, c)| (taxa.subjects[i].as_str(), c))
        .collect();
    let covariates = taxa_data
        .subject_ids
        .iter()
        .map(|s| {
            let c = cov_of[s.as_str()];
            let x = covs.cells[c].iter().map(|v| v.expect("complete")).collect();
            Ok(CovariateRecord::new(s.clone(), x)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        taxa: taxa_data,
        covariate_names: covs.features,
        covariates,
        missing_covariates,
        unmatched,
    })
}
