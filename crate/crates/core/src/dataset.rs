//! Combined source/target dataset.
//!
//! Rows with `group = 1` come from the labeled source domain and carry a
//! treatment and an outcome. Rows with `group = 0` come from the target
//! domain and carry covariates only.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}, column `{column}`: {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("dataset failed validation: {0}")]
    Invalid(ValidationReport),

    #[error("dimension mismatch: {0}")]
    Shape(String),
}

/// One broken invariant, optionally tied to a row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub row: Option<usize>,
    pub rule: Rule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    InvalidGroup,
    InvalidTreatment,
    TreatmentMissingInSource,
    OutcomeMissingInSource,
    TreatmentPresentInTarget,
    OutcomePresentInTarget,
    NonFiniteCovariate,
    NonFiniteOutcome,
    SourceEmpty,
    TargetEmpty,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::InvalidGroup => "group must be 0 or 1",
            Rule::InvalidTreatment => "treatment must be 0 or 1",
            Rule::TreatmentMissingInSource => "treatment missing where group=1",
            Rule::OutcomeMissingInSource => "outcome missing where group=1",
            Rule::TreatmentPresentInTarget => "treatment present where group=0",
            Rule::OutcomePresentInTarget => "outcome present where group=0",
            Rule::NonFiniteCovariate => "non-finite covariate",
            Rule::NonFiniteOutcome => "non-finite outcome",
            Rule::SourceEmpty => "source domain empty",
            Rule::TargetEmpty => "target domain empty",
        };
        f.write_str(s)
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.row {
            Some(r) => write!(f, "row {r}: {}", self.rule),
            None => write!(f, "{}", self.rule),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Row-wise storage of both domains. Covariates are dense and row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedDataset {
    n_features: usize,
    covariates: Vec<f64>,
    group: Vec<u8>,
    treatment: Vec<Option<u8>>,
    outcome: Vec<Option<f64>>,
}

impl CombinedDataset {
    /// Assembles a dataset without checking invariants. Use [`validate`] or
    /// [`CombinedDataset::new`] before handing it to estimators.
    pub fn from_parts(
        n_features: usize,
        covariates: Vec<f64>,
        group: Vec<u8>,
        treatment: Vec<Option<u8>>,
        outcome: Vec<Option<f64>>,
    ) -> Result<Self, DataError> {
        let n = group.len();
        if covariates.len() != n * n_features {
            return Err(DataError::Shape(format!(
                "{} covariate entries for {n} rows x {n_features} columns",
                covariates.len()
            )));
        }
        if treatment.len() != n || outcome.len() != n {
            return Err(DataError::Shape(format!(
                "group has {n} rows, treatment {}, outcome {}",
                treatment.len(),
                outcome.len()
            )));
        }
        Ok(Self {
            n_features,
            covariates,
            group,
            treatment,
            outcome,
        })
    }

    /// Assembles and validates.
    pub fn new(
        n_features: usize,
        covariates: Vec<f64>,
        group: Vec<u8>,
        treatment: Vec<Option<u8>>,
        outcome: Vec<Option<f64>>,
    ) -> Result<Self, DataError> {
        let ds = Self::from_parts(n_features, covariates, group, treatment, outcome)?;
        let report = validate(&ds);
        if report.is_empty() {
            Ok(ds)
        } else {
            Err(DataError::Invalid(report))
        }
    }

    pub fn len(&self) -> usize {
        self.group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn group(&self, i: usize) -> u8 {
        self.group[i]
    }

    pub fn groups(&self) -> &[u8] {
        &self.group
    }

    pub fn is_source(&self, i: usize) -> bool {
        self.group[i] == 1
    }

    pub fn treatment(&self, i: usize) -> Option<u8> {
        self.treatment[i]
    }

    pub fn outcome(&self, i: usize) -> Option<f64> {
        self.outcome[i]
    }

    pub fn n_source(&self) -> usize {
        self.group.iter().filter(|&&g| g == 1).count()
    }

    pub fn n_target(&self) -> usize {
        self.group.iter().filter(|&&g| g == 0).count()
    }

    /// Source fraction q = n₁ / n.
    pub fn source_fraction(&self) -> f64 {
        self.n_source() as f64 / self.len() as f64
    }

    pub fn source_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_source(i)).collect()
    }

    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_source(i)).collect()
    }

    /// Writes the dataset in the CSV exchange format. Covariate columns are
    /// named by `names`; numbers use the shortest round-trip representation.
    pub fn write_csv<W: Write>(&self, writer: W, names: &[String]) -> Result<(), DataError> {
        if names.len() != self.n_features {
            return Err(DataError::Schema(format!(
                "{} covariate names for {} columns",
                names.len(),
                self.n_features
            )));
        }
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
        header.extend(["g", "a", "y"]);
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.group[i].to_string());
            rec.push(self.treatment[i].map(|a| a.to_string()).unwrap_or_default());
            rec.push(self.outcome[i].map(|y| y.to_string()).unwrap_or_default());
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path, names: &[String]) -> Result<(), DataError> {
        self.write_csv(File::create(path)?, names)
    }

    /// Default covariate names `x1..xp`.
    pub fn default_names(&self) -> Vec<String> {
        (1..=self.n_features).map(|j| format!("x{j}")).collect()
    }
}

fn csv_io(e: csv::Error) -> DataError {
    DataError::Io(std::io::Error::other(e))
}

/// Checks every dataset invariant and lists the violations.
pub fn validate(ds: &CombinedDataset) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |row, rule| violations.push(Violation { row, rule });
    for i in 0..ds.len() {
        if ds.row(i).iter().any(|v| !v.is_finite()) {
            push(Some(i), Rule::NonFiniteCovariate);
        }
        match ds.group[i] {
            1 => {
                match ds.treatment[i] {
                    None => push(Some(i), Rule::TreatmentMissingInSource),
                    Some(a) if a > 1 => push(Some(i), Rule::InvalidTreatment),
                    Some(_) => {}
                }
                match ds.outcome[i] {
                    None => push(Some(i), Rule::OutcomeMissingInSource),
                    Some(y) if !y.is_finite() => push(Some(i), Rule::NonFiniteOutcome),
                    Some(_) => {}
                }
            }
            0 => {
                if ds.treatment[i].is_some() {
                    push(Some(i), Rule::TreatmentPresentInTarget);
                }
                if ds.outcome[i].is_some() {
                    push(Some(i), Rule::OutcomePresentInTarget);
                }
            }
            _ => push(Some(i), Rule::InvalidGroup),
        }
    }
    if ds.n_source() == 0 {
        push(None, Rule::SourceEmpty);
    }
    if ds.n_target() == 0 {
        push(None, Rule::TargetEmpty);
    }
    ValidationReport { violations }
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Covariate column names; `None` takes every column before the group column.
    pub covariates: Option<Vec<String>>,
    pub group: String,
    pub treatment: String,
    pub outcome: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            covariates: None,
            group: "g".into(),
            treatment: "a".into(),
            outcome: "y".into(),
        }
    }
}

/// A dataset together with the covariate names it was read with.
#[derive(Debug, Clone)]
pub struct NamedDataset {
    pub names: Vec<String>,
    pub data: CombinedDataset,
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<NamedDataset, DataError> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    ingest_csv_str(&text, schema)
}

pub fn ingest_csv_str(text: &str, schema: &CsvSchema) -> Result<NamedDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Schema(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);

    let g_col = find(&schema.group)
        .ok_or_else(|| DataError::Schema(format!("missing group column `{}`", schema.group)))?;
    let a_col = find(&schema.treatment);
    let y_col = find(&schema.outcome);
    let names: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => header[..g_col].to_vec(),
    };
    if names.is_empty() {
        return Err(DataError::Schema("no covariate columns".into()));
    }
    let x_cols = names
        .iter()
        .map(|n| find(n).ok_or_else(|| DataError::Schema(format!("missing covariate column `{n}`"))))
        .collect::<Result<Vec<_>, _>>()?;

    let p = names.len();
    let mut covariates = Vec::new();
    let mut group = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let rec = rec.map_err(|e| DataError::Parse {
            line,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let perr = |c: usize, message: String| DataError::Parse {
            line,
            column: header[c].clone(),
            message,
        };
        for &c in &x_cols {
            let v: f64 = cell(c)
                .parse()
                .map_err(|_| perr(c, format!("not a number: `{}`", cell(c))))?;
            covariates.push(v);
        }
        let g = match cell(g_col) {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(perr(g_col, format!("group must be literally 0 or 1, got `{other}`"))),
        };
        group.push(g);
        let a = match a_col.map(cell) {
            None | Some("") => None,
            Some("0") => Some(0u8),
            Some("1") => Some(1u8),
            Some(other) => {
                return Err(perr(a_col.unwrap(), format!("treatment must be 0 or 1, got `{other}`")))
            }
        };
        treatment.push(a);
        let y = match y_col.map(cell) {
            None | Some("") => None,
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|_| perr(y_col.unwrap(), format!("not a number: `{s}`")))?,
            ),
        };
        outcome.push(y);
    }
    let data = CombinedDataset::new(p, covariates, group, treatment, outcome)?;
    Ok(NamedDataset { names, data })
}

/// Potential outcomes attached to a simulated dataset. Evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
}

impl PotentialOutcomes {
    pub fn len(&self) -> usize {
        self.y1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y1.is_empty()
    }

    /// Checks that observed source outcomes equal A·Y(1) + (1−A)·Y(0).
    pub fn is_consistent_with(&self, ds: &CombinedDataset) -> bool {
        if self.y1.len() != ds.len() || self.y0.len() != ds.len() {
            return false;
        }
        (0..ds.len()).all(|i| match (ds.treatment(i), ds.outcome(i)) {
            (Some(1), Some(y)) => y == self.y1[i],
            (Some(0), Some(y)) => y == self.y0[i],
            (None, None) => !ds.is_source(i),
            _ => false,
        })
    }
}
