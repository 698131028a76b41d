//! Loading a SUR system from a CSV table and a model specification.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurError};
use crate::model::{Equation, SurSystem};

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquationSpec {
    pub response: String,
    #[serde(default)]
    pub regressors: Vec<String>,
    #[serde(default = "yes")]
    pub intercept: bool,
    /// Defaults to the response name.
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub equations: Vec<EquationSpec>,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| SurError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a `.toml` file as TOML and anything else as JSON.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml(&text),
            _ => Self::from_json(&text),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.equations.is_empty() {
            return Err(SurError::Spec("model has no equations".into()));
        }
        for (i, eq) in self.equations.iter().enumerate() {
            if eq.regressors.is_empty() && !eq.intercept {
                return Err(SurError::Spec(format!("equation {} ({}) has no regressors", i + 1, eq.response)));
            }
        }
        Ok(())
    }

    /// Every column the model reads, in first-use order.
    pub fn columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for eq in &self.equations {
            for c in std::iter::once(&eq.response).chain(&eq.regressors) {
                if !out.contains(&c.as_str()) {
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Numeric columns read from a headed CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    pub headers: Vec<String>,
    pub columns: HashMap<String, Vec<f64>>,
    pub n: usize,
}

impl DataTable {
    /// Parses the named columns of a headed CSV. Missing columns are reported
    /// together; a cell that is not a finite number is reported with its
    /// 1-based data row and column name.
    pub fn read<R: Read>(reader: R, wanted: &[&str]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let missing: Vec<&str> = wanted.iter().copied().filter(|w| !headers.iter().any(|h| h == w)).collect();
        if !missing.is_empty() {
            return Err(SurError::InvalidInput(format!("missing columns: {}", missing.join(", "))));
        }
        let idx: Vec<(String, usize)> = wanted
            .iter()
            .map(|w| (w.to_string(), headers.iter().position(|h| h == w).unwrap()))
            .collect();
        let mut columns: HashMap<String, Vec<f64>> = idx.iter().map(|(w, _)| (w.clone(), Vec::new())).collect();
        let mut n = 0;
        for rec in rdr.records() {
            let rec = rec?;
            n += 1;
            for (name, j) in &idx {
                let raw = rec.get(*j).unwrap_or("");
                let v = raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    SurError::InvalidInput(format!("non-finite value {raw:?} at row {n}, column {name}"))
                })?;
                columns.get_mut(name).unwrap().push(v);
            }
        }
        Ok(DataTable { headers, columns, n })
    }

    pub fn from_path(path: &Path, wanted: &[&str]) -> Result<Self> {
        Self::read(std::fs::File::open(path)?, wanted)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| SurError::InvalidInput(format!("missing columns: {name}")))
    }
}

/// Builds the system described by `spec` from `table`. An intercept, when
/// requested, is the first coefficient and is named `(Intercept)`.
pub fn build_system(spec: &ModelSpec, table: &DataTable) -> Result<SurSystem> {
    let n = table.n;
    let equations = spec
        .equations
        .iter()
        .map(|es| {
            let y = DVector::from_column_slice(table.column(&es.response)?);
            let mut names = Vec::new();
            let mut cols: Vec<&[f64]> = Vec::new();
            let ones = vec![1.0; n];
            if es.intercept {
                names.push("(Intercept)".to_string());
            }
            for r in &es.regressors {
                names.push(r.clone());
                cols.push(table.column(r)?);
            }
            let offset = usize::from(es.intercept);
            let x = DMatrix::from_fn(n, names.len(), |k, j| {
                if j < offset {
                    ones[k]
                } else {
                    cols[j - offset][k]
                }
            });
            let label = es.label.clone().unwrap_or_else(|| es.response.clone());
            Ok(Equation::new(y, x).with_names(label, names))
        })
        .collect::<Result<Vec<_>>>()?;
    SurSystem::new(equations)
}

pub fn load_system(data: &Path, model: &Path) -> Result<SurSystem> {
    let spec = ModelSpec::from_path(model)?;
    let table = DataTable::from_path(data, &spec.columns())?;
    build_system(&spec, &table)
}
