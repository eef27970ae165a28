//! Tabular dataset loading, feature encoding, min-max scaling and splitting.
//!
//! Missing cells are stored as `NaN` inside [`Dataset::values`]. CSV files
//! use the literal token `NA` (an empty field is read the same way).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ImputeError, Result};
use crate::seeded_rng;

pub const NA_TOKEN: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Binary,
    Categorical,
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub name: String,
    pub kind: FeatureKind,
    /// Raw labels in code order; empty for continuous features.
    #[serde(default)]
    pub labels: Vec<String>,
}

impl FeatureSchema {
    pub fn continuous(name: impl Into<String>) -> Self {
        FeatureSchema {
            name: name.into(),
            kind: FeatureKind::Continuous,
            labels: Vec::new(),
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        FeatureSchema {
            name: name.into(),
            kind: FeatureKind::Binary,
            labels: vec!["0".into(), "1".into()],
        }
    }
}

/// Column declarations read from a schema sidecar file.
///
/// ```toml
/// [columns]
/// age = "continuous"
/// smoker = "binary"
/// grade = { kind = "ordinal", labels = ["low", "mid", "high"] }
/// ```
///
/// Undeclared columns are continuous when every field parses as a number and
/// categorical (labels in sorted order) otherwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    #[serde(default)]
    pub columns: BTreeMap<String, ColumnSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnSpec {
    Kind(FeatureKind),
    Detailed {
        kind: FeatureKind,
        #[serde(default)]
        labels: Vec<String>,
    },
}

impl ColumnSpec {
    fn kind(&self) -> FeatureKind {
        match self {
            ColumnSpec::Kind(k) | ColumnSpec::Detailed { kind: k, .. } => *k,
        }
    }

    fn labels(&self) -> &[String] {
        match self {
            ColumnSpec::Kind(_) => &[],
            ColumnSpec::Detailed { labels, .. } => labels,
        }
    }
}

impl SchemaSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ImputeError::Config(format!("schema: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ImputeError::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

/// Per-feature `(min, max)` fitted on observed training cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    /// Fits on the non-missing cells of `values`.
    pub fn fit(values: &DMatrix<f64>, names: &[String]) -> Result<Self> {
        let mut min = Vec::with_capacity(values.ncols());
        let mut max = Vec::with_capacity(values.ncols());
        for (j, col) in values.column_iter().enumerate() {
            let observed = col.iter().copied().filter(|v| !v.is_nan());
            let (lo, hi) = observed.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
            if lo > hi {
                return Err(ImputeError::Normalization {
                    feature: names.get(j).cloned().unwrap_or_else(|| format!("#{j}")),
                    reason: "no observed values in the training split".into(),
                });
            }
            min.push(lo);
            max.push(hi);
        }
        Ok(MinMax { min, max })
    }

    /// `(x - min) / (max - min)`; constant features map to 0. Missing stays missing,
    /// values outside the fitted range are not clipped.
    pub fn apply(&self, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(values)?;
        let mut out = values.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (lo, range) = (self.min[j], self.max[j] - self.min[j]);
            for v in col.iter_mut() {
                if v.is_nan() {
                    continue;
                }
                *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
            }
        }
        Ok(out)
    }

    pub fn invert(&self, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(values)?;
        let mut out = values.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (lo, range) = (self.min[j], self.max[j] - self.min[j]);
            for v in col.iter_mut() {
                *v = lo + *v * range;
            }
        }
        Ok(out)
    }

    fn check(&self, values: &DMatrix<f64>) -> Result<()> {
        if values.ncols() != self.min.len() {
            return Err(ImputeError::shape("normalization", self.min.len(), values.ncols()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × K`, rows are samples; `NaN` marks a missing cell.
    pub values: DMatrix<f64>,
    pub schema: Vec<FeatureSchema>,
    pub normalization: Option<MinMax>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(values: DMatrix<f64>, schema: Vec<FeatureSchema>) -> Result<Self> {
        if values.ncols() != schema.len() {
            return Err(ImputeError::shape("dataset schema", values.ncols(), schema.len()));
        }
        Ok(Dataset {
            values,
            schema,
            normalization: None,
            split: SplitTag::Full,
        })
    }

    /// All-continuous dataset with generated column names `x0, x1, ...`.
    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        let schema = (0..values.ncols())
            .map(|j| FeatureSchema::continuous(format!("x{j}")))
            .collect();
        Dataset {
            values,
            schema,
            normalization: None,
            split: SplitTag::Full,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn names(&self) -> Vec<String> {
        self.schema.iter().map(|f| f.name.clone()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|f| f.name == name)
    }

    /// Removes one column, returning it separately (used for label columns).
    pub fn take_column(&self, name: &str) -> Result<(Dataset, Vec<f64>)> {
        let j = self
            .column_index(name)
            .ok_or_else(|| ImputeError::Config(format!("no column named '{name}'")))?;
        let column = self.values.column(j).iter().copied().collect();
        let mut schema = self.schema.clone();
        schema.remove(j);
        let values = self.values.clone().remove_column(j);
        Ok((
            Dataset {
                values,
                schema,
                normalization: None,
                split: self.split,
            },
            column,
        ))
    }

    pub fn select_rows(&self, rows: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            values: self.values.select_rows(rows),
            schema: self.schema.clone(),
            normalization: self.normalization.clone(),
            split,
        }
    }

    /// Fits min-max parameters on this (training) dataset and applies them.
    pub fn minmax_fit_transform(&self) -> Result<(Dataset, MinMax)> {
        let params = MinMax::fit(&self.values, &self.names())?;
        let out = self.minmax_apply(&params)?;
        Ok((out, params))
    }

    pub fn minmax_apply(&self, params: &MinMax) -> Result<Dataset> {
        Ok(Dataset {
            values: params.apply(&self.values)?,
            schema: self.schema.clone(),
            normalization: Some(params.clone()),
            split: self.split,
        })
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }
}

pub fn load_csv(path: &Path, spec: &SchemaSpec) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| ImputeError::io(path, e))?;
    parse_csv(&text, spec)
}

pub fn parse_csv(text: &str, spec: &SchemaSpec) -> Result<Dataset> {
    let (header, rows) = read_records(text)?;
    for name in spec.columns.keys() {
        if !header.contains(name) {
            return Err(ImputeError::Config(format!(
                "schema declares column '{name}' which is not in the header"
            )));
        }
    }

    let n = rows.len();
    let k = header.len();
    let mut values = DMatrix::<f64>::zeros(n, k);
    let mut schema = Vec::with_capacity(k);
    for (j, name) in header.iter().enumerate() {
        let column: Vec<&str> = rows.iter().map(|r| r[j].as_str()).collect();
        let feature = encode_column(name, &column, spec.columns.get(name), |i, v| {
            values[(i, j)] = v;
        })?;
        schema.push(feature);
    }
    Dataset::new(values, schema)
}

fn is_na(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f == NA_TOKEN
}

fn encode_column(
    name: &str,
    column: &[&str],
    declared: Option<&ColumnSpec>,
    mut set: impl FnMut(usize, f64),
) -> Result<FeatureSchema> {
    let numeric_ok = column
        .iter()
        .all(|f| is_na(f) || f.trim().parse::<f64>().is_ok());
    let kind = match declared {
        Some(spec) => spec.kind(),
        None if numeric_ok => FeatureKind::Continuous,
        None => FeatureKind::Categorical,
    };

    if kind == FeatureKind::Continuous {
        for (i, field) in column.iter().enumerate() {
            let v = if is_na(field) {
                f64::NAN
            } else {
                field.trim().parse::<f64>().map_err(|e| ImputeError::Parse {
                    row: i + 1,
                    column: name.to_string(),
                    message: format!("'{field}' is not a number ({e})"),
                })?
            };
            set(i, v);
        }
        return Ok(FeatureSchema::continuous(name));
    }

    let declared_labels = declared.map(ColumnSpec::labels).unwrap_or(&[]);
    let labels: Vec<String> = if declared_labels.is_empty() {
        let distinct: BTreeSet<&str> = column
            .iter()
            .filter(|f| !is_na(f))
            .map(|f| f.trim())
            .collect();
        distinct.into_iter().map(str::to_string).collect()
    } else {
        let unique: BTreeSet<&String> = declared_labels.iter().collect();
        if unique.len() != declared_labels.len() {
            return Err(ImputeError::Config(format!(
                "column '{name}' declares duplicate labels"
            )));
        }
        declared_labels.to_vec()
    };
    if kind == FeatureKind::Binary && labels.len() > 2 {
        return Err(ImputeError::Structure(format!(
            "binary column '{name}' has {} distinct labels",
            labels.len()
        )));
    }

    let codes: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(c, l)| (l.as_str(), c))
        .collect();
    for (i, field) in column.iter().enumerate() {
        if is_na(field) {
            set(i, f64::NAN);
            continue;
        }
        let code = codes.get(field.trim()).ok_or_else(|| ImputeError::Parse {
            row: i + 1,
            column: name.to_string(),
            message: format!("label '{field}' is not declared for this column"),
        })?;
        set(i, *code as f64);
    }
    let labels = if kind == FeatureKind::Binary && labels.len() < 2 {
        // A binary column that happens to show one label still encodes to {0, 1}.
        let mut l = labels;
        while l.len() < 2 {
            l.push(format!("<unseen{}>", l.len()));
        }
        l
    } else {
        labels
    };
    Ok(FeatureSchema {
        name: name.to_string(),
        kind,
        labels,
    })
}

/// Reads a headered CSV into raw string records, rejecting ragged rows.
pub(crate) fn read_records(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ImputeError::Structure(format!("header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(ImputeError::Structure("missing header row".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| ImputeError::Structure(format!("row {}: {e}", i + 1)))?;
        if rec.len() != header.len() {
            return Err(ImputeError::Structure(format!(
                "row {} has {} fields, header has {}",
                i + 1,
                rec.len(),
                header.len()
            )));
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Writes a matrix as CSV; `NaN` cells become `NA`.
pub fn format_csv(header: &[String], values: &DMatrix<f64>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..values.nrows() {
        let row: Vec<String> = (0..values.ncols())
            .map(|j| {
                let v = values[(i, j)];
                if v.is_nan() {
                    NA_TOKEN.to_string()
                } else {
                    v.to_string()
                }
            })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, header: &[String], values: &DMatrix<f64>) -> Result<()> {
    fs::write(path, format_csv(header, values)).map_err(|e| ImputeError::io(path, e))
}

/// Seeded row partition; the test part has `round(n · test_fraction)` rows,
/// kept within `[1, n - 1]`. Both parts preserve the original row order.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ImputeError::Split(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = data.n_rows();
    if n < 2 {
        return Err(ImputeError::Split(format!("need at least 2 rows, got {n}")));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((
        data.select_rows(&train, SplitTag::Train),
        data.select_rows(&test, SplitTag::Test),
    ))
}
