//! Multi-label datasets: loading (MULAN-style ARFF, CSV), label selection and
//! random train/test splitting.
//!
//! ARFF support covers the subset used by the MULAN distributions: numeric
//! attributes, binary nominal `{0,1}` attributes, dense and sparse instance
//! lines and `%` comments. Anything else (strings, dates, relational
//! attributes, missing values) is rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature matrix plus binary label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    labels: DMatrix<f64>,
    feature_names: Vec<String>,
    label_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        labels: DMatrix<f64>,
        feature_names: Vec<String>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = features.shape();
        let (n_lab, q) = labels.shape();
        if n == 0 || p == 0 || q == 0 {
            return Err(Error::Schema(format!(
                "dataset must have n, p, q >= 1 (got n={n}, p={p}, q={q})"
            )));
        }
        if n != n_lab {
            return Err(Error::dim(format!("features have {n} rows but labels have {n_lab}")));
        }
        if feature_names.len() != p || label_names.len() != q {
            return Err(Error::dim("name lists do not match matrix widths"));
        }
        if let Some(v) = labels.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Schema(format!("label matrix contains non-binary value {v}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("feature matrix contains non-finite values".into()));
        }
        Ok(Self {
            features,
            labels,
            feature_names,
            label_names,
        })
    }

    /// Builds a dataset with generated column names (`x0..`, `y0..`).
    pub fn from_matrices(features: DMatrix<f64>, labels: DMatrix<f64>) -> Result<Self> {
        let feature_names = (0..features.ncols()).map(|j| format!("x{j}")).collect();
        let label_names = (0..labels.ncols()).map(|j| format!("y{j}")).collect();
        Self::new(features, labels, feature_names, label_names)
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &DMatrix<f64> {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn feature_row(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    pub fn label_row(&self, i: usize) -> DVector<f64> {
        self.labels.row(i).transpose()
    }

    /// Positive count of every label column.
    pub fn label_counts(&self) -> Vec<usize> {
        self.labels
            .column_iter()
            .map(|c| c.iter().filter(|&&v| v == 1.0).count())
            .collect()
    }

    /// Copies the given rows (in the given order) into a new dataset.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::arg("row selection is empty"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= self.n_samples()) {
            return Err(Error::arg(format!("row index {r} out of range")));
        }
        let features = self.features.select_rows(rows);
        let labels = self.labels.select_rows(rows);
        Ok(Self {
            features,
            labels,
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
        })
    }

    fn select_label_columns(&self, cols: &[usize]) -> Self {
        Self {
            features: self.features.clone(),
            labels: self.labels.select_columns(cols),
            feature_names: self.feature_names.clone(),
            label_names: cols.iter().map(|&c| self.label_names[c].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    ArffDense,
    ArffSparse,
    Csv,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "arff_dense" | "arff" => Ok(DataFormat::ArffDense),
            "arff_sparse" => Ok(DataFormat::ArffSparse),
            "csv" => Ok(DataFormat::Csv),
            other => Err(Error::arg(format!("unknown data format '{other}'"))),
        }
    }
}

/// Which columns of a file are labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpec {
    /// Explicit label column names.
    Names(Vec<String>),
    /// The last `k` columns are labels.
    Last(usize),
    /// MULAN XML label file; its `<label name="...">` entries name the labels.
    Xml(PathBuf),
}

impl LabelSpec {
    fn resolve(&self, columns: &[String]) -> Result<Vec<usize>> {
        match self {
            LabelSpec::Last(k) => {
                if *k == 0 || *k >= columns.len() {
                    return Err(Error::Schema(format!(
                        "cannot take the last {k} of {} columns as labels",
                        columns.len()
                    )));
                }
                Ok((columns.len() - k..columns.len()).collect())
            }
            LabelSpec::Names(names) => {
                if names.is_empty() {
                    return Err(Error::Schema("label name list is empty".into()));
                }
                names
                    .iter()
                    .map(|name| {
                        columns
                            .iter()
                            .position(|c| c == name)
                            .ok_or_else(|| Error::Schema(format!("label column '{name}' not found")))
                    })
                    .collect()
            }
            LabelSpec::Xml(path) => LabelSpec::Names(read_mulan_labels(path)?).resolve(columns),
        }
    }
}

/// Extracts label names from a MULAN XML label file.
pub fn read_mulan_labels(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let re = Regex::new(r#"<label\s+name\s*=\s*(?:"([^"]*)"|'([^']*)')"#).expect("static regex");
    let names: Vec<String> = re
        .captures_iter(&text)
        .map(|c| unescape_xml(c.get(1).or_else(|| c.get(2)).map_or("", |m| m.as_str())))
        .collect();
    if names.is_empty() {
        return Err(Error::Schema(format!(
            "no <label name=...> entries in {}",
            path.display()
        )));
    }
    Ok(names)
}

fn unescape_xml(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

pub fn load_dataset(path: &Path, format: DataFormat, labels: &LabelSpec) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let table = match format {
        DataFormat::ArffDense => parse_arff(&text, path, false)?,
        DataFormat::ArffSparse => parse_arff(&text, path, true)?,
        DataFormat::Csv => parse_csv(&text, path)?,
    };
    table.into_dataset(labels)
}

/// Column kinds recognised by the ARFF reader.
#[derive(Debug, Clone, PartialEq)]
enum ColumnKind {
    Numeric,
    /// Binary nominal; `zero_first` records the declaration order so that
    /// omitted sparse entries map to the first declared value.
    Binary {
        zero_first: bool,
    },
}

struct Table {
    names: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn into_dataset(self, spec: &LabelSpec) -> Result<Dataset> {
        let label_cols = spec.resolve(&self.names)?;
        for &c in &label_cols {
            let binary = self.rows.iter().all(|r| r[c] == 0.0 || r[c] == 1.0);
            if !binary {
                return Err(Error::Schema(format!("label column '{}' is not binary", self.names[c])));
            }
        }
        let feature_cols: Vec<usize> = (0..self.names.len()).filter(|c| !label_cols.contains(c)).collect();
        let n = self.rows.len();
        if n == 0 {
            return Err(Error::Schema("file contains no instances".into()));
        }
        let features = DMatrix::from_fn(n, feature_cols.len(), |i, j| self.rows[i][feature_cols[j]]);
        let labels = DMatrix::from_fn(n, label_cols.len(), |i, j| self.rows[i][label_cols[j]]);
        Dataset::new(
            features,
            labels,
            feature_cols.iter().map(|&c| self.names[c].clone()).collect(),
            label_cols.iter().map(|&c| self.names[c].clone()).collect(),
        )
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Splits off one ARFF token (possibly quoted) from the front of `s`.
fn take_token(s: &str) -> Option<(String, &str)> {
    let s = s.trim_start();
    let mut chars = s.char_indices();
    let (_, first) = chars.next()?;
    if first == '\'' || first == '"' {
        let mut out = String::new();
        let mut escaped = false;
        for (i, c) in chars {
            if escaped {
                out.push(c);
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == first {
                return Some((out, &s[i + c.len_utf8()..]));
            } else {
                out.push(c);
            }
        }
        None
    } else {
        let end = s.find(|c: char| c.is_whitespace() || c == '{').unwrap_or(s.len());
        Some((s[..end].to_string(), &s[end..]))
    }
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    if s.len() >= 2 && ((s.starts_with('\'') && s.ends_with('\'')) || (s.starts_with('"') && s.ends_with('"'))) {
        &s[1..s.len() - 1]
    } else {
        s
    }
}

fn parse_attribute(rest: &str, path: &Path, line: usize) -> Result<(String, ColumnKind)> {
    let (name, ty) = take_token(rest).ok_or_else(|| parse_err(path, line, "attribute without a name"))?;
    let ty = ty.trim();
    if ty.starts_with('{') {
        let inner = ty
            .strip_prefix('{')
            .and_then(|t| t.strip_suffix('}'))
            .ok_or_else(|| parse_err(path, line, "unterminated nominal value list"))?;
        let values: Vec<&str> = inner.split(',').map(unquote).collect();
        return match values.as_slice() {
            ["0", "1"] => Ok((name, ColumnKind::Binary { zero_first: true })),
            ["1", "0"] => Ok((name, ColumnKind::Binary { zero_first: false })),
            _ => Err(Error::Schema(format!(
                "attribute '{name}' (line {line}) is nominal but not binary {{0,1}}"
            ))),
        };
    }
    match ty.to_ascii_lowercase().as_str() {
        "numeric" | "real" | "integer" => Ok((name, ColumnKind::Numeric)),
        other => Err(Error::Schema(format!(
            "attribute '{name}' (line {line}) has unsupported type '{other}'"
        ))),
    }
}

fn parse_value(raw: &str, kind: &ColumnKind, path: &Path, line: usize) -> Result<f64> {
    let v = unquote(raw);
    if v == "?" {
        return Err(parse_err(path, line, "missing values are not supported"));
    }
    match kind {
        ColumnKind::Numeric => v
            .parse::<f64>()
            .map_err(|_| parse_err(path, line, format!("cannot parse '{v}' as a number"))),
        ColumnKind::Binary { .. } => match v {
            "0" => Ok(0.0),
            "1" => Ok(1.0),
            _ => Err(parse_err(path, line, format!("'{v}' is not a declared {{0,1}} value"))),
        },
    }
}

fn parse_arff(text: &str, path: &Path, allow_sparse: bool) -> Result<Table> {
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let mut rows = Vec::new();
    let mut in_data = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        if !in_data {
            let lower = line.to_ascii_lowercase();
            if lower.starts_with("@relation") {
                continue;
            } else if lower.starts_with("@attribute") {
                let (name, kind) = parse_attribute(&line["@attribute".len()..], path, line_no)?;
                names.push(name);
                kinds.push(kind);
            } else if lower.starts_with("@data") {
                if names.is_empty() {
                    return Err(parse_err(path, line_no, "@data before any @attribute"));
                }
                in_data = true;
            } else {
                return Err(parse_err(path, line_no, format!("unexpected header line '{line}'")));
            }
            continue;
        }

        let row = if line.starts_with('{') {
            if !allow_sparse {
                return Err(parse_err(path, line_no, "sparse instance in a dense ARFF file"));
            }
            let inner = line
                .strip_prefix('{')
                .and_then(|l| l.strip_suffix('}'))
                .ok_or_else(|| parse_err(path, line_no, "unterminated sparse instance"))?;
            let mut row: Vec<f64> = kinds
                .iter()
                .map(|k| match k {
                    ColumnKind::Binary { zero_first: false } => 1.0,
                    _ => 0.0,
                })
                .collect();
            for entry in inner.split(',').map(str::trim).filter(|e| !e.is_empty()) {
                let (index, value) = entry
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| parse_err(path, line_no, format!("bad sparse entry '{entry}'")))?;
                let index: usize = index
                    .parse()
                    .map_err(|_| parse_err(path, line_no, format!("bad sparse index '{index}'")))?;
                if index >= kinds.len() {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("sparse index {index} exceeds attribute count {}", kinds.len()),
                    ));
                }
                row[index] = parse_value(value, &kinds[index], path, line_no)?;
            }
            row
        } else {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != kinds.len() {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected {} values, found {}", kinds.len(), fields.len()),
                ));
            }
            fields
                .iter()
                .zip(&kinds)
                .map(|(f, k)| parse_value(f, k, path, line_no))
                .collect::<Result<Vec<f64>>>()?
        };
        rows.push(row);
    }
    if !in_data {
        return Err(parse_err(path, text.lines().count(), "missing @data section"));
    }
    Ok(Table { names, rows })
}

fn parse_csv(text: &str, path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line_no = i + 2;
        let record = record.map_err(|e| parse_err(path, line_no, e.to_string()))?;
        if record.len() != names.len() {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {} values, found {}", names.len(), record.len()),
            ));
        }
        let row = record
            .iter()
            .map(|f| parse_value(f, &ColumnKind::Numeric, path, line_no))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table { names, rows })
}

fn arff_name(name: &str) -> String {
    if name.is_empty()
        || name
            .chars()
            .any(|c| c.is_whitespace() || matches!(c, '\'' | '"' | ',' | '{' | '}' | '%' | '\\'))
    {
        format!("'{}'", name.replace('\\', "\\\\").replace('\'', "\\'"))
    } else {
        name.to_string()
    }
}

/// Renders a dataset as dense ARFF (features numeric, labels `{0,1}`, labels last).
pub fn to_arff_string(d: &Dataset, relation: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "@relation {}\n", arff_name(relation));
    for name in &d.feature_names {
        let _ = writeln!(out, "@attribute {} numeric", arff_name(name));
    }
    for name in &d.label_names {
        let _ = writeln!(out, "@attribute {} {{0,1}}", arff_name(name));
    }
    out.push_str("\n@data\n");
    for i in 0..d.n_samples() {
        let feats = d.features.row(i).iter().map(|v| v.to_string()).collect::<Vec<_>>();
        let labs = d
            .labels
            .row(i)
            .iter()
            .map(|&v| if v == 1.0 { "1" } else { "0" })
            .collect::<Vec<_>>();
        out.push_str(&feats.join(","));
        out.push(',');
        out.push_str(&labs.join(","));
        out.push('\n');
    }
    out
}

pub fn write_arff(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_arff_string(d, "dataset"))?;
    Ok(())
}

/// Keeps the `k` most frequent labels; ties keep the original column order.
pub fn select_top_labels(d: &Dataset, k: usize) -> Result<Dataset> {
    let q = d.n_labels();
    if k < 1 || k > q {
        return Err(Error::arg(format!("k must lie in 1..={q}, got {k}")));
    }
    let counts = d.label_counts();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(d.select_label_columns(&order))
}

/// Row indices of a seeded uniform split; both lists are sorted ascending.
pub fn split_indices(n: usize, n_train: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_train < 1 || n_train >= n {
        return Err(Error::arg(format!(
            "n_train must satisfy 1 <= n_train < n = {n}, got {n_train}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = rand::seq::index::sample(&mut rng, n, n_train).into_vec();
    train.sort_unstable();
    let mut in_train = vec![false; n];
    for &i in &train {
        in_train[i] = true;
    }
    let test = (0..n).filter(|&i| !in_train[i]).collect();
    Ok((train, test))
}

pub fn random_split(d: &Dataset, n_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(d.n_samples(), n_train, seed)?;
    Ok((d.select_rows(&train)?, d.select_rows(&test)?))
}
