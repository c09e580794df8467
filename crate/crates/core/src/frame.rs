//! Columnar numeric table, CSV ingestion, label derivation and
//! stratified splitting.
//!
//! A [`Frame`] stores one `f64` vector per column plus a parallel missingness
//! mask. Masked cells hold `0.0` and are never read by any computation; use
//! [`Frame::get`] for mask-aware access.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Feature,
    Label,
    Id,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub role: ColumnRole,
}

impl ColumnMeta {
    pub fn feature(name: impl Into<String>) -> Self {
        ColumnMeta {
            name: name.into(),
            role: ColumnRole::Feature,
        }
    }

    pub fn label(name: impl Into<String>) -> Self {
        ColumnMeta {
            name: name.into(),
            role: ColumnRole::Label,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    columns: Vec<ColumnMeta>,
    data: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
    n_rows: usize,
}

impl Frame {
    /// Builds a frame, validating shapes and column names. Values under a set
    /// mask bit are zeroed.
    pub fn new(columns: Vec<ColumnMeta>, mut data: Vec<Vec<f64>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        if columns.len() != data.len() || columns.len() != mask.len() {
            return Err(Error::Schema(format!(
                "{} column headers but {} data vectors and {} masks",
                columns.len(),
                data.len(),
                mask.len()
            )));
        }
        let n_rows = data.first().map_or(0, Vec::len);
        let mut seen = HashSet::new();
        let mut labels = 0;
        for (j, meta) in columns.iter().enumerate() {
            if meta.name.is_empty() {
                return Err(Error::Schema(format!("column {j} has an empty name")));
            }
            if !seen.insert(meta.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name `{}`", meta.name)));
            }
            if meta.role == ColumnRole::Label {
                labels += 1;
            }
            if data[j].len() != n_rows || mask[j].len() != n_rows {
                return Err(Error::Schema(format!(
                    "column `{}` has {} values and {} mask bits, expected {n_rows}",
                    meta.name,
                    data[j].len(),
                    mask[j].len()
                )));
            }
        }
        if labels > 1 {
            return Err(Error::Schema(format!("{labels} label columns; at most one allowed")));
        }
        for (col, m) in data.iter_mut().zip(&mask) {
            for (v, &missing) in col.iter_mut().zip(m) {
                if missing {
                    *v = 0.0;
                }
            }
        }
        Ok(Frame {
            columns,
            data,
            mask,
            n_rows,
        })
    }

    /// Frame of feature columns without any missing cells.
    pub fn from_feature_columns(names: Vec<String>, data: Vec<Vec<f64>>) -> Result<Self> {
        let mask = data.iter().map(|c| vec![false; c.len()]).collect();
        let columns = names.into_iter().map(ColumnMeta::feature).collect();
        Frame::new(columns, data, mask)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[ColumnMeta] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn feature_indices(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == ColumnRole::Feature)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.feature_indices()
            .into_iter()
            .map(|j| self.columns[j].name.clone())
            .collect()
    }

    pub fn label_index(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.role == ColumnRole::Label)
    }

    /// Raw stored values of a column; masked positions hold `0.0`.
    pub fn values(&self, col: usize) -> &[f64] {
        &self.data[col]
    }

    pub fn mask(&self, col: usize) -> &[bool] {
        &self.mask[col]
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.mask[col][row]
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        if self.mask[col][row] {
            None
        } else {
            Some(self.data[col][row])
        }
    }

    pub fn has_missing(&self) -> bool {
        self.mask.iter().any(|m| m.iter().any(|&b| b))
    }

    pub fn missing_count(&self, col: usize) -> usize {
        self.mask[col].iter().filter(|&&b| b).count()
    }

    /// Replaces the mask of every column, zeroing newly masked values.
    pub fn with_mask(&self, mask: Vec<Vec<bool>>) -> Result<Frame> {
        Frame::new(self.columns.clone(), self.data.clone(), mask)
    }

    pub fn into_parts(self) -> (Vec<ColumnMeta>, Vec<Vec<f64>>, Vec<Vec<bool>>) {
        (self.columns, self.data, self.mask)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Frame {
        let data = self
            .data
            .iter()
            .map(|c| rows.iter().map(|&r| c[r]).collect())
            .collect();
        let mask = self
            .mask
            .iter()
            .map(|m| rows.iter().map(|&r| m[r]).collect())
            .collect();
        Frame {
            columns: self.columns.clone(),
            data,
            mask,
            n_rows: rows.len(),
        }
    }

    /// Keeps the named columns in the given order.
    pub fn select_columns(&self, names: &[String]) -> Result<Frame> {
        let mut columns = Vec::with_capacity(names.len());
        let mut data = Vec::with_capacity(names.len());
        let mut mask = Vec::with_capacity(names.len());
        for name in names {
            let j = self
                .column_index(name)
                .ok_or_else(|| Error::Schema(format!("missing expected column `{name}`")))?;
            columns.push(self.columns[j].clone());
            data.push(self.data[j].clone());
            mask.push(self.mask[j].clone());
        }
        Frame::new(columns, data, mask)
    }

    /// The frame restricted to its feature columns.
    pub fn features_only(&self) -> Frame {
        let idx = self.feature_indices();
        Frame {
            columns: idx.iter().map(|&j| self.columns[j].clone()).collect(),
            data: idx.iter().map(|&j| self.data[j].clone()).collect(),
            mask: idx.iter().map(|&j| self.mask[j].clone()).collect(),
            n_rows: self.n_rows,
        }
    }

    /// Row-major matrix of the feature columns; fails on any missing cell.
    pub fn feature_matrix(&self) -> Result<Matrix> {
        let idx = self.feature_indices();
        let mut data = Vec::with_capacity(self.n_rows * idx.len());
        for r in 0..self.n_rows {
            for &j in &idx {
                if self.mask[j][r] {
                    return Err(Error::Schema(format!(
                        "missing value at row {} column `{}`",
                        r + 1,
                        self.columns[j].name
                    )));
                }
                data.push(self.data[j][r]);
            }
        }
        Matrix::new(self.n_rows, idx.len(), data)
    }

    pub fn write_csv<W: Write>(&self, writer: W, missing_token: &str) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        let io_err = |e: csv::Error| Error::Ingest(format!("CSV write failed: {e}"));
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .map_err(io_err)?;
        let mut record = Vec::with_capacity(self.n_cols());
        for r in 0..self.n_rows {
            record.clear();
            for j in 0..self.n_cols() {
                record.push(match self.get(r, j) {
                    Some(v) => format!("{v}"),
                    None => missing_token.to_string(),
                });
            }
            w.write_record(&record).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::Ingest(format!("CSV write failed: {e}")))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path, missing_token: &str) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file), missing_token)
    }

    /// Little-endian byte image (names, values, mask) used for leakage hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.n_rows as u64).to_le_bytes());
        for (j, c) in self.columns.iter().enumerate() {
            out.extend_from_slice(c.name.as_bytes());
            out.push(0);
            for r in 0..self.n_rows {
                match self.get(r, j) {
                    Some(v) => {
                        out.push(1);
                        out.extend_from_slice(&v.to_bits().to_le_bytes());
                    }
                    None => out.push(0),
                }
            }
        }
        out
    }
}

/// Equality ignores the stored value under masked cells.
impl PartialEq for Frame {
    fn eq(&self, other: &Self) -> bool {
        self.n_rows == other.n_rows
            && self.columns == other.columns
            && self.mask == other.mask
            && (0..self.n_cols()).all(|j| {
                (0..self.n_rows).all(|r| self.get(r, j).map(f64::to_bits) == other.get(r, j).map(f64::to_bits))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub label_column: Option<String>,
    #[serde(default)]
    pub id_columns: Vec<String>,
    #[serde(default)]
    pub missing_token: String,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            label_column: Some("goodbad".to_string()),
            id_columns: Vec::new(),
            missing_token: String::new(),
        }
    }
}

impl IngestConfig {
    pub fn with_label(label: &str) -> Self {
        IngestConfig {
            label_column: Some(label.to_string()),
            ..IngestConfig::default()
        }
    }

    pub fn no_label() -> Self {
        IngestConfig {
            label_column: None,
            ..IngestConfig::default()
        }
    }
}

pub fn read_csv(path: &Path, config: &IngestConfig) -> Result<Frame> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(std::io::BufReader::new(file), config)
}

pub fn read_csv_from<R: Read>(reader: R, config: &IngestConfig) -> Result<Frame> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| Error::Ingest(format!("unreadable header: {e}")))?,
        None => return Err(Error::Ingest("file has no header row".into())),
    };
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    let mut seen = HashSet::new();
    for name in &names {
        if !seen.insert(name.as_str()) {
            return Err(Error::Schema(format!("duplicate header `{name}`")));
        }
    }
    let columns: Vec<ColumnMeta> = names
        .iter()
        .map(|n| {
            let role = if config.label_column.as_deref() == Some(n.as_str()) {
                ColumnRole::Label
            } else if config.id_columns.iter().any(|c| c == n) {
                ColumnRole::Id
            } else {
                ColumnRole::Feature
            };
            ColumnMeta {
                name: n.clone(),
                role,
            }
        })
        .collect();
    if let Some(label) = &config.label_column {
        if !names.contains(label) {
            return Err(Error::Schema(format!("label column `{label}` not in header")));
        }
    }

    let width = names.len();
    let mut data = vec![Vec::new(); width];
    let mut mask = vec![Vec::new(); width];
    for (i, rec) in records.enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingest(format!("row {row}: {e}")))?;
        if rec.len() != width {
            return Err(Error::Ingest(format!(
                "row {row} has {} fields, header has {width}",
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            if field == config.missing_token {
                data[j].push(0.0);
                mask[j].push(true);
                continue;
            }
            let value: f64 = field
                .trim()
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| {
                    Error::Ingest(format!(
                        "row {row} column `{}`: non-numeric field `{field}`",
                        names[j]
                    ))
                })?;
            data[j].push(value);
            mask[j].push(false);
        }
    }
    Frame::new(columns, data, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    Tri,
    ResponseBinary,
    RiskBinary,
}

impl LabelScheme {
    fn as_str(self) -> &'static str {
        match self {
            LabelScheme::Tri => "tri",
            LabelScheme::ResponseBinary => "response_binary",
            LabelScheme::RiskBinary => "risk_binary",
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub classes: Vec<u8>,
    pub scheme: LabelScheme,
}

impl LabelVector {
    pub fn new(classes: Vec<u8>, scheme: LabelScheme) -> Result<Self> {
        let max = if scheme == LabelScheme::Tri { 2 } else { 1 };
        if let Some(bad) = classes.iter().find(|&&c| c > max) {
            return Err(Error::LabelDomain(format!("class {bad} not valid for {scheme} labels")));
        }
        Ok(LabelVector { classes, scheme })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Sorted distinct class ids present.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut c = self.classes.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for &c in &self.classes {
            counts[c as usize] += 1;
        }
        counts
    }

    fn expect_scheme(&self, scheme: LabelScheme) -> Result<()> {
        if self.scheme != scheme {
            return Err(Error::Scheme {
                expected: scheme.as_str(),
                actual: self.scheme.as_str(),
            });
        }
        Ok(())
    }
}

/// Observed 0 and 1 keep their codes; a missing label becomes class 2
/// (never opened a card).
pub fn derive_labels(frame: &Frame, label_column: &str) -> Result<LabelVector> {
    let j = frame
        .column_index(label_column)
        .ok_or_else(|| Error::Schema(format!("label column `{label_column}` not found")))?;
    let classes = (0..frame.n_rows())
        .map(|r| match frame.get(r, j) {
            None => Ok(2),
            Some(0.0) => Ok(0),
            Some(1.0) => Ok(1),
            Some(v) => Err(Error::LabelDomain(format!(
                "row {}: label value {v} outside {{0, 1}}",
                r + 1
            ))),
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelVector::new(classes, LabelScheme::Tri)
}

/// Responders (classes 0 and 1) become 1; non-responders (class 2) become 0.
pub fn remap_response(labels: &LabelVector) -> Result<LabelVector> {
    labels.expect_scheme(LabelScheme::Tri)?;
    let classes = labels.classes.iter().map(|&c| u8::from(c != 2)).collect();
    LabelVector::new(classes, LabelScheme::ResponseBinary)
}

/// Booked customers only (tri classes 0 and 1), with 1 = delinquent.
pub fn subset_risk(frame: &Frame, labels: &LabelVector) -> Result<(Frame, LabelVector)> {
    labels.expect_scheme(LabelScheme::Tri)?;
    if labels.len() != frame.n_rows() {
        return Err(Error::Schema(format!(
            "{} labels for {} rows",
            labels.len(),
            frame.n_rows()
        )));
    }
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels.classes[i] != 2).collect();
    let risk = rows.iter().map(|&i| labels.classes[i]).collect();
    Ok((frame.select_rows(&rows), LabelVector::new(risk, LabelScheme::RiskBinary)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train_indices: Vec<usize>,
    pub valid_indices: Vec<usize>,
    pub seed: u64,
}

/// Per-class train counts by the largest-remainder method: the train size
/// `T = round(fraction * n)` is apportioned over classes with quotas
/// `T * n_c / n`, floors first, leftover rows to the largest remainders,
/// ties to the smaller class id.
pub fn stratified_counts(class_sizes: &[(u8, usize)], train_fraction: f64) -> Vec<usize> {
    let n: usize = class_sizes.iter().map(|&(_, s)| s).sum();
    if n == 0 {
        return vec![0; class_sizes.len()];
    }
    let total = ((train_fraction * n as f64).round() as usize).min(n);
    let mut counts: Vec<usize> = class_sizes.iter().map(|&(_, s)| total * s / n).collect();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    // remainders are exact integers: (total * s) mod n
    order.sort_by(|&a, &b| {
        let ra = total * class_sizes[a].1 % n;
        let rb = total * class_sizes[b].1 % n;
        rb.cmp(&ra).then(class_sizes[a].0.cmp(&class_sizes[b].0))
    });
    let mut left = total - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if counts[i] < class_sizes[i].1 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

pub fn stratified_split(labels: &LabelVector, train_fraction: f64, seed: u64) -> Result<SplitResult> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} outside (0, 1)"
        )));
    }
    let present = labels.present_classes();
    let mut by_class: Vec<(u8, Vec<usize>)> = present
        .iter()
        .map(|&c| (c, (0..labels.len()).filter(|&i| labels.classes[i] == c).collect()))
        .collect();
    let sizes: Vec<(u8, usize)> = by_class.iter().map(|(c, rows)| (*c, rows.len())).collect();
    let counts = stratified_counts(&sizes, train_fraction);

    let mut rng = seed::rng(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for ((_, rows), n_train) in by_class.iter_mut().zip(counts) {
        rows.shuffle(&mut rng);
        train.extend_from_slice(&rows[..n_train]);
        valid.extend_from_slice(&rows[n_train..]);
    }
    train.shuffle(&mut rng);
    valid.shuffle(&mut rng);
    Ok(SplitResult {
        train_indices: train,
        valid_indices: valid,
        seed,
    })
}
