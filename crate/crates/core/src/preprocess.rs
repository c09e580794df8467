//! Leakage-safe cleaning chain.
//!
//! [`fit_preprocessor`] learns every statistic from the training frame;
//! [`apply_preprocessor`] replays the same chain on any frame using only
//! those stored numbers:
//!
//! 1. flag integer-valued sentinel codes as missing,
//! 2. drop columns that are mostly missing or carry a single value,
//! 3. impute missing cells with the training median,
//! 4. replace values more than three standard deviations from the mean with
//!    the median,
//! 5. min-max scale to `[0, 1]`, clipping values outside the training range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{ColumnRole, Frame};

pub const MODEL_VERSION: u32 = 1;

/// Inclusive integer interval of sentinel codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRange {
    pub lo: i64,
    pub hi: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRanges {
    pub intervals: Vec<CodeRange>,
}

impl Default for CodeRanges {
    fn default() -> Self {
        CodeRanges {
            intervals: vec![CodeRange { lo: 2, hi: 9 }, CodeRange { lo: 92, hi: 99_999 }],
        }
    }
}

impl CodeRanges {
    pub fn new(intervals: Vec<CodeRange>) -> Result<Self> {
        if let Some(bad) = intervals.iter().find(|r| r.lo > r.hi) {
            return Err(Error::Config(format!(
                "code range [{}, {}] has lo > hi",
                bad.lo, bad.hi
            )));
        }
        Ok(CodeRanges { intervals })
    }

    pub fn none() -> Self {
        CodeRanges { intervals: vec![] }
    }

    /// True for integer-valued reals inside any interval.
    pub fn is_code(&self, v: f64) -> bool {
        v.fract() == 0.0
            && self
                .intervals
                .iter()
                .any(|r| v >= r.lo as f64 && v <= r.hi as f64)
    }
}

/// Masks every feature cell holding a sentinel code. Label and id columns
/// are left alone.
pub fn flag_missing_codes(frame: &Frame, ranges: &CodeRanges) -> Frame {
    let mask = (0..frame.n_cols())
        .map(|j| {
            let m = frame.mask(j);
            if frame.columns()[j].role != ColumnRole::Feature {
                return m.to_vec();
            }
            frame
                .values(j)
                .iter()
                .zip(m)
                .map(|(&v, &missing)| missing || ranges.is_code(v))
                .collect()
        })
        .collect();
    frame
        .with_mask(mask)
        .expect("mask shape matches the frame it came from")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    SingleUnique,
    HighMissing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: DropReason,
    pub missing_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation of the imputed column.
    pub std: f64,
    /// Range of the imputed, outlier-clamped column.
    pub min: f64,
    pub max: f64,
    /// Set when clamping left a single value (`max == min`); such a column
    /// scales to 0.0 everywhere.
    pub collapsed: bool,
}

impl ColumnStats {
    fn transform(&self, value: Option<f64>) -> f64 {
        let mut x = value.unwrap_or(self.median);
        if (x - self.mean).abs() > 3.0 * self.std {
            x = self.median;
        }
        if self.max > self.min {
            ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessModel {
    pub version: u32,
    pub code_ranges: CodeRanges,
    pub missing_drop_threshold: f64,
    pub dropped_columns: Vec<DroppedColumn>,
    pub columns: Vec<ColumnStats>,
}

impl PreprocessModel {
    pub fn kept_columns(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: PreprocessModel = serde_json::from_str(text)?;
        if model.version != MODEL_VERSION {
            return Err(Error::Schema(format!(
                "preprocess model version {} (expected {MODEL_VERSION})",
                model.version
            )));
        }
        Ok(model)
    }
}

pub fn fit_preprocessor(train: &Frame, ranges: &CodeRanges, missing_drop_threshold: f64) -> Result<PreprocessModel> {
    if train.n_rows() == 0 {
        return Err(Error::Pipeline("training frame has no rows".into()));
    }
    let flagged = flag_missing_codes(train, ranges);
    let n = flagged.n_rows() as f64;
    let mut dropped = Vec::new();
    let mut columns = Vec::new();

    for j in flagged.feature_indices() {
        let name = flagged.columns()[j].name.clone();
        let present: Vec<f64> = (0..flagged.n_rows()).filter_map(|r| flagged.get(r, j)).collect();
        let missing_fraction = 1.0 - present.len() as f64 / n;
        if missing_fraction > missing_drop_threshold {
            dropped.push(DroppedColumn {
                name,
                reason: DropReason::HighMissing,
                missing_fraction,
            });
            continue;
        }
        let mut sorted = present;
        sorted.sort_by(f64::total_cmp);
        let unique = sorted.windows(2).filter(|w| w[0] != w[1]).count() + usize::from(!sorted.is_empty());
        if unique <= 1 {
            dropped.push(DroppedColumn {
                name,
                reason: DropReason::SingleUnique,
                missing_fraction,
            });
            continue;
        }
        let median = median_of_sorted(&sorted);

        let imputed: Vec<f64> = (0..flagged.n_rows())
            .map(|r| flagged.get(r, j).unwrap_or(median))
            .collect();
        let mean = imputed.iter().sum::<f64>() / n;
        let std = (imputed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();

        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in &imputed {
            let x = if (x - mean).abs() > 3.0 * std { median } else { x };
            min = min.min(x);
            max = max.max(x);
        }
        columns.push(ColumnStats {
            name,
            median,
            mean,
            std,
            min,
            max,
            collapsed: max == min,
        });
    }
    if columns.is_empty() {
        return Err(Error::Pipeline("no usable features".into()));
    }
    Ok(PreprocessModel {
        version: MODEL_VERSION,
        code_ranges: ranges.clone(),
        missing_drop_threshold,
        dropped_columns: dropped,
        columns,
    })
}

/// Transforms `frame` with the fitted statistics. Kept feature columns come
/// first in model order; non-feature columns follow unchanged.
pub fn apply_preprocessor(model: &PreprocessModel, frame: &Frame) -> Result<Frame> {
    let flagged = flag_missing_codes(frame, &model.code_ranges);
    let mut columns = Vec::new();
    let mut data = Vec::new();
    let mut mask = Vec::new();
    for stats in &model.columns {
        let j = flagged
            .column_index(&stats.name)
            .ok_or_else(|| Error::Schema(format!("missing expected column `{}`", stats.name)))?;
        columns.push(flagged.columns()[j].clone());
        data.push((0..flagged.n_rows()).map(|r| stats.transform(flagged.get(r, j))).collect());
        mask.push(vec![false; flagged.n_rows()]);
    }
    for (j, meta) in frame.columns().iter().enumerate() {
        if meta.role != ColumnRole::Feature {
            columns.push(meta.clone());
            data.push(frame.values(j).to_vec());
            mask.push(frame.mask(j).to_vec());
        }
    }
    Frame::new(columns, data, mask)
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}
