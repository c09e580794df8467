//! Deterministic synthetic credit dataset.
//!
//! Produces a frame shaped like a direct-mail credit file: a three-class
//! outcome encoded through a `goodbad` column (missing for non-responders),
//! correlated feature blocks, label-carrying signal features, sentinel codes
//! standing in for missing values, constant columns and mostly-missing
//! columns. The returned [`GroundTruth`] records every planted structure.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{ColumnMeta, Frame, LabelScheme, LabelVector};
use crate::seed;

/// Sentinel values injected as coded missing cells. Each one falls inside the
/// default flagging ranges `[2, 9]` or `[92, 99999]`.
pub const MISSING_CODES: [f64; 7] = [3.0, 5.0, 7.0, 93.0, 97.0, 995.0, 99998.0];

/// Fraction of rows coded missing in each high-missing column.
const HIGH_MISSING_RATE: f64 = 0.65;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_rows: usize,
    pub n_features: usize,
    pub class_proportions: [f64; 3],
    pub n_correlated_blocks: usize,
    pub block_size: usize,
    pub missing_code_rate: f64,
    pub n_constant_columns: usize,
    pub n_high_missing_columns: usize,
    pub signal_features: usize,
    pub label_column: String,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_rows: 5_000,
            n_features: 60,
            class_proportions: [0.156, 0.092, 0.752],
            n_correlated_blocks: 4,
            block_size: 5,
            missing_code_rate: 0.02,
            n_constant_columns: 1,
            n_high_missing_columns: 2,
            signal_features: 8,
            label_column: "goodbad".to_string(),
            seed: 20_240_101,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_proportions.iter().any(|&p| p < 0.0) {
            return Err(Error::Config(format!(
                "class proportions {:?} must be non-negative and sum to 1",
                self.class_proportions
            )));
        }
        if self.n_rows < 10 {
            return Err(Error::Config(format!("n_rows {} < 10", self.n_rows)));
        }
        if !(0.0..1.0).contains(&self.missing_code_rate) {
            return Err(Error::Config(format!(
                "missing_code_rate {} outside [0, 1)",
                self.missing_code_rate
            )));
        }
        let planted = self.n_correlated_blocks * self.block_size
            + self.n_constant_columns
            + self.n_high_missing_columns
            + self.signal_features;
        if planted > self.n_features {
            return Err(Error::Config(format!(
                "planted structure needs {planted} columns but n_features is {}",
                self.n_features
            )));
        }
        if self.n_correlated_blocks > 0 && self.block_size < 2 {
            return Err(Error::Config("block_size must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: LabelVector,
    pub signal_columns: Vec<String>,
    /// Column name to block id, block members only.
    pub block_assignments: BTreeMap<String, usize>,
    /// Members of each block ordered by increasing noise; the first entry is
    /// the member closest to the block's latent factor.
    pub blocks: Vec<Vec<String>>,
    pub constant_columns: Vec<String>,
    pub high_missing_columns: Vec<String>,
    /// Rows holding an injected code, per feature column.
    pub coded_rows: BTreeMap<String, Vec<usize>>,
}

pub fn feature_name(j: usize) -> String {
    format!("f{j:03}")
}

/// Generates the dataset and its ground truth.
pub fn generate(spec: &GeneratorSpec) -> Result<(Frame, GroundTruth)> {
    spec.validate()?;
    let n = spec.n_rows;
    let p = spec.n_features;

    let mut rng = seed::rng(seed::stage_seed(spec.seed, "labels"));
    let labels: Vec<u8> = (0..n).map(|_| draw_class(&mut rng, &spec.class_proportions)).collect();

    // Assign roles to a seeded permutation of the feature slots.
    let mut slots: Vec<usize> = (0..p).collect();
    slots.shuffle(&mut seed::rng(seed::stage_seed(spec.seed, "layout")));
    let mut take = |k: usize| -> Vec<usize> { slots.drain(..k).collect() };
    let blocks: Vec<Vec<usize>> = (0..spec.n_correlated_blocks)
        .map(|_| take(spec.block_size))
        .collect();
    let constant = take(spec.n_constant_columns);
    let high_missing = take(spec.n_high_missing_columns);
    let signal = take(spec.signal_features);

    let mut data = vec![vec![0.0; n]; p];
    let mut value_rng = seed::rng(seed::stage_seed(spec.seed, "values"));
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    for col in &mut data {
        for v in col.iter_mut() {
            *v = normal(&mut value_rng);
        }
    }
    for block in &blocks {
        let latent: Vec<f64> = (0..n).map(|_| normal(&mut value_rng)).collect();
        for (m, &j) in block.iter().enumerate() {
            let noise_sd = 0.05 * (m + 1) as f64;
            for i in 0..n {
                data[j][i] = latent[i] + noise_sd * normal(&mut value_rng);
            }
        }
    }
    // Alternate signal features between the response contrast (responders vs
    // not) and the risk contrast (delinquent vs good); shifts grow with the
    // feature index so the ranking among them is stable.
    for (s, &j) in signal.iter().enumerate() {
        let delta = 0.45 + 0.08 * (s / 2) as f64;
        for i in 0..n {
            let shift = match (s % 2, labels[i]) {
                (0, 0) | (0, 1) => delta,
                (1, 1) => delta,
                _ => 0.0,
            };
            data[j][i] += shift;
        }
    }
    for &j in &constant {
        data[j].iter_mut().for_each(|v| *v = 0.25);
    }
    // Affine rescale per column so features live on different scales.
    let mut scale_rng = seed::rng(seed::stage_seed(spec.seed, "scales"));
    for (j, col) in data.iter_mut().enumerate() {
        if constant.contains(&j) {
            continue;
        }
        let scale: f64 = scale_rng.gen_range(0.5..20.0);
        let offset: f64 = scale_rng.gen_range(-50.0..50.0);
        for v in col.iter_mut() {
            *v = *v * scale + offset;
            // An exact integer could collide with the sentinel codes.
            if v.fract() == 0.0 {
                *v += 1e-6;
            }
        }
    }

    let mut code_rng = seed::rng(seed::stage_seed(spec.seed, "codes"));
    let mut coded_rows = BTreeMap::new();
    for j in 0..p {
        let rows: Vec<usize> = if high_missing.contains(&j) {
            let k = (HIGH_MISSING_RATE * n as f64).ceil() as usize;
            let mut rows: Vec<usize> = rand::seq::index::sample(&mut code_rng, n, k).into_vec();
            rows.sort_unstable();
            rows
        } else {
            (0..n)
                .filter(|_| code_rng.gen::<f64>() < spec.missing_code_rate)
                .collect()
        };
        for &i in &rows {
            data[j][i] = *MISSING_CODES.choose(&mut code_rng).expect("non-empty");
        }
        coded_rows.insert(feature_name(j), rows);
    }

    let mut columns: Vec<ColumnMeta> = (0..p).map(|j| ColumnMeta::feature(feature_name(j))).collect();
    let mut mask = vec![vec![false; n]; p];
    columns.push(ColumnMeta::label(spec.label_column.clone()));
    data.push(labels.iter().map(|&c| if c == 2 { 0.0 } else { c as f64 }).collect());
    mask.push(labels.iter().map(|&c| c == 2).collect());
    let frame = Frame::new(columns, data, mask)?;

    let names = |v: &[usize]| v.iter().map(|&j| feature_name(j)).collect::<Vec<_>>();
    let mut block_assignments = BTreeMap::new();
    for (b, block) in blocks.iter().enumerate() {
        for &j in block {
            block_assignments.insert(feature_name(j), b);
        }
    }
    let truth = GroundTruth {
        labels: LabelVector::new(labels, LabelScheme::Tri)?,
        signal_columns: names(&signal),
        block_assignments,
        blocks: blocks.iter().map(|b| names(b)).collect(),
        constant_columns: names(&constant),
        high_missing_columns: names(&high_missing),
        coded_rows,
    };
    Ok((frame, truth))
}

fn draw_class<R: Rng>(rng: &mut R, proportions: &[f64; 3]) -> u8 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, &p) in proportions.iter().enumerate() {
        acc += p;
        if u < acc {
            return c as u8;
        }
    }
    2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::derive_labels;

    fn small() -> GeneratorSpec {
        GeneratorSpec {
            n_rows: 2_000,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn class_counts_match_priors() {
        let spec = GeneratorSpec {
            n_rows: 10_000,
            ..GeneratorSpec::default()
        };
        let (frame, truth) = generate(&spec).unwrap();
        let counts = truth.labels.counts();
        for (c, &p) in spec.class_proportions.iter().enumerate() {
            let mean = p * 10_000.0;
            let sd = (10_000.0 * p * (1.0 - p)).sqrt();
            assert!((counts[c] as f64 - mean).abs() < 3.0 * sd, "class {c}: {}", counts[c]);
        }
        assert_eq!(derive_labels(&frame, "goodbad").unwrap(), truth.labels);
    }

    #[test]
    fn constant_columns_have_one_non_code_value() {
        let spec = GeneratorSpec {
            n_constant_columns: 2,
            ..small()
        };
        let (frame, truth) = generate(&spec).unwrap();
        let mut found = 0;
        for name in frame.feature_names() {
            let j = frame.column_index(&name).unwrap();
            let coded = &truth.coded_rows[&name];
            let mut values: Vec<u64> = (0..frame.n_rows())
                .filter(|i| coded.binary_search(i).is_err())
                .map(|i| frame.get(i, j).unwrap().to_bits())
                .collect();
            values.sort_unstable();
            values.dedup();
            if values.len() == 1 {
                found += 1;
                assert!(truth.constant_columns.contains(&name));
            }
        }
        assert_eq!(found, 2);
    }

    #[test]
    fn same_seed_same_csv() {
        let spec = small();
        let mut a = Vec::new();
        let mut b = Vec::new();
        generate(&spec).unwrap().0.write_csv(&mut a, "").unwrap();
        generate(&spec).unwrap().0.write_csv(&mut b, "").unwrap();
        assert_eq!(a, b);
        let other = GeneratorSpec { seed: 1, ..spec };
        let mut c = Vec::new();
        generate(&other).unwrap().0.write_csv(&mut c, "").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn block_members_are_highly_correlated() {
        let (frame, truth) = generate(&small()).unwrap();
        for block in &truth.blocks {
            for a in 0..block.len() {
                for b in a + 1..block.len() {
                    let r = code_free_corr(&frame, &truth, &block[a], &block[b]);
                    assert!(r > 0.8, "{} ~ {}: {r}", block[a], block[b]);
                }
            }
        }
    }

    #[test]
    fn high_missing_columns_exceed_half() {
        let (frame, truth) = generate(&small()).unwrap();
        for name in &truth.high_missing_columns {
            assert!(truth.coded_rows[name].len() * 2 > frame.n_rows());
        }
    }

    #[test]
    fn infeasible_spec_is_config_error() {
        let spec = GeneratorSpec {
            n_features: 10,
            ..GeneratorSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let spec = GeneratorSpec {
            class_proportions: [0.5, 0.5, 0.5],
            ..GeneratorSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    fn code_free_corr(frame: &Frame, truth: &GroundTruth, a: &str, b: &str) -> f64 {
        let (ja, jb) = (frame.column_index(a).unwrap(), frame.column_index(b).unwrap());
        let rows: Vec<usize> = (0..frame.n_rows())
            .filter(|i| truth.coded_rows[a].binary_search(i).is_err() && truth.coded_rows[b].binary_search(i).is_err())
            .collect();
        let xa: Vec<f64> = rows.iter().map(|&i| frame.get(i, ja).unwrap()).collect();
        let xb: Vec<f64> = rows.iter().map(|&i| frame.get(i, jb).unwrap()).collect();
        let m = rows.len() as f64;
        let (ma, mb) = (xa.iter().sum::<f64>() / m, xb.iter().sum::<f64>() / m);
        let cov: f64 = xa.iter().zip(&xb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = xa.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = xb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }
}
