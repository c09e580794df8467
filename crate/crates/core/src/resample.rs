//! ADASYN oversampling on the scaled training matrix.
//!
//! For a minority class with `m_min` rows against a target count `m_maj`:
//!
//! * `G = (m_maj - m_min) * beta` synthetic rows are requested,
//! * each minority row gets a difficulty ratio `r_i`, the share of its `K`
//!   nearest training neighbours outside the class,
//! * `r_i` is normalised to a distribution and `round(G)` rows are
//!   apportioned over it by largest remainders,
//! * row `i` emits its `g_i` points on segments towards randomly chosen
//!   members of its `K` nearest same-class neighbours.
//!
//! Only original rows ever act as neighbours. Each minority point draws from
//! its own substream of the seed, so output is independent of thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdasynConfig {
    pub k_neighbors: usize,
    pub beta: f64,
    /// Minority class for the binary case; the smaller class when unset.
    pub target: Option<u8>,
    pub seed: u64,
}

impl Default for AdasynConfig {
    fn default() -> Self {
        AdasynConfig {
            k_neighbors: 5,
            beta: 1.0,
            target: None,
            seed: 0,
        }
    }
}

impl AdasynConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors < 1 {
            return Err(Error::Config("k_neighbors must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub row: usize,
    pub ratio: f64,
    pub normalized: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdasynReport {
    pub minority_class: u8,
    pub minority_count: usize,
    pub majority_count: usize,
    pub k_neighbors: usize,
    pub beta: f64,
    /// Requested synthetic count `G` before rounding.
    pub requested: f64,
    pub generated: usize,
    /// True when every ratio was zero and the uniform distribution was used.
    pub uniform_fallback: bool,
    pub points: Vec<PointReport>,
}

/// The `k` nearest rows to `query` by Euclidean distance, excluding the query
/// itself, optionally restricted to `restrict`. Ties go to the smaller row.
pub fn knn(points: &Matrix, query: usize, k: usize, restrict: Option<&[usize]>) -> Result<Vec<usize>> {
    let q = points.row(query);
    let dist = |i: usize| -> (f64, usize) {
        let d = points
            .row(i)
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        (d, i)
    };
    let mut cand: Vec<(f64, usize)> = match restrict {
        Some(rows) => rows.iter().copied().filter(|&i| i != query).map(dist).collect(),
        None => (0..points.rows()).filter(|&i| i != query).map(dist).collect(),
    };
    if k > cand.len() {
        return Err(Error::Size(format!(
            "k = {k} exceeds the {} eligible neighbours",
            cand.len()
        )));
    }
    let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() && k > 0 {
        cand.select_nth_unstable_by(k - 1, by);
        cand.truncate(k);
    } else if k == 0 {
        cand.clear();
    }
    cand.sort_by(by);
    Ok(cand.into_iter().map(|(_, i)| i).collect())
}

/// Largest-remainder apportionment of `total` over `weights` (summing to 1);
/// ties go to the earlier entry.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Generates synthetic rows for `class` against original rows `0..x.rows()`.
fn oversample_class(
    x: &Matrix,
    y: &[u8],
    class: u8,
    majority_count: usize,
    config: &AdasynConfig,
) -> Result<(Vec<Vec<f64>>, AdasynReport)> {
    let minority: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
    let m_min = minority.len();
    if m_min < 2 {
        return Err(Error::Resample(format!(
            "class {class} has {m_min} rows; ADASYN needs at least 2"
        )));
    }
    let requested = majority_count.saturating_sub(m_min) as f64 * config.beta;
    let total = requested.round() as usize;
    let k_full = config.k_neighbors.min(x.rows() - 1);
    let k_min = config.k_neighbors.min(m_min - 1);

    let ratios: Vec<f64> = minority
        .par_iter()
        .map(|&i| {
            let nb = knn(x, i, k_full, None)?;
            Ok(nb.iter().filter(|&&j| y[j] != class).count() as f64 / k_full as f64)
        })
        .collect::<Result<_>>()?;
    let sum: f64 = ratios.iter().sum();
    let uniform_fallback = sum == 0.0;
    let normalized: Vec<f64> = if uniform_fallback {
        vec![1.0 / m_min as f64; m_min]
    } else {
        ratios.iter().map(|r| r / sum).collect()
    };
    let counts = if total == 0 { vec![0; m_min] } else { apportion(&normalized, total) };

    let class_seed = seed::substream(config.seed, class as u64);
    let synthetic: Vec<Vec<Vec<f64>>> = minority
        .par_iter()
        .zip(&counts)
        .map(|(&i, &g)| {
            if g == 0 {
                return Ok(Vec::new());
            }
            let nb = knn(x, i, k_min, Some(&minority))?;
            let mut rng = seed::rng(seed::substream(class_seed, i as u64));
            let xi = x.row(i);
            Ok((0..g)
                .map(|_| {
                    let z = x.row(nb[rng.gen_range(0..nb.len())]);
                    let lambda: f64 = rng.gen();
                    xi.iter()
                        .zip(z)
                        .map(|(&a, &b)| (a + lambda * (b - a)).clamp(a.min(b), a.max(b)))
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = synthetic.into_iter().flatten().collect();

    let report = AdasynReport {
        minority_class: class,
        minority_count: m_min,
        majority_count,
        k_neighbors: config.k_neighbors,
        beta: config.beta,
        requested,
        generated: rows.len(),
        uniform_fallback,
        points: minority
            .iter()
            .zip(ratios.iter().zip(normalized.iter().zip(&counts)))
            .map(|(&row, (&ratio, (&normalized, &count)))| PointReport {
                row,
                ratio,
                normalized,
                count,
            })
            .collect(),
    };
    Ok((rows, report))
}

fn class_counts(y: &[u8]) -> Vec<(u8, usize)> {
    let mut classes: Vec<u8> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| (c, y.iter().filter(|&&v| v == c).count()))
        .collect()
}

fn check_input(x: &Matrix, y: &[u8], config: &AdasynConfig) -> Result<Vec<(u8, usize)>> {
    config.validate()?;
    if x.rows() != y.len() {
        return Err(Error::Size(format!("{} rows but {} labels", x.rows(), y.len())));
    }
    let counts = class_counts(y);
    if counts.len() < 2 {
        return Err(Error::Resample("ADASYN needs at least two classes".into()));
    }
    Ok(counts)
}

fn append(x: &Matrix, y: &[u8], rows: Vec<Vec<f64>>, class: u8, out_x: &mut Matrix, out_y: &mut Vec<u8>) {
    if out_x.rows() == 0 && out_y.is_empty() {
        *out_x = x.clone();
        out_y.extend_from_slice(y);
    }
    for r in rows {
        out_x.push_row(&r);
        out_y.push(class);
    }
}

/// Binary ADASYN. Synthetic rows are appended after the original rows.
pub fn adasyn(x: &Matrix, y: &[u8], config: &AdasynConfig) -> Result<(Matrix, Vec<u8>, AdasynReport)> {
    let counts = check_input(x, y, config)?;
    if counts.len() != 2 {
        return Err(Error::Resample(format!(
            "binary ADASYN got {} classes; use adasyn_multiclass",
            counts.len()
        )));
    }
    let (minority, majority) = match config.target {
        Some(t) => {
            let min = counts
                .iter()
                .find(|c| c.0 == t)
                .ok_or_else(|| Error::Resample(format!("target class {t} not present")))?;
            let maj = counts.iter().find(|c| c.0 != t).expect("two classes");
            (*min, *maj)
        }
        None if counts[0].1 <= counts[1].1 => (counts[0], counts[1]),
        None => (counts[1], counts[0]),
    };
    let (rows, report) = oversample_class(x, y, minority.0, majority.1, config)?;
    let mut out_x = Matrix::zeros(0, x.cols());
    let mut out_y = Vec::new();
    append(x, y, rows, minority.0, &mut out_x, &mut out_y);
    Ok((out_x, out_y, report))
}

/// One-vs-rest ADASYN: every class other than the largest (ties to the
/// smaller id) is raised towards the largest class count, in ascending class
/// order, with neighbour pools drawn from the original rows only.
pub fn adasyn_multiclass(x: &Matrix, y: &[u8], config: &AdasynConfig) -> Result<(Matrix, Vec<u8>, Vec<AdasynReport>)> {
    let counts = check_input(x, y, config)?;
    let majority = counts
        .iter()
        .fold(counts[0], |best, &c| if c.1 > best.1 { c } else { best });
    let mut out_x = Matrix::zeros(0, x.cols());
    let mut out_y = Vec::new();
    let mut reports = Vec::new();
    for &(class, _) in counts.iter().filter(|c| c.0 != majority.0) {
        let (rows, report) = oversample_class(x, y, class, majority.1, config)?;
        append(x, y, rows, class, &mut out_x, &mut out_y);
        reports.push(report);
    }
    Ok((out_x, out_y, reports))
}
