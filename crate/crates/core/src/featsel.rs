//! Feature reduction: correlation clustering with one representative per
//! cluster, followed by greedy variance-inflation pruning.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// R² at or above `1 - VIF_R2_EPS` reports an infinite VIF.
pub const VIF_R2_EPS: f64 = 1e-12;
/// Ridge added to the normal-equation diagonal when it is not positive definite.
pub const RIDGE_JITTER: f64 = 1e-10;
pub const DEFAULT_VIF_THRESHOLD: f64 = 5.0;
pub const DEFAULT_CUT_HEIGHT: f64 = 0.7;

/// Symmetric correlation matrix over named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrMatrix {
    pub names: Vec<String>,
    values: Vec<f64>,
}

impl CorrMatrix {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = names.len();
        if values.len() != n * n {
            return Err(Error::Size(format!("{} entries for a {n}x{n} matrix", values.len())));
        }
        Ok(CorrMatrix { names, values })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }
}

/// Feature columns of `frame` with no missing cells, column-major.
fn complete_features(frame: &Frame) -> Result<(Vec<String>, Vec<&[f64]>)> {
    let idx = frame.feature_indices();
    for &j in &idx {
        if frame.missing_count(j) > 0 {
            return Err(Error::Statistics(format!(
                "column `{}` has missing cells",
                frame.columns()[j].name
            )));
        }
    }
    Ok((
        idx.iter().map(|&j| frame.columns()[j].name.clone()).collect(),
        idx.iter().map(|&j| frame.values(j)).collect(),
    ))
}

/// Pearson correlations of the feature columns. Zero-variance columns get 0
/// off the diagonal.
pub fn correlation_matrix(frame: &Frame) -> Result<CorrMatrix> {
    if frame.n_rows() < 2 {
        return Err(Error::Statistics(format!(
            "correlation needs at least 2 rows, got {}",
            frame.n_rows()
        )));
    }
    let (names, cols) = complete_features(frame)?;
    let n = frame.n_rows() as f64;
    let centered: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / n;
            c.iter().map(|x| x - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for (name, &norm) in names.iter().zip(&norms) {
        if norm == 0.0 {
            log::warn!("column `{name}` has zero variance; its correlations are set to 0");
        }
    }
    let p = names.len();
    let mut values = vec![0.0; p * p];
    for i in 0..p {
        values[i * p + i] = 1.0;
        for j in i + 1..p {
            let r = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            values[i * p + j] = r;
            values[j * p + i] = r;
        }
    }
    CorrMatrix::new(names, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cut {
    Count(usize),
    Height(f64),
}

impl Default for Cut {
    fn default() -> Self {
        Cut::Height(DEFAULT_CUT_HEIGHT)
    }
}

/// One agglomeration step. Leaves are `0..n`; the cluster created by merge
/// `k` has id `n + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureClustering {
    pub names: Vec<String>,
    pub merges: Vec<Merge>,
    pub cut: Cut,
    /// Cluster id per column, numbered by first appearance in column order.
    pub assignments: Vec<usize>,
}

impl FeatureClustering {
    pub fn n_clusters(&self) -> usize {
        self.assignments.iter().max().map_or(0, |m| m + 1)
    }

    /// Member column indices of each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (j, &c) in self.assignments.iter().enumerate() {
            out[c].push(j);
        }
        out
    }

    pub fn dendrogram_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dendrogram<'a> {
            labels: &'a [String],
            merges: &'a [Merge],
        }
        Ok(serde_json::to_string_pretty(&Dendrogram {
            labels: &self.names,
            merges: &self.merges,
        })?)
    }
}

/// Average-linkage agglomerative clustering on `1 - r²`.
///
/// Active clusters live in the slot of their smallest member, so scanning
/// slot pairs in lexicographic order with a strict comparison breaks height
/// ties toward the smallest column index pair.
pub fn cluster_features(corr: &CorrMatrix, cut: Cut) -> Result<FeatureClustering> {
    let n = corr.len();
    match cut {
        Cut::Count(k) if k == 0 || k > n => {
            return Err(Error::Config(format!("cut count {k} not in 1..={n}")));
        }
        Cut::Height(h) if !h.is_finite() => {
            return Err(Error::Config(format!("cut height {h} is not finite")));
        }
        _ => {}
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let r = corr.get(i, j);
                dist[i * n + j] = 1.0 - r * r;
            }
        }
    }
    let mut active: Vec<bool> = vec![true; n];
    let mut size: Vec<usize> = vec![1; n];
    let mut node_id: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if active[j] && dist[i * n + j] < best.0 {
                    best = (dist[i * n + j], i, j);
                }
            }
        }
        let (height, a, b) = best;
        merges.push(Merge {
            left: node_id[a],
            right: node_id[b],
            height,
            size: size[a] + size[b],
        });
        for k in 0..n {
            if active[k] && k != a && k != b {
                let d = (size[a] as f64 * dist[a * n + k] + size[b] as f64 * dist[b * n + k])
                    / (size[a] + size[b]) as f64;
                dist[a * n + k] = d;
                dist[k * n + a] = d;
            }
        }
        active[b] = false;
        size[a] += size[b];
        node_id[a] = n + step;
    }

    let applied = match cut {
        Cut::Count(k) => n - k,
        Cut::Height(h) => merges.iter().take_while(|m| m.height <= h).count(),
    };
    let assignments = assign(n, &merges[..applied]);
    Ok(FeatureClustering {
        names: corr.names.clone(),
        merges,
        cut,
        assignments,
    })
}

fn assign(n: usize, merges: &[Merge]) -> Vec<usize> {
    // union-find over leaf and internal node ids
    let mut parent: Vec<usize> = (0..n + merges.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (k, m) in merges.iter().enumerate() {
        let (l, r) = (find(&mut parent, m.left), find(&mut parent, m.right));
        parent[l] = n + k;
        parent[r] = n + k;
    }
    let mut label_of_root = std::collections::HashMap::new();
    (0..n)
        .map(|j| {
            let root = find(&mut parent, j);
            let next = label_of_root.len();
            *label_of_root.entry(root).or_insert(next)
        })
        .collect()
}

/// Mean squared correlation of member `j` to the other members of its
/// cluster; 1.0 for a singleton.
pub fn r2_own(corr: &CorrMatrix, members: &[usize], j: usize) -> f64 {
    if members.len() < 2 {
        return 1.0;
    }
    let sum: f64 = members
        .iter()
        .filter(|&&k| k != j)
        .map(|&k| corr.get(j, k).powi(2))
        .sum();
    sum / (members.len() - 1) as f64
}

/// One representative column per cluster (in cluster id order): the member
/// with the highest [`r2_own`], ties to the smaller column index.
pub fn pick_representatives(frame: &Frame, clustering: &FeatureClustering) -> Result<Vec<String>> {
    let corr = correlation_matrix(frame)?;
    let pos: Vec<usize> = clustering
        .names
        .iter()
        .map(|name| {
            corr.names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Schema(format!("clustered column `{name}` not in frame")))
        })
        .collect::<Result<_>>()?;
    Ok(clustering
        .members()
        .iter()
        .map(|members| {
            let in_corr: Vec<usize> = members.iter().map(|&m| pos[m]).collect();
            let mut best = members[0];
            let mut best_score = f64::NEG_INFINITY;
            for (&m, &c) in members.iter().zip(&in_corr) {
                let score = r2_own(&corr, &in_corr, c);
                if score > best_score {
                    best = m;
                    best_score = score;
                }
            }
            clustering.names[best].clone()
        })
        .collect())
}

/// Mean-centered copies of the columns and their cross-product (Gram) matrix.
fn centered_gram(cols: &[&[f64]]) -> (Vec<Vec<f64>>, DMatrix<f64>) {
    let p = cols.len();
    let n = cols.first().map_or(0, |c| c.len()) as f64;
    let centered: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / n;
            c.iter().map(|x| x - mean).collect()
        })
        .collect();
    let mut g = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let d = dot(&centered[i], &centered[j]);
            g[(i, j)] = d;
            g[(j, i)] = d;
        }
    }
    (centered, g)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves the symmetric positive semi-definite system `a x = b` by Cholesky,
/// adding ridge jitter to the diagonal (growing tenfold) until it factors.
fn solve_normal(a: DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    if let Some(chol) = a.clone().cholesky() {
        return chol.solve(&b);
    }
    let scale = a.diagonal().iter().fold(1.0f64, |m, &d| m.max(d.abs()));
    let mut jitter = RIDGE_JITTER * scale;
    loop {
        let mut ridged = a.clone();
        for i in 0..ridged.nrows() {
            ridged[(i, i)] += jitter;
        }
        if let Some(chol) = ridged.cholesky() {
            return chol.solve(&b);
        }
        jitter *= 10.0;
    }
}

/// VIF of `cols[target]` regressed on the other centered columns (an
/// intercept is implied by the centering). Coefficients come from the normal
/// equations in `g`, refined once against the data; the residual sum of
/// squares is then taken from the data itself, which keeps large factors
/// accurate.
fn vif_of(cols: &[&[f64]], g: &DMatrix<f64>, target: usize) -> f64 {
    let p = g.nrows();
    let sst = g[(target, target)];
    if p < 2 {
        return 1.0;
    }
    if sst <= 0.0 {
        // a constant column is reproduced exactly by the intercept
        return f64::INFINITY;
    }
    let others: Vec<usize> = (0..p).filter(|&k| k != target).collect();
    let a = DMatrix::from_fn(others.len(), others.len(), |i, j| g[(others[i], others[j])]);
    let b = DVector::from_iterator(others.len(), others.iter().map(|&k| g[(k, target)]));
    let residual = |beta: &DVector<f64>| -> Vec<f64> {
        let mut r = cols[target].to_vec();
        for (&k, &bk) in others.iter().zip(beta.iter()) {
            for (ri, xi) in r.iter_mut().zip(cols[k]) {
                *ri -= bk * xi;
            }
        }
        r
    };
    let mut beta = solve_normal(a.clone(), b);
    let r = residual(&beta);
    let step = DVector::from_iterator(others.len(), others.iter().map(|&k| dot(cols[k], &r)));
    beta += solve_normal(a, step);
    let r = residual(&beta);
    let ssr = dot(&r, &r);
    if ssr <= VIF_R2_EPS * sst {
        f64::INFINITY
    } else {
        sst / ssr
    }
}

/// Variance inflation factor of `target` against every other feature column.
pub fn vif(frame: &Frame, target: &str) -> Result<f64> {
    let (names, cols) = complete_features(frame)?;
    if cols.len() < 2 {
        return Err(Error::Statistics("VIF needs at least 2 feature columns".into()));
    }
    let t = names
        .iter()
        .position(|n| n == target)
        .ok_or_else(|| Error::Schema(format!("column `{target}` not found")))?;
    let (centered, g) = centered_gram(&cols);
    let refs: Vec<&[f64]> = centered.iter().map(Vec::as_slice).collect();
    Ok(vif_of(&refs, &g, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VifRemoval {
    pub column: String,
    #[serde(with = "crate::report::f64_or_inf")]
    pub vif: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptColumn {
    pub column: String,
    #[serde(with = "crate::report::f64_or_inf")]
    pub vif: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VifTrace {
    pub threshold: f64,
    pub removals: Vec<VifRemoval>,
    pub kept: Vec<KeptColumn>,
}

impl VifTrace {
    pub fn kept_names(&self) -> Vec<String> {
        self.kept.iter().map(|k| k.column.clone()).collect()
    }

    /// `step,column,vif` rows; removals first, then the kept columns with an
    /// empty step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,column,vif\n");
        for (i, r) in self.removals.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, r.column, fmt_vif(r.vif)));
        }
        for k in &self.kept {
            out.push_str(&format!(",{},{}\n", k.column, fmt_vif(k.vif)));
        }
        out
    }
}

fn fmt_vif(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// Greedy pruning: while the largest VIF exceeds `threshold`, drop that
/// column (ties to the smaller index) and recompute.
pub fn vif_prune(frame: &Frame, threshold: f64) -> Result<VifTrace> {
    let (names, cols) = complete_features(frame)?;
    if cols.is_empty() {
        return Err(Error::Statistics("VIF pruning needs at least one feature column".into()));
    }
    let (centered, full) = centered_gram(&cols);
    let mut alive: Vec<usize> = (0..names.len()).collect();
    let mut removals = Vec::new();
    loop {
        let sub = DMatrix::from_fn(alive.len(), alive.len(), |i, j| full[(alive[i], alive[j])]);
        let sub_cols: Vec<&[f64]> = alive.iter().map(|&j| centered[j].as_slice()).collect();
        let vifs: Vec<f64> = (0..alive.len()).into_par_iter().map(|t| vif_of(&sub_cols, &sub, t)).collect();
        let (arg, max) = vifs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
        if alive.len() == 1 || max <= threshold {
            let kept = alive
                .iter()
                .zip(&vifs)
                .map(|(&j, &v)| KeptColumn {
                    column: names[j].clone(),
                    vif: v,
                })
                .collect();
            return Ok(VifTrace {
                threshold,
                removals,
                kept,
            });
        }
        removals.push(VifRemoval {
            column: names[alive[arg]].clone(),
            vif: max,
        });
        alive.remove(arg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, GeneratorSpec};
    use crate::preprocess::{apply_preprocessor, fit_preprocessor, CodeRanges};
    use proptest::prelude::*;
    use rand::Rng;

    fn frame(cols: Vec<Vec<f64>>) -> Frame {
        let names = (0..cols.len()).map(|j| format!("c{j}")).collect();
        Frame::from_feature_columns(names, cols).unwrap()
    }

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = crate::seed::rng(seed);
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }

    /// Textbook two-pass Pearson correlation.
    fn two_pass(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
        let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        cov / (sa * sb)
    }

    #[test]
    fn correlation_basics() {
        let a = noise(1, 50);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let c = correlation_matrix(&frame(vec![a.clone(), a.clone(), neg, vec![3.0; 50]])).unwrap();
        assert_eq!(c.get(0, 1), 1.0);
        assert_eq!(c.get(0, 2), -1.0);
        assert_eq!(c.get(0, 3), 0.0);
        assert_eq!(c.get(3, 3), 1.0);
        let one_row = frame(vec![vec![1.0], vec![2.0]]);
        assert!(matches!(correlation_matrix(&one_row), Err(Error::Statistics(_))));
    }

    #[test]
    fn correlation_matches_two_pass_oracle() {
        let cols: Vec<Vec<f64>> = (0..3).map(|s| noise(10 + s, 1_000)).collect();
        let c = correlation_matrix(&frame(cols.clone())).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { two_pass(&cols[i], &cols[j]) };
                assert!((c.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    fn corr_from(names: usize, entries: &[(usize, usize, f64)]) -> CorrMatrix {
        let mut v = vec![0.0; names * names];
        for i in 0..names {
            v[i * names + i] = 1.0;
        }
        for &(i, j, r) in entries {
            v[i * names + j] = r;
            v[j * names + i] = r;
        }
        CorrMatrix::new((0..names).map(|j| format!("c{j}")).collect(), v).unwrap()
    }

    #[test]
    fn uncorrelated_features_stay_apart() {
        let c = cluster_features(&corr_from(4, &[]), Cut::Height(0.5)).unwrap();
        assert_eq!(c.assignments, vec![0, 1, 2, 3]);
        assert_eq!(c.merges.len(), 3);
    }

    #[test]
    fn stronger_correlation_merges_first() {
        let c = cluster_features(&corr_from(4, &[(0, 1, 0.6), (2, 3, 0.95)]), Cut::Count(3)).unwrap();
        assert_eq!((c.merges[0].left, c.merges[0].right), (2, 3));
        assert!((c.merges[0].height - (1.0 - 0.95f64.powi(2))).abs() < 1e-15);
        assert_eq!((c.merges[1].left, c.merges[1].right), (0, 1));
        assert_eq!(c.assignments, vec![0, 1, 2, 2]);
        assert!(matches!(cluster_features(&corr_from(4, &[]), Cut::Count(5)), Err(Error::Config(_))));
    }

    #[test]
    fn merge_heights_are_monotone() {
        let cols: Vec<Vec<f64>> = (0..12).map(|s| noise(100 + s, 60)).collect();
        let c = cluster_features(&correlation_matrix(&frame(cols)).unwrap(), Cut::Count(1)).unwrap();
        assert!(c.merges.windows(2).all(|w| w[0].height <= w[1].height));
        assert_eq!(c.merges.last().unwrap().size, 12);
        assert!(c.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn representative_is_the_central_member() {
        let a = noise(7, 400);
        let c = noise(8, 400);
        let jitter = noise(9, 400);
        let b: Vec<f64> = (0..400).map(|i| 0.5 * (a[i] + c[i]) + 1e-3 * jitter[i]).collect();
        let f = frame(vec![a, b, c]);
        let corr = correlation_matrix(&f).unwrap();
        // oracle: compute each member's mean r^2 to the other two directly
        let own: Vec<f64> = (0..3)
            .map(|j| (0..3).filter(|&k| k != j).map(|k| corr.get(j, k).powi(2)).sum::<f64>() / 2.0)
            .collect();
        assert!(own[1] > own[0] && own[1] > own[2]);
        let clustering = cluster_features(&corr, Cut::Count(1)).unwrap();
        assert_eq!(pick_representatives(&f, &clustering).unwrap(), vec!["c1".to_string()]);

        let singletons = cluster_features(&corr, Cut::Count(3)).unwrap();
        assert_eq!(pick_representatives(&f, &singletons).unwrap(), vec!["c0", "c1", "c2"]);
    }

    fn synth_train() -> (Frame, crate::synthgen::GroundTruth) {
        let spec = GeneratorSpec {
            n_rows: 2_000,
            ..GeneratorSpec::default()
        };
        let (raw, truth) = generate(&spec).unwrap();
        let model = fit_preprocessor(&raw, &CodeRanges::default(), 0.5).unwrap();
        (apply_preprocessor(&model, &raw).unwrap().features_only(), truth)
    }

    #[test]
    fn planted_blocks_cluster_together_and_pick_least_noise_member() {
        let (f, truth) = synth_train();
        let corr = correlation_matrix(&f).unwrap();
        let c = cluster_features(&corr, Cut::default()).unwrap();
        let names = f.feature_names();
        let cluster_of = |name: &str| c.assignments[names.iter().position(|n| n == name).unwrap()];
        for block in &truth.blocks {
            let id = cluster_of(&block[0]);
            assert!(block.iter().all(|m| cluster_of(m) == id));
            let members = c.members()[id].len();
            assert_eq!(members, block.len(), "block shares a cluster with outsiders");
        }
        let reps = pick_representatives(&f, &c).unwrap();
        assert_eq!(reps.len(), c.n_clusters());
        for block in &truth.blocks {
            // exhaustive R²_own over the block
            let idx: Vec<usize> = block.iter().map(|m| names.iter().position(|n| n == m).unwrap()).collect();
            let best = idx
                .iter()
                .copied()
                .fold((usize::MAX, f64::NEG_INFINITY), |acc, j| {
                    let s = r2_own(&corr, &idx, j);
                    if s > acc.1 { (j, s) } else { acc }
                })
                .0;
            assert!(reps.contains(&names[best]));
            assert_eq!(names[best], block[0]);
        }
    }

    #[test]
    fn clustering_is_permutation_equivariant() {
        let (f, _) = synth_train();
        let names = f.feature_names();
        let mut perm: Vec<String> = names.clone();
        perm.reverse();
        let fp = f.select_columns(&perm).unwrap();
        let a = cluster_features(&correlation_matrix(&f).unwrap(), Cut::default()).unwrap();
        let b = cluster_features(&correlation_matrix(&fp).unwrap(), Cut::default()).unwrap();
        // same partition, compared as sets of co-membership
        for i in 0..names.len() {
            for j in 0..names.len() {
                let (pi, pj) = (names.len() - 1 - i, names.len() - 1 - j);
                assert_eq!(a.assignments[i] == a.assignments[j], b.assignments[pi] == b.assignments[pj]);
            }
        }
    }

    #[test]
    fn vif_of_orthogonal_and_collinear_columns() {
        let x = vec![1.0, -1.0, 1.0, -1.0];
        let y = vec![1.0, 1.0, -1.0, -1.0];
        let f = frame(vec![x, y]);
        assert!((vif(&f, "c0").unwrap() - 1.0).abs() < 1e-9);

        let a = noise(21, 30);
        let b = noise(22, 30);
        let c: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let f = frame(vec![a, b, c]);
        assert_eq!(vif(&f, "c2").unwrap(), f64::INFINITY);
        assert!(matches!(vif(&frame(vec![vec![1.0, 2.0]]), "c0"), Err(Error::Statistics(_))));
    }

    #[test]
    fn duplicate_predictors_use_ridge() {
        let a = noise(31, 40);
        let t = noise(32, 40);
        let f = frame(vec![a.clone(), a, t]);
        let v = vif(&f, "c2").unwrap();
        assert!(v.is_finite() && v >= 1.0);
    }

    #[test]
    fn prune_removes_one_of_collinear_triple() {
        let a = noise(41, 50);
        let b = noise(42, 50);
        let c: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let trace = vif_prune(&frame(vec![a, b, c]), 5.0).unwrap();
        assert_eq!(trace.removals.len(), 1);
        assert_eq!(trace.removals[0].vif, f64::INFINITY);
        // all three tie at infinity; the smallest index goes first
        assert_eq!(trace.removals[0].column, "c0");
        assert!(trace.kept.iter().all(|k| k.vif <= 5.0));
        assert!(trace.to_csv().contains("1,c0,inf"));
    }

    #[test]
    fn prune_keeps_everything_below_threshold() {
        let cols: Vec<Vec<f64>> = (0..4).map(|s| noise(50 + s, 80)).collect();
        let trace = vif_prune(&frame(cols), 5.0).unwrap();
        assert!(trace.removals.is_empty());
        assert_eq!(trace.kept.len(), 4);
    }

    #[test]
    fn single_column_prunes_to_itself() {
        let trace = vif_prune(&frame(vec![noise(60, 10)]), 5.0).unwrap();
        assert_eq!(trace.kept.len(), 1);
        assert_eq!(trace.kept[0].vif, 1.0);
    }

    proptest! {
        #[test]
        fn prune_terminates_under_threshold(seed in any::<u64>(), p in 2usize..8, dup in 0usize..3) {
            let mut cols: Vec<Vec<f64>> = (0..p).map(|s| noise(seed ^ s as u64, 40)).collect();
            for d in 0..dup {
                let mixed: Vec<f64> = cols[0].iter().zip(&cols[1]).map(|(x, y)| x + (d + 1) as f64 * y).collect();
                cols.push(mixed);
            }
            let total = cols.len();
            let f = frame(cols);
            let trace = vif_prune(&f, 5.0).unwrap();
            prop_assert!(trace.removals.len() < total);
            prop_assert!(trace.removals.iter().all(|r| r.vif > 5.0));
            prop_assert!(trace.kept.len() == 1 || trace.kept.iter().all(|k| k.vif <= 5.0));
            if trace.kept.len() >= 2 {
                let kept = f.select_columns(&trace.kept_names()).unwrap();
                for k in &trace.kept {
                    prop_assert!((vif(&kept, &k.column).unwrap() - k.vif).abs() < 1e-9);
                }
            }
        }
    }
}
