//! CART core shared by the forest and boosting learners.
//!
//! Trees are grown depth-first from an explicit stack. Each node owns a
//! contiguous range of the row buffer and, in exhaustive mode, the same range
//! of every per-feature presorted buffer; splitting stably partitions those
//! ranges, so sorted order is never recomputed below the root.
//!
//! Every node draws its randomness (candidate features, random thresholds)
//! from its own seed, derived from its parent's. A node's decisions therefore
//! do not depend on the depth limit, and a tree grown to depth `d` equals a
//! deeper tree cut at `d` (see [`Tree::truncated`]).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::seed;

pub(crate) const MAX_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Midpoints between consecutive distinct sorted values.
    Exhaustive,
    /// One uniform threshold in `[node min, node max)` per candidate feature.
    RandomThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, n_features: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((n_features as f64).sqrt().floor() as usize).max(1),
            MaxFeatures::All => n_features,
            MaxFeatures::Count(k) => k.clamp(1, n_features.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// `None` grows until purity or the size minima stop it.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
    pub max_features: MaxFeatures,
    pub split_mode: SplitMode,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_leaf: 1,
            min_samples_split: 2,
            max_features: MaxFeatures::All,
            split_mode: SplitMode::Exhaustive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Split feature; `None` marks a leaf.
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    /// Class distribution (classification) or `[leaf weight]` (boosting).
    /// Stored on internal nodes too so a tree can be cut at any depth.
    pub value: Vec<f64>,
    /// Impurity decrease (or Newton gain) achieved by this node's split.
    pub gain: f64,
    /// Sample weight (classification) or hessian sum (boosting) at the node.
    pub weight: f64,
    pub n_samples: usize,
    pub depth: usize,
}

impl Node {
    fn leaf(value: Vec<f64>, weight: f64, n_samples: usize, depth: usize) -> Self {
        Node {
            feature: None,
            threshold: 0.0,
            left: 0,
            right: 0,
            value,
            gain: 0.0,
            weight,
            n_samples,
            depth,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.feature.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Routes `x` to its leaf: left iff `x[feature] <= threshold`.
    pub fn leaf(&self, x: &[f64]) -> &Node {
        let mut node = &self.nodes[0];
        while let Some(f) = node.feature {
            node = if x[f] <= node.threshold {
                &self.nodes[node.left]
            } else {
                &self.nodes[node.right]
            };
        }
        node
    }

    /// Deepest node depth (edges from the root).
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Depth recomputed by walking the child links, independent of the
    /// stored `depth` fields.
    pub fn structural_depth(&self) -> usize {
        let mut deepest = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((i, d)) = stack.pop() {
            deepest = deepest.max(d);
            let n = &self.nodes[i];
            if !n.is_leaf() {
                stack.push((n.left, d + 1));
                stack.push((n.right, d + 1));
            }
        }
        deepest
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    /// The tree the builder would have produced with `max_depth`: nodes at
    /// that depth become leaves and node ids follow the builder's order.
    pub fn truncated(&self, max_depth: Option<usize>) -> Tree {
        let Some(limit) = max_depth else {
            return self.clone();
        };
        let mut nodes = vec![self.nodes[0].clone()];
        // (new id, old id)
        let mut stack = vec![(0usize, 0usize)];
        while let Some((new, old)) = stack.pop() {
            let src = &self.nodes[old];
            if src.is_leaf() || src.depth >= limit {
                let n = &mut nodes[new];
                n.feature = None;
                n.threshold = 0.0;
                n.left = 0;
                n.right = 0;
                n.gain = 0.0;
                continue;
            }
            let (l, r) = (nodes.len(), nodes.len() + 1);
            nodes.push(self.nodes[src.left].clone());
            nodes.push(self.nodes[src.right].clone());
            nodes[new].left = l;
            nodes[new].right = r;
            stack.push((r, src.right));
            stack.push((l, src.left));
        }
        Tree { nodes }
    }

    /// Weighted impurity decrease per feature, as fractions of the root weight.
    pub(crate) fn importance_into(&self, acc: &mut [f64]) {
        let root = self.nodes[0].weight;
        if root <= 0.0 {
            return;
        }
        for n in &self.nodes {
            if let Some(f) = n.feature {
                acc[f] += n.gain.max(0.0) / root;
            }
        }
    }
}

/// A row id with the rank of its value among one feature's distinct values.
#[derive(Clone, Copy)]
pub(crate) struct Entry {
    v: u32,
    r: u32,
}

/// Column-major copy of the training matrix plus, when needed, every
/// feature's rows sorted by value (ties by row id) and its distinct values.
pub(crate) struct Columns {
    pub cols: Vec<Vec<f64>>,
    orders: Vec<Vec<Entry>>,
    distinct: Vec<Vec<f64>>,
    pub n_rows: usize,
}

impl Columns {
    pub fn new(x: &Matrix, presort: bool) -> Self {
        let cols = x.to_columns();
        let (mut orders, mut distinct) = (Vec::new(), Vec::new());
        if presort {
            for c in &cols {
                let mut rows: Vec<u32> = (0..x.rows() as u32).collect();
                rows.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]).then(a.cmp(&b)));
                let mut values: Vec<f64> = Vec::new();
                let o: Vec<Entry> = rows
                    .iter()
                    .map(|&r| {
                        let v = c[r as usize];
                        if values.last() != Some(&v) {
                            values.push(v);
                        }
                        Entry {
                            v: (values.len() - 1) as u32,
                            r,
                        }
                    })
                    .collect();
                orders.push(o);
                distinct.push(values);
            }
        }
        Columns {
            cols,
            orders,
            distinct,
            n_rows: x.rows(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }
}

/// Split objective. A split's gain is `score(left) + score(right) - score(parent)`.
pub(crate) trait Criterion: Sync {
    type Stats: Copy + Send + Sync;
    fn zero(&self) -> Self::Stats;
    fn add(&self, s: &mut Self::Stats, row: u32);
    fn diff(&self, parent: &Self::Stats, left: &Self::Stats) -> Self::Stats;
    fn count(&self, s: &Self::Stats) -> usize;
    fn score(&self, s: &Self::Stats) -> f64;
    /// `score(left) + score(right)`, possibly computed more cheaply.
    fn split_score(&self, l: &Self::Stats, r: &Self::Stats) -> f64 {
        self.score(l) + self.score(r)
    }
    fn weight(&self, s: &Self::Stats) -> f64;
    fn value(&self, s: &Self::Stats) -> Vec<f64>;
    fn is_pure(&self, s: &Self::Stats) -> bool;
    /// False when no split of a node with these stats could be valid.
    fn splittable(&self, _s: &Self::Stats) -> bool {
        true
    }
    fn accepts(&self, gain: f64) -> bool;
    fn child_ok(&self, s: &Self::Stats) -> bool;

    /// Best split of a node whose rows are sorted by one feature: the gain
    /// and the index of the last left entry. Earlier positions win ties.
    fn scan(
        &self,
        ord: &[Entry],
        parent: &Self::Stats,
        parent_score: f64,
        min_leaf: usize,
    ) -> Option<(f64, usize)> {
        let n = ord.len();
        let mut left = self.zero();
        let mut best: Option<(f64, usize)> = None;
        for k in 0..n - 1 {
            self.add(&mut left, ord[k].r);
            if ord[k].v == ord[k + 1].v {
                continue;
            }
            let nl = k + 1;
            if nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let right = self.diff(parent, &left);
            if !self.child_ok(&left) || !self.child_ok(&right) {
                continue;
            }
            let gain = self.split_score(&left, &right) - parent_score;
            if best.is_none_or(|b| gain > b.0) {
                best = Some((gain, k));
            }
        }
        best
    }

    fn stats(&self, rows: &[u32]) -> Self::Stats {
        let mut s = self.zero();
        for &r in rows {
            self.add(&mut s, r);
        }
        s
    }
}

/// Weighted Gini impurity over class indices `0..n_classes`.
pub(crate) struct Gini<'a> {
    pub y: &'a [u8],
    pub w: &'a [f64],
    pub n_classes: usize,
}

#[derive(Clone, Copy)]
pub(crate) struct ClassStats {
    w: [f64; MAX_CLASSES],
    total: f64,
    n: usize,
}

impl Criterion for Gini<'_> {
    type Stats = ClassStats;

    fn zero(&self) -> ClassStats {
        ClassStats {
            w: [0.0; MAX_CLASSES],
            total: 0.0,
            n: 0,
        }
    }

    fn add(&self, s: &mut ClassStats, row: u32) {
        let w = self.w[row as usize];
        s.w[self.y[row as usize] as usize] += w;
        s.total += w;
        s.n += 1;
    }

    fn diff(&self, p: &ClassStats, l: &ClassStats) -> ClassStats {
        let mut out = *p;
        for c in 0..self.n_classes {
            out.w[c] -= l.w[c];
        }
        out.total -= l.total;
        out.n -= l.n;
        out
    }

    fn count(&self, s: &ClassStats) -> usize {
        s.n
    }

    /// `-W * gini = sum(w_c^2) / W - W`.
    fn score(&self, s: &ClassStats) -> f64 {
        if s.total <= 0.0 {
            return 0.0;
        }
        let sq: f64 = s.w[..self.n_classes].iter().map(|w| w * w).sum();
        sq / s.total - s.total
    }

    fn weight(&self, s: &ClassStats) -> f64 {
        s.total
    }

    fn value(&self, s: &ClassStats) -> Vec<f64> {
        if s.total <= 0.0 {
            return vec![1.0 / self.n_classes as f64; self.n_classes];
        }
        s.w[..self.n_classes].iter().map(|w| w / s.total).collect()
    }

    fn is_pure(&self, s: &ClassStats) -> bool {
        s.w[..self.n_classes].iter().filter(|&&w| w > 0.0).count() <= 1
    }

    // Zero-gain splits of impure nodes are allowed, so an unlimited tree
    // always separates distinct inputs.
    fn accepts(&self, _gain: f64) -> bool {
        true
    }

    fn child_ok(&self, _s: &ClassStats) -> bool {
        true
    }
}

/// Second-order boosting objective with L2 leaf regularisation.
pub(crate) struct Newton<'a> {
    /// Per-row `[gradient, hessian]`.
    pub gh: &'a [[f64; 2]],
    pub lambda: f64,
    pub min_child_weight: f64,
}

#[derive(Clone, Copy)]
pub(crate) struct GradStats {
    g: f64,
    h: f64,
    n: usize,
}

/// Splits must improve the objective by more than this.
const MIN_NEWTON_GAIN: f64 = 1e-10;

impl Criterion for Newton<'_> {
    type Stats = GradStats;

    fn zero(&self) -> GradStats {
        GradStats { g: 0.0, h: 0.0, n: 0 }
    }

    fn add(&self, s: &mut GradStats, row: u32) {
        let [g, h] = self.gh[row as usize];
        s.g += g;
        s.h += h;
        s.n += 1;
    }

    fn diff(&self, p: &GradStats, l: &GradStats) -> GradStats {
        GradStats {
            g: p.g - l.g,
            h: p.h - l.h,
            n: p.n - l.n,
        }
    }

    fn count(&self, s: &GradStats) -> usize {
        s.n
    }

    fn score(&self, s: &GradStats) -> f64 {
        s.g * s.g / (s.h + self.lambda)
    }

    fn split_score(&self, l: &GradStats, r: &GradStats) -> f64 {
        let (hl, hr) = (l.h + self.lambda, r.h + self.lambda);
        (l.g * l.g * hr + r.g * r.g * hl) / (hl * hr)
    }

    fn weight(&self, s: &GradStats) -> f64 {
        s.h
    }

    fn value(&self, s: &GradStats) -> Vec<f64> {
        vec![-s.g / (s.h + self.lambda)]
    }

    fn is_pure(&self, _s: &GradStats) -> bool {
        false
    }

    fn splittable(&self, s: &GradStats) -> bool {
        s.h >= 2.0 * self.min_child_weight
    }

    fn accepts(&self, gain: f64) -> bool {
        gain > MIN_NEWTON_GAIN
    }

    fn child_ok(&self, s: &GradStats) -> bool {
        s.h >= self.min_child_weight
    }

    fn scan(
        &self,
        ord: &[Entry],
        parent: &GradStats,
        parent_score: f64,
        min_leaf: usize,
    ) -> Option<(f64, usize)> {
        let n = ord.len();
        let min_leaf = min_leaf.max(1);
        if n < 2 * min_leaf {
            return None;
        }
        // Boundaries after entry k with k in [lo, hi) leave min_leaf rows a side.
        let (lo, hi) = (min_leaf - 1, n - min_leaf);
        let (mut gl, mut hl) = (0.0, 0.0);
        for e in &ord[..lo] {
            let [g, h] = self.gh[e.r as usize];
            gl += g;
            hl += h;
        }
        let mut best_gain = f64::NEG_INFINITY;
        let mut best_k = usize::MAX;
        for (k, pair) in (lo..).zip(ord[lo..=hi].windows(2)) {
            let [g, h] = self.gh[pair[0].r as usize];
            gl += g;
            hl += h;
            let (gr, hr) = (parent.g - gl, parent.h - hl);
            let (dl, dr) = (hl + self.lambda, hr + self.lambda);
            let gain = (gl * gl * dr + gr * gr * dl) / (dl * dr) - parent_score;
            let take = (pair[0].v != pair[1].v)
                & (hl >= self.min_child_weight)
                & (hr >= self.min_child_weight)
                & (gain > best_gain);
            best_gain = if take { gain } else { best_gain };
            best_k = if take { k } else { best_k };
        }
        (best_k != usize::MAX).then_some((best_gain, best_k))
    }
}

/// Nodes with at least this many feature-rows scan and partition features in
/// parallel.
const PARALLEL_WORK: usize = 1 << 16;

struct Best {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct Task {
    node: usize,
    start: usize,
    end: usize,
    seed: u64,
}

/// Grows one tree over `rows` (ids into `data`, each listed once).
pub(crate) fn build_tree<C: Criterion>(
    data: &Columns,
    rows: Vec<u32>,
    crit: &C,
    params: &TreeParams,
    seed: u64,
) -> Tree {
    let n_features = data.n_features();
    let max_features = params.max_features.resolve(n_features);
    let exhaustive = params.split_mode == SplitMode::Exhaustive;

    let mut rows = rows;
    let mut orders: Vec<Vec<Entry>> = if exhaustive {
        if rows.len() == data.n_rows {
            data.orders.clone()
        } else {
            let mut member = vec![false; data.n_rows];
            for &r in &rows {
                member[r as usize] = true;
            }
            data.orders
                .iter()
                .map(|o| o.iter().copied().filter(|e| member[e.r as usize]).collect())
                .collect()
        }
    } else {
        Vec::new()
    };
    let mut go_left = vec![false; data.n_rows];
    let mut scratch: Vec<u32> = Vec::with_capacity(rows.len());
    let mut entry_scratch: Vec<Entry> = Vec::with_capacity(if exhaustive { rows.len() } else { 0 });
    let mut perm: Vec<usize> = (0..n_features).collect();

    let root_stats = crit.stats(&rows);
    let mut nodes = vec![Node::leaf(
        crit.value(&root_stats),
        crit.weight(&root_stats),
        rows.len(),
        0,
    )];
    let mut node_stats = vec![root_stats];
    let mut stack = vec![Task {
        node: 0,
        start: 0,
        end: rows.len(),
        seed,
    }];

    while let Some(task) = stack.pop() {
        let (s, e) = (task.start, task.end);
        let n = e - s;
        let stats = node_stats[task.node];
        let depth = nodes[task.node].depth;
        if params.max_depth.is_some_and(|d| depth >= d)
            || n < params.min_samples_split.max(2)
            || n < 2 * params.min_samples_leaf
            || crit.is_pure(&stats)
            || !crit.splittable(&stats)
        {
            continue;
        }

        let mut rng = seed::rng(task.seed);
        let constant = |f: usize| -> bool {
            let col = &data.cols[f];
            if exhaustive {
                let o = &orders[f][s..e];
                o[0].v == o[n - 1].v
            } else {
                let first = col[rows[s] as usize];
                rows[s..e].iter().all(|&r| col[r as usize] == first)
            }
        };
        let mut candidates = Vec::with_capacity(max_features);
        if max_features >= n_features {
            candidates.extend((0..n_features).filter(|&f| !constant(f)));
        } else {
            for (i, p) in perm.iter_mut().enumerate() {
                *p = i;
            }
            for i in 0..n_features {
                let j = rng.gen_range(i..n_features);
                perm.swap(i, j);
                if !constant(perm[i]) {
                    candidates.push(perm[i]);
                    if candidates.len() == max_features {
                        break;
                    }
                }
            }
            candidates.sort_unstable();
        }

        let parent_score = crit.score(&stats);
        let mut best: Option<Best> = None;
        if exhaustive {
            let scan = |&f: &usize| {
                crit.scan(&orders[f][s..e], &stats, parent_score, params.min_samples_leaf)
                    .map(|(gain, k)| (f, gain, k))
            };
            let found: Vec<Option<(usize, f64, usize)>> = if n * candidates.len() >= PARALLEL_WORK {
                candidates.par_iter().map(scan).collect()
            } else {
                candidates.iter().map(scan).collect()
            };
            for (f, gain, k) in found.into_iter().flatten() {
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    let ord = &orders[f][s..e];
                    best = Some(Best {
                        feature: f,
                        threshold: midpoint(
                            data.distinct[f][ord[k].v as usize],
                            data.distinct[f][ord[k + 1].v as usize],
                        ),
                        gain,
                    });
                }
            }
        }
        for &f in candidates.iter().filter(|_| !exhaustive) {
            let col = &data.cols[f];
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &r in &rows[s..e] {
                lo = lo.min(col[r as usize]);
                hi = hi.max(col[r as usize]);
            }
            let mut t = rng.gen_range(lo..hi);
            while t <= lo {
                t = rng.gen_range(lo..hi);
            }
            let mut left = crit.zero();
            for &r in &rows[s..e] {
                if col[r as usize] <= t {
                    crit.add(&mut left, r);
                }
            }
            let nl = crit.count(&left);
            if nl < params.min_samples_leaf || n - nl < params.min_samples_leaf {
                continue;
            }
            let right = crit.diff(&stats, &left);
            if !crit.child_ok(&left) || !crit.child_ok(&right) {
                continue;
            }
            let gain = crit.score(&left) + crit.score(&right) - parent_score;
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(Best {
                    feature: f,
                    threshold: t,
                    gain,
                });
            }
        }
        let Some(best) = best.filter(|b| crit.accepts(b.gain)) else {
            continue;
        };

        let col = &data.cols[best.feature];
        for &r in &rows[s..e] {
            go_left[r as usize] = col[r as usize] <= best.threshold;
        }
        let mid = s + stable_partition(&mut rows[s..e], &go_left, &mut scratch);
        if n * orders.len() >= PARALLEL_WORK {
            orders.par_iter_mut().for_each_init(Vec::new, |scratch, o| {
                stable_partition_entries(&mut o[s..e], &go_left, scratch)
            });
        } else {
            for o in orders.iter_mut() {
                stable_partition_entries(&mut o[s..e], &go_left, &mut entry_scratch);
            }
        }

        let left_stats = crit.stats(&rows[s..mid]);
        let right_stats = crit.stats(&rows[mid..e]);
        let (l, r) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::leaf(crit.value(&left_stats), crit.weight(&left_stats), mid - s, depth + 1));
        nodes.push(Node::leaf(crit.value(&right_stats), crit.weight(&right_stats), e - mid, depth + 1));
        node_stats.push(left_stats);
        node_stats.push(right_stats);
        let parent = &mut nodes[task.node];
        parent.feature = Some(best.feature);
        parent.threshold = best.threshold;
        parent.left = l;
        parent.right = r;
        parent.gain = best.gain;
        stack.push(Task {
            node: r,
            start: mid,
            end: e,
            seed: seed::substream(task.seed, 2),
        });
        stack.push(Task {
            node: l,
            start: s,
            end: mid,
            seed: seed::substream(task.seed, 1),
        });
    }
    Tree { nodes }
}

/// Midpoint of two consecutive distinct values that still separates them.
fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m >= b || m < a {
        a
    } else {
        m
    }
}

fn stable_partition(slice: &mut [u32], go_left: &[bool], scratch: &mut Vec<u32>) -> usize {
    scratch.clear();
    let mut w = 0;
    for i in 0..slice.len() {
        let r = slice[i];
        if go_left[r as usize] {
            slice[w] = r;
            w += 1;
        } else {
            scratch.push(r);
        }
    }
    slice[w..].copy_from_slice(scratch);
    w
}

fn stable_partition_entries(slice: &mut [Entry], go_left: &[bool], scratch: &mut Vec<Entry>) {
    scratch.clear();
    scratch.resize(slice.len(), Entry { v: 0, r: 0 });
    let (mut w, mut j) = (0, 0);
    for i in 0..slice.len() {
        let e = slice[i];
        let left = go_left[e.r as usize] as usize;
        slice[w] = e;
        scratch[j] = e;
        w += left;
        j += 1 - left;
    }
    slice[w..].copy_from_slice(&scratch[..j]);
}
