//! Random Forest, Extra Trees and Newton-boosted trees over a shared CART core.

mod tree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

use tree::{build_tree, Columns, Gini, Newton, MAX_CLASSES};
pub use tree::{MaxFeatures, Node, SplitMode, Tree, TreeParams};

pub const MODEL_VERSION: u32 = 1;

/// Hessians are floored here so saturated rows never yield a zero denominator.
const MIN_HESSIAN: f64 = 1e-16;
/// Base-rate probabilities are clamped into `[P_EPS, 1 - P_EPS]`.
const P_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    RandomForest,
    ExtraTrees,
    GradientBoosted,
}

impl EnsembleKind {
    pub const ALL: [EnsembleKind; 3] = [
        EnsembleKind::RandomForest,
        EnsembleKind::ExtraTrees,
        EnsembleKind::GradientBoosted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnsembleKind::RandomForest => "random_forest",
            EnsembleKind::ExtraTrees => "extra_trees",
            EnsembleKind::GradientBoosted => "gradient_boosted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown classifier `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub kind: EnsembleKind,
    pub n_estimators: usize,
    pub tree: TreeParams,
    /// Boosting only.
    pub learning_rate: f64,
    /// Boosting only.
    pub l2_leaf_reg: f64,
    /// Boosting only: minimum hessian sum per child.
    pub min_child_weight: f64,
    pub seed: u64,
}

impl EnsembleParams {
    /// Defaults for `kind`: sqrt candidate features for the forests (random
    /// thresholds for Extra Trees), all features for boosting.
    pub fn new(kind: EnsembleKind) -> Self {
        let (max_features, split_mode) = match kind {
            EnsembleKind::RandomForest => (MaxFeatures::Sqrt, SplitMode::Exhaustive),
            EnsembleKind::ExtraTrees => (MaxFeatures::Sqrt, SplitMode::RandomThreshold),
            EnsembleKind::GradientBoosted => (MaxFeatures::All, SplitMode::Exhaustive),
        };
        EnsembleParams {
            kind,
            n_estimators: 100,
            tree: TreeParams {
                max_features,
                split_mode,
                ..TreeParams::default()
            },
            learning_rate: 0.1,
            l2_leaf_reg: 1.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }

    pub fn with_size(mut self, n_estimators: usize, max_depth: Option<usize>) -> Self {
        self.n_estimators = n_estimators;
        self.tree.max_depth = max_depth;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_estimators == 0 && self.kind != EnsembleKind::GradientBoosted {
            return Err(Error::Config("n_estimators must be at least 1".into()));
        }
        if self.tree.max_depth == Some(0) {
            return Err(Error::Config("max_depth must be at least 1".into()));
        }
        if self.tree.min_samples_leaf == 0 || self.tree.min_samples_split == 0 {
            return Err(Error::Config("leaf and split minima must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.l2_leaf_reg >= 0.0 && self.min_child_weight >= 0.0) {
            return Err(Error::Config("l2_leaf_reg and min_child_weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelBody {
    /// Probability = mean of the trees' leaf class distributions.
    Forest { trees: Vec<Tree> },
    /// One tree per class per round (a single tree per round when binary).
    Boosted {
        base_score: Vec<f64>,
        learning_rate: f64,
        rounds: Vec<Vec<Tree>>,
        /// Training log-loss before the first round and after each round.
        training_loss: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub version: u32,
    pub kind: EnsembleKind,
    pub params: EnsembleParams,
    pub classes: Vec<u8>,
    pub n_features: usize,
    pub body: ModelBody,
    pub importances: Vec<f64>,
}

impl Ensemble {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Ensemble = serde_json::from_str(text)?;
        if model.version != MODEL_VERSION {
            return Err(Error::Input(format!(
                "model version {} is not supported (expected {MODEL_VERSION})",
                model.version
            )));
        }
        Ok(model)
    }

    pub fn trees(&self) -> Vec<&Tree> {
        match &self.body {
            ModelBody::Forest { trees } => trees.iter().collect(),
            ModelBody::Boosted { rounds, .. } => rounds.iter().flatten().collect(),
        }
    }

    /// Deepest tree in the model, measured structurally.
    pub fn max_tree_depth(&self) -> usize {
        self.trees().iter().map(|t| t.structural_depth()).max().unwrap_or(0)
    }

    /// Number of leading boosting rounds in which no tree was stopped by the
    /// depth limit alone: every leaf at the limit was too small (in rows or
    /// hessian) to split. Fitting at a larger depth reproduces those rounds.
    /// Forests report 0.
    pub fn depth_free_rounds(&self) -> usize {
        let ModelBody::Boosted { rounds, .. } = &self.body else {
            return 0;
        };
        let Some(limit) = self.params.tree.max_depth else {
            return rounds.len();
        };
        let tp = &self.params.tree;
        let min_rows = tp.min_samples_split.max(2).max(2 * tp.min_samples_leaf);
        let splittable = |n: &Node| {
            n.is_leaf()
                && n.depth >= limit
                && n.n_samples >= min_rows
                && n.weight >= 2.0 * self.params.min_child_weight
        };
        rounds
            .iter()
            .position(|round| round.iter().any(|t| t.nodes.iter().any(splittable)))
            .unwrap_or(rounds.len())
    }

    /// A boosted model's first `n` rounds relabelled as a fit at `max_depth`.
    /// Valid when `n <= depth_free_rounds()` and `max_depth` is at least the
    /// fitted depth.
    pub fn boosted_prefix(&self, n: usize, max_depth: Option<usize>) -> Result<Ensemble> {
        self.check_prefix(n, max_depth)?;
        let mut out = self.truncated(n, self.params.tree.max_depth)?;
        out.params.tree.max_depth = max_depth;
        Ok(out)
    }

    fn check_prefix(&self, n: usize, max_depth: Option<usize>) -> Result<()> {
        let deeper_or_equal = match (max_depth, self.params.tree.max_depth) {
            (_, None) => max_depth.is_none(),
            (None, Some(_)) => true,
            (Some(a), Some(b)) => a >= b,
        };
        let same_depth = max_depth == self.params.tree.max_depth;
        if self.kind != EnsembleKind::GradientBoosted
            || n > self.params.n_estimators
            || !deeper_or_equal
            || (!same_depth && n > self.depth_free_rounds())
        {
            return Err(Error::Config(format!(
                "{n} rounds at depth {max_depth:?} are not reproducible from this model"
            )));
        }
        Ok(())
    }

    /// The model that fitting with `n_estimators` and `max_depth` (all other
    /// parameters unchanged) would produce. Forests accept any smaller size
    /// and depth; boosted models only a round prefix at the same depth.
    pub fn truncated(&self, n_estimators: usize, max_depth: Option<usize>) -> Result<Ensemble> {
        if n_estimators > self.params.n_estimators {
            return Err(Error::Config(format!(
                "cannot grow a model from {} to {n_estimators} estimators",
                self.params.n_estimators
            )));
        }
        let deeper = match (max_depth, self.params.tree.max_depth) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(a), Some(b)) => a > b,
        };
        if deeper {
            return Err(Error::Config("cannot deepen a fitted model".into()));
        }
        let mut params = self.params.clone();
        params.n_estimators = n_estimators;
        params.tree.max_depth = max_depth;
        let body = match &self.body {
            ModelBody::Forest { trees } => ModelBody::Forest {
                trees: trees[..n_estimators].iter().map(|t| t.truncated(max_depth)).collect(),
            },
            ModelBody::Boosted {
                base_score,
                learning_rate,
                rounds,
                training_loss,
            } => {
                if max_depth != self.params.tree.max_depth {
                    return Err(Error::Config(
                        "boosted models can only be shortened, not made shallower".into(),
                    ));
                }
                ModelBody::Boosted {
                    base_score: base_score.clone(),
                    learning_rate: *learning_rate,
                    rounds: rounds[..n_estimators].to_vec(),
                    training_loss: training_loss[..=n_estimators].to_vec(),
                }
            }
        };
        let mut out = Ensemble {
            version: MODEL_VERSION,
            kind: self.kind,
            params,
            classes: self.classes.clone(),
            n_features: self.n_features,
            body,
            importances: Vec::new(),
        };
        out.importances = importances_of(&out.trees(), self.n_features);
        Ok(out)
    }
}

fn importances_of(trees: &[&Tree], n_features: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n_features];
    for t in trees {
        t.importance_into(&mut acc);
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        for v in &mut acc {
            *v /= total;
        }
    }
    acc
}

/// Sorted distinct labels and each row's index into them.
fn encode_classes(y: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut classes: Vec<u8> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() > MAX_CLASSES {
        return Err(Error::Fit(format!(
            "{} classes exceed the supported maximum of {MAX_CLASSES}",
            classes.len()
        )));
    }
    let mut lookup = [0u8; 256];
    for (i, &c) in classes.iter().enumerate() {
        lookup[c as usize] = i as u8;
    }
    Ok((classes, y.iter().map(|&c| lookup[c as usize]).collect()))
}

fn check_fit_input(x: &Matrix, y: &[u8]) -> Result<()> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Fit("empty training input".into()));
    }
    if y.len() != x.rows() {
        return Err(Error::Fit(format!("{} labels for {} rows", y.len(), x.rows())));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("training matrix contains non-finite values".into()));
    }
    Ok(())
}

/// Fits one classification tree with the Gini criterion. `classes` lists the
/// class ids the leaf distributions are laid out over; rows with zero weight
/// are ignored.
pub fn fit_tree(
    x: &Matrix,
    y: &[u8],
    sample_weights: Option<&[f64]>,
    params: &TreeParams,
    classes: &[u8],
    seed: u64,
) -> Result<Tree> {
    check_fit_input(x, y)?;
    if classes.is_empty() || classes.len() > MAX_CLASSES {
        return Err(Error::Fit(format!("unsupported class count {}", classes.len())));
    }
    let mut y_idx = Vec::with_capacity(y.len());
    for &c in y {
        let i = classes
            .iter()
            .position(|&k| k == c)
            .ok_or_else(|| Error::Fit(format!("label {c} is not in the class list")))?;
        y_idx.push(i as u8);
    }
    let ones;
    let w = match sample_weights {
        Some(w) if w.len() != y.len() => {
            return Err(Error::Fit(format!("{} weights for {} rows", w.len(), y.len())))
        }
        Some(w) if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) => {
            return Err(Error::Fit("sample weights must be finite and non-negative".into()))
        }
        Some(w) => w,
        None => {
            ones = vec![1.0; y.len()];
            &ones
        }
    };
    let rows: Vec<u32> = (0..y.len() as u32).filter(|&r| w[r as usize] > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::Fit("all sample weights are zero".into()));
    }
    let data = Columns::new(x, params.split_mode == SplitMode::Exhaustive);
    let crit = Gini {
        y: &y_idx,
        w,
        n_classes: classes.len(),
    };
    Ok(build_tree(&data, rows, &crit, params, seed))
}

/// Dispatches on `params.kind`.
pub fn fit(x: &Matrix, y: &[u8], params: &EnsembleParams) -> Result<Ensemble> {
    match params.kind {
        EnsembleKind::RandomForest => fit_random_forest(x, y, params),
        EnsembleKind::ExtraTrees => fit_extra_trees(x, y, params),
        EnsembleKind::GradientBoosted => fit_gbt(x, y, params),
    }
}

fn expect_kind(params: &EnsembleParams, kind: EnsembleKind) -> Result<()> {
    if params.kind != kind {
        return Err(Error::Config(format!(
            "parameters are for {}, not {}",
            params.kind.name(),
            kind.name()
        )));
    }
    params.validate()
}

pub fn fit_random_forest(x: &Matrix, y: &[u8], params: &EnsembleParams) -> Result<Ensemble> {
    expect_kind(params, EnsembleKind::RandomForest)?;
    fit_forest(x, y, params, true)
}

pub fn fit_extra_trees(x: &Matrix, y: &[u8], params: &EnsembleParams) -> Result<Ensemble> {
    expect_kind(params, EnsembleKind::ExtraTrees)?;
    fit_forest(x, y, params, false)
}

fn fit_forest(x: &Matrix, y: &[u8], params: &EnsembleParams, bootstrap: bool) -> Result<Ensemble> {
    check_fit_input(x, y)?;
    let (classes, y_idx) = encode_classes(y)?;
    let data = Columns::new(x, params.tree.split_mode == SplitMode::Exhaustive);
    let n = x.rows();
    let trees: Vec<Tree> = (0..params.n_estimators)
        .into_par_iter()
        .map(|t| {
            let tree_seed = seed::substream(params.seed, t as u64);
            let w = if bootstrap {
                let mut rng = seed::rng(seed::substream(tree_seed, 0));
                let mut w = vec![0.0; n];
                for _ in 0..n {
                    w[rand::Rng::gen_range(&mut rng, 0..n)] += 1.0;
                }
                w
            } else {
                vec![1.0; n]
            };
            let rows: Vec<u32> = (0..n as u32).filter(|&r| w[r as usize] > 0.0).collect();
            let crit = Gini {
                y: &y_idx,
                w: &w,
                n_classes: classes.len(),
            };
            build_tree(&data, rows, &crit, &params.tree, seed::substream(tree_seed, 1))
        })
        .collect();
    let refs: Vec<&Tree> = trees.iter().collect();
    let importances = importances_of(&refs, x.cols());
    Ok(Ensemble {
        version: MODEL_VERSION,
        kind: params.kind,
        params: params.clone(),
        classes,
        n_features: x.cols(),
        body: ModelBody::Forest { trees },
        importances,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary logistic loss of raw score `score` against `label ∈ {0, 1}`.
pub fn logistic_loss(score: f64, label: f64) -> f64 {
    // log(1 + e^s) - y*s, evaluated without overflow.
    let softplus = if score > 0.0 {
        score + (-score).exp().ln_1p()
    } else {
        score.exp().ln_1p()
    };
    softplus - label * score
}

/// First and second derivative of [`logistic_loss`] with respect to the score.
pub fn logistic_grad_hess(score: f64, label: f64) -> (f64, f64) {
    let p = sigmoid(score);
    (p - label, p * (1.0 - p))
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn mean_loss(scores: &[f64], y_idx: &[u8], k: usize) -> f64 {
    let n = y_idx.len();
    if k == 2 {
        scores
            .iter()
            .zip(y_idx)
            .map(|(&s, &c)| logistic_loss(s, c as f64))
            .sum::<f64>()
            / n as f64
    } else {
        let mut p = vec![0.0; k];
        let mut total = 0.0;
        for (i, &c) in y_idx.iter().enumerate() {
            softmax_into(&scores[i * k..(i + 1) * k], &mut p);
            total -= p[c as usize].max(f64::MIN_POSITIVE).ln();
        }
        total / n as f64
    }
}

pub fn fit_gbt(x: &Matrix, y: &[u8], params: &EnsembleParams) -> Result<Ensemble> {
    boost(x, y, params, None)
}

/// Continues `prior`, a boosted fit on the same data, up to the rounds and
/// depth of `params`. The result equals `fit_gbt(x, y, params)` provided no
/// round of `prior` was cut short by its depth limit.
pub fn resume_gbt(x: &Matrix, y: &[u8], prior: &Ensemble, params: &EnsembleParams) -> Result<Ensemble> {
    let mut same = prior.params.clone();
    same.n_estimators = params.n_estimators;
    same.tree.max_depth = params.tree.max_depth;
    let rounds_done = prior.params.n_estimators;
    if same != *params || rounds_done > params.n_estimators {
        return Err(Error::Config("resumed fit must only add rounds or depth".into()));
    }
    prior.check_prefix(rounds_done, params.tree.max_depth)?;
    boost(x, y, params, Some(prior))
}

fn boost(x: &Matrix, y: &[u8], params: &EnsembleParams, prior: Option<&Ensemble>) -> Result<Ensemble> {
    expect_kind(params, EnsembleKind::GradientBoosted)?;
    check_fit_input(x, y)?;
    let (classes, y_idx) = encode_classes(y)?;
    let n = x.rows();
    let k = classes.len();
    let data = Columns::new(x, true);
    let all_rows: Vec<u32> = (0..n as u32).collect();
    let lr = params.learning_rate;

    // Binary models keep one score per row; softmax keeps k.
    let width = if k == 2 { 1 } else { k };
    let base_score = if k == 2 {
        let p = (y_idx.iter().filter(|&&c| c == 1).count() as f64 / n as f64).clamp(P_EPS, 1.0 - P_EPS);
        vec![(p / (1.0 - p)).ln()]
    } else {
        vec![0.0; k]
    };
    let mut scores: Vec<f64> = (0..n).flat_map(|_| base_score.iter().copied()).collect();
    let loss_of = |scores: &[f64]| if k == 1 { 0.0 } else { mean_loss(scores, &y_idx, k) };
    let mut training_loss = vec![loss_of(&scores)];
    let mut rounds: Vec<Vec<Tree>> = Vec::with_capacity(params.n_estimators);
    if let Some(ModelBody::Boosted {
        rounds: done,
        training_loss: done_loss,
        ..
    }) = prior.map(|m| &m.body)
    {
        if prior.is_some_and(|m| m.classes != classes || m.n_features != x.cols()) {
            return Err(Error::Config("resumed fit must use the same data".into()));
        }
        for trees in done {
            for i in 0..n {
                let row = x.row(i);
                for (c, t) in trees.iter().enumerate() {
                    scores[i * width + c] += lr * t.leaf(row).value[0];
                }
            }
        }
        rounds = done.clone();
        training_loss = done_loss.clone();
    }

    if k >= 2 {
        let mut gh = vec![vec![[0.0; 2]; n]; width];
        let mut p = vec![0.0; k];
        for round in rounds.len()..params.n_estimators {
            for i in 0..n {
                if k == 2 {
                    let (gi, hi) = logistic_grad_hess(scores[i], y_idx[i] as f64);
                    gh[0][i] = [gi, hi.max(MIN_HESSIAN)];
                } else {
                    softmax_into(&scores[i * k..(i + 1) * k], &mut p);
                    for c in 0..k {
                        let target = if y_idx[i] as usize == c { 1.0 } else { 0.0 };
                        gh[c][i] = [p[c] - target, (p[c] * (1.0 - p[c])).max(MIN_HESSIAN)];
                    }
                }
            }
            let round_seed = seed::substream(params.seed, round as u64);
            let trees: Vec<Tree> = (0..width)
                .into_par_iter()
                .map(|c| {
                    let crit = Newton {
                        gh: &gh[c],
                        lambda: params.l2_leaf_reg,
                        min_child_weight: params.min_child_weight,
                    };
                    build_tree(
                        &data,
                        all_rows.clone(),
                        &crit,
                        &params.tree,
                        seed::substream(round_seed, c as u64),
                    )
                })
                .collect();
            for i in 0..n {
                let row = x.row(i);
                for (c, t) in trees.iter().enumerate() {
                    scores[i * width + c] += lr * t.leaf(row).value[0];
                }
            }
            training_loss.push(loss_of(&scores));
            rounds.push(trees);
        }
    }

    let refs: Vec<&Tree> = rounds.iter().flatten().collect();
    let importances = importances_of(&refs, x.cols());
    Ok(Ensemble {
        version: MODEL_VERSION,
        kind: params.kind,
        params: params.clone(),
        classes,
        n_features: x.cols(),
        body: ModelBody::Boosted {
            base_score,
            learning_rate: lr,
            rounds,
            training_loss,
        },
        importances,
    })
}

/// Per-row class probabilities laid out in `model.classes` order.
pub fn predict_proba(model: &Ensemble, x: &Matrix) -> Result<Vec<Vec<f64>>> {
    if x.cols() != model.n_features {
        return Err(Error::Schema(format!(
            "model expects {} features, input has {}",
            model.n_features,
            x.cols()
        )));
    }
    let k = model.classes.len();
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            match &model.body {
                ModelBody::Forest { trees } => {
                    let mut acc = vec![0.0; k];
                    for t in trees {
                        for (a, v) in acc.iter_mut().zip(&t.leaf(row).value) {
                            *a += v;
                        }
                    }
                    let m = trees.len().max(1) as f64;
                    acc.iter_mut().for_each(|a| *a /= m);
                    acc
                }
                ModelBody::Boosted {
                    base_score,
                    learning_rate,
                    rounds,
                    ..
                } => {
                    let mut s = base_score.clone();
                    for round in rounds {
                        for (c, t) in round.iter().enumerate() {
                            s[c] += learning_rate * t.leaf(row).value[0];
                        }
                    }
                    proba_from_scores(&s, k)
                }
            }
        })
        .collect();
    Ok(rows)
}

fn proba_from_scores(s: &[f64], k: usize) -> Vec<f64> {
    match k {
        1 => vec![1.0],
        2 => {
            let p = sigmoid(s[0]);
            vec![1.0 - p, p]
        }
        _ => {
            let mut p = vec![0.0; k];
            softmax_into(s, &mut p);
            p
        }
    }
}

/// Hard labels (default threshold) for several reduced versions of one model
/// in a single pass over the trees. Stage `(n, d)` yields exactly the labels
/// of `model.truncated(n, d)` for forests and of `model.boosted_prefix(n, d)`
/// for boosted models.
pub fn staged_predict(
    model: &Ensemble,
    x: &Matrix,
    stages: &[(usize, Option<usize>)],
) -> Result<Vec<Vec<u8>>> {
    if x.cols() != model.n_features {
        return Err(Error::Schema(format!(
            "model expects {} features, input has {}",
            model.n_features,
            x.cols()
        )));
    }
    let k = model.classes.len();
    let n_max = stages.iter().map(|s| s.0).max().unwrap_or(0);
    if n_max > model.params.n_estimators {
        return Err(Error::Config(format!(
            "stage of {n_max} estimators exceeds the model's {}",
            model.params.n_estimators
        )));
    }
    // Stage indices ending after each estimator count.
    let mut ends: Vec<Vec<usize>> = vec![Vec::new(); n_max + 1];
    for (i, s) in stages.iter().enumerate() {
        ends[s.0].push(i);
    }
    let label = |p: &[f64]| label_of(&model.classes, p, None);

    let per_row: Vec<Vec<u8>> = match &model.body {
        ModelBody::Forest { trees } => {
            let own = model.params.tree.max_depth.unwrap_or(usize::MAX);
            let mut depths: Vec<usize> = Vec::new();
            for s in stages {
                let d = s.1.unwrap_or(usize::MAX);
                if d > own {
                    return Err(Error::Config("cannot deepen a fitted model".into()));
                }
                depths.push(d);
            }
            depths.sort_unstable();
            depths.dedup();
            let slot: Vec<usize> = stages
                .iter()
                .map(|s| depths.binary_search(&s.1.unwrap_or(usize::MAX)).expect("collected depth"))
                .collect();
            (0..x.rows())
                .into_par_iter()
                .map(|i| {
                    let row = x.row(i);
                    let mut out = vec![0u8; stages.len()];
                    let mut acc = vec![vec![0.0; k]; depths.len()];
                    let mut path: Vec<&Node> = Vec::new();
                    let finish = |n: usize, acc: &[Vec<f64>], out: &mut [u8]| {
                        let m = n.max(1) as f64;
                        for &si in &ends[n] {
                            let p: Vec<f64> = acc[slot[si]].iter().map(|a| a / m).collect();
                            out[si] = label(&p);
                        }
                    };
                    finish(0, &acc, &mut out);
                    for (t, tree) in trees[..n_max].iter().enumerate() {
                        path.clear();
                        let mut node = &tree.nodes[0];
                        path.push(node);
                        while let Some(f) = node.feature {
                            node = if row[f] <= node.threshold {
                                &tree.nodes[node.left]
                            } else {
                                &tree.nodes[node.right]
                            };
                            path.push(node);
                        }
                        for (a, &d) in acc.iter_mut().zip(&depths) {
                            let v = &path[d.min(path.len() - 1)].value;
                            for (ac, v) in a.iter_mut().zip(v) {
                                *ac += v;
                            }
                        }
                        finish(t + 1, &acc, &mut out);
                    }
                    out
                })
                .collect()
        }
        ModelBody::Boosted {
            base_score,
            learning_rate,
            rounds,
            ..
        } => {
            for s in stages {
                model.check_prefix(s.0, s.1)?;
            }
            (0..x.rows())
                .into_par_iter()
                .map(|i| {
                    let row = x.row(i);
                    let mut out = vec![0u8; stages.len()];
                    let mut s = base_score.clone();
                    for &si in &ends[0] {
                        out[si] = label(&proba_from_scores(&s, k));
                    }
                    for (r, round) in rounds[..n_max].iter().enumerate() {
                        for (c, t) in round.iter().enumerate() {
                            s[c] += learning_rate * t.leaf(row).value[0];
                        }
                        if !ends[r + 1].is_empty() {
                            let l = label(&proba_from_scores(&s, k));
                            for &si in &ends[r + 1] {
                                out[si] = l;
                            }
                        }
                    }
                    out
                })
                .collect()
        }
    };
    Ok((0..stages.len())
        .map(|si| per_row.iter().map(|r| r[si]).collect())
        .collect())
}

/// Hard labels. Binary models predict `classes[1]` iff its probability is at
/// least `threshold` (default 0.5); otherwise argmax, ties to the smaller id.
pub fn predict(model: &Ensemble, x: &Matrix, threshold: Option<f64>) -> Result<Vec<u8>> {
    let proba = predict_proba(model, x)?;
    Ok(labels_from_proba(&model.classes, &proba, threshold))
}

pub fn labels_from_proba(classes: &[u8], proba: &[Vec<f64>], threshold: Option<f64>) -> Vec<u8> {
    proba.iter().map(|p| label_of(classes, p, threshold)).collect()
}

fn label_of(classes: &[u8], p: &[f64], threshold: Option<f64>) -> u8 {
    if classes.len() == 2 {
        if p[1] >= threshold.unwrap_or(0.5) {
            classes[1]
        } else {
            classes[0]
        }
    } else {
        let mut best = 0;
        for c in 1..p.len() {
            if p[c] > p[best] {
                best = c;
            }
        }
        classes[best]
    }
}

/// Mean decrease in impurity, normalised to sum to 1 (all zero without splits).
pub fn feature_importance(model: &Ensemble) -> Vec<f64> {
    model.importances.clone()
}
