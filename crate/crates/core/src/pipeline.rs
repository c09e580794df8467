//! End-to-end orchestration: ingest, labels, split, preprocess, cluster, VIF,
//! resample, tune, train and evaluate, for the response, risk and
//! response-risk model modes.
//!
//! Every stage that draws random numbers takes its seed from
//! [`seed::stage_seed`] of the master seed and the stage name, so the stages
//! are independent of one another's consumption.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{self, Ensemble, EnsembleKind, EnsembleParams};
use crate::error::{Error, Result};
use crate::evaluate::{self, ConfusionMatrix, MetricsReport, PayoffMatrix};
use crate::featsel::{self, Cut, VifTrace};
use crate::frame::{self, Frame, IngestConfig, LabelVector};
use crate::matrix::Matrix;
use crate::preprocess::{self, CodeRanges, DroppedColumn};
use crate::report;
use crate::resample::{self, AdasynConfig, AdasynReport};
use crate::seed;
use crate::synthgen::{self, GeneratorSpec};

pub const REPORT_VERSION: u32 = 1;

/// Normative stage order.
pub const STAGES: [&str; 10] = [
    "ingest",
    "labels",
    "split",
    "preprocess",
    "cluster",
    "vif",
    "resample",
    "tune",
    "train",
    "evaluate",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Responders (opened a card) vs everyone else.
    Response,
    /// Delinquent vs good, booked customers only.
    Risk,
    /// Three classes: good, delinquent, never opened.
    ResponseRisk,
}

impl ModelMode {
    pub const ALL: [ModelMode; 3] = [ModelMode::Response, ModelMode::Risk, ModelMode::ResponseRisk];

    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Response => "response",
            ModelMode::Risk => "risk",
            ModelMode::ResponseRisk => "response_risk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }

    pub fn default_objective(self) -> Objective {
        match self {
            ModelMode::Response => Objective::Recall,
            ModelMode::Risk => Objective::Specificity,
            ModelMode::ResponseRisk => Objective::Accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Accuracy,
    /// Recall of class 1 for binary labels, macro recall otherwise.
    Recall,
    /// Precision of class 1 for binary labels, macro precision otherwise.
    Precision,
    /// Recall of class 0; binary labels only.
    Specificity,
}

impl Objective {
    pub fn score(self, cm: &ConfusionMatrix) -> Result<f64> {
        let m = evaluate::classification_metrics(cm);
        let binary = cm.classes.len() == 2;
        Ok(match self {
            Objective::Accuracy => m.accuracy,
            Objective::Recall if binary => m.recall[1],
            Objective::Recall => m.macro_recall,
            Objective::Precision if binary => m.precision[1],
            Objective::Precision => m.macro_precision,
            Objective::Specificity => m
                .specificity
                .ok_or_else(|| Error::Config("specificity needs binary labels".into()))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Csv(PathBuf),
    Generator(GeneratorSpec),
}

/// Integer hyperparameter domain: an inclusive range or explicit values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IntDomain {
    Range { min: usize, max: usize },
    Values(Vec<usize>),
}

impl IntDomain {
    pub fn values(&self) -> Vec<usize> {
        match self {
            IntDomain::Range { min, max } => (*min..=*max).collect(),
            IntDomain::Values(v) => v.clone(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            IntDomain::Range { min, max } => min > max,
            IntDomain::Values(v) => v.is_empty(),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match self {
            IntDomain::Range { min, max } => rng.gen_range(*min..=*max),
            IntDomain::Values(v) => v[rng.gen_range(0..v.len())],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    Grid,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub strategy: SearchStrategy,
    pub max_depth: IntDomain,
    pub n_estimators: IntDomain,
    /// Random strategy only.
    pub trials: usize,
    /// Overrides the seed derived from the master seed.
    pub seed: Option<u64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            strategy: SearchStrategy::Random,
            max_depth: IntDomain::Range { min: 1, max: 50 },
            n_estimators: IntDomain::Range { min: 10, max: 400 },
            trials: 25,
            seed: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth.is_empty() || self.n_estimators.is_empty() {
            return Err(Error::Config("empty search space".into()));
        }
        if self.max_depth.values().contains(&0) || self.n_estimators.values().contains(&0) {
            return Err(Error::Config("search domains must be at least 1".into()));
        }
        if self.strategy == SearchStrategy::Random && self.trials == 0 {
            return Err(Error::Config("random search needs at least one trial".into()));
        }
        Ok(())
    }

    /// `(n_estimators, max_depth)` candidates in evaluation order.
    pub fn candidates(&self, seed: u64) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        Ok(match self.strategy {
            SearchStrategy::Grid => {
                let depths = self.max_depth.values();
                self.n_estimators
                    .values()
                    .into_iter()
                    .flat_map(|n| depths.iter().map(move |&d| (n, d)))
                    .collect()
            }
            SearchStrategy::Random => {
                let mut rng = seed::rng(seed);
                (0..self.trials)
                    .map(|_| {
                        let n = self.n_estimators.sample(&mut rng);
                        let d = self.max_depth.sample(&mut rng);
                        (n, d)
                    })
                    .collect()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input: InputSource,
    pub label_column: String,
    pub id_columns: Vec<String>,
    pub mode: ModelMode,
    pub classifiers: Vec<EnsembleKind>,
    pub train_fraction: f64,
    pub code_ranges: CodeRanges,
    pub missing_drop_threshold: f64,
    pub cluster_cut: Cut,
    pub vif_threshold: f64,
    /// The seed field is ignored; the resample stage seed is used.
    pub adasyn: AdasynConfig,
    pub search: SearchConfig,
    /// Risk mode only.
    pub payoff: PayoffMatrix,
    /// Defaults by mode: recall, specificity, accuracy.
    pub objective: Option<Objective>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    /// Refit each tuned configuration from scratch in the train stage and
    /// fail unless it equals the model selected during tuning.
    pub verify_refit: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: InputSource::Generator(GeneratorSpec::default()),
            label_column: "goodbad".into(),
            id_columns: Vec::new(),
            mode: ModelMode::Response,
            classifiers: EnsembleKind::ALL.to_vec(),
            train_fraction: 0.7,
            code_ranges: CodeRanges::default(),
            missing_drop_threshold: 0.5,
            cluster_cut: Cut::default(),
            vif_threshold: featsel::DEFAULT_VIF_THRESHOLD,
            adasyn: AdasynConfig::default(),
            search: SearchConfig::default(),
            payoff: PayoffMatrix::default_risk(),
            objective: None,
            out_dir: None,
            seed: 42,
            verify_refit: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn objective(&self) -> Objective {
        self.objective.unwrap_or(self.mode.default_objective())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classifiers.is_empty() {
            return Err(Error::Config("no classifiers selected".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.missing_drop_threshold) {
            return Err(Error::Config("missing_drop_threshold outside [0, 1]".into()));
        }
        if self.vif_threshold.is_nan() || self.vif_threshold < 1.0 {
            return Err(Error::Config(format!("vif_threshold {} below 1", self.vif_threshold)));
        }
        if self.objective() == Objective::Specificity && self.mode == ModelMode::ResponseRisk {
            return Err(Error::Config("specificity needs a binary mode".into()));
        }
        if self.mode == ModelMode::Risk && self.payoff.cents.len() != 2 {
            return Err(Error::Config("risk payoff must be 2x2".into()));
        }
        self.adasyn.validate()?;
        self.search.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub best: EnsembleParams,
    pub best_objective: f64,
    pub trace: Vec<Trial>,
    /// The model fitted with `best` on the training data.
    pub model: Ensemble,
}

fn better(a: &Trial, b: &Trial) -> bool {
    a.objective > b.objective
        || (a.objective == b.objective
            && (a.n_estimators, a.max_depth) < (b.n_estimators, b.max_depth))
}

/// Searches `(n_estimators, max_depth)` by fitting on `train` and scoring
/// `objective` on `valid`. Returns the best trial, ties to fewer estimators
/// and then shallower trees.
///
/// Candidates share work: a forest is fitted once at the largest size and
/// depth and cut down per candidate, and boosted models reuse a shallower
/// fit whenever its leading rounds never touched the depth limit. Both give
/// the exact model a direct fit would.
pub fn tune(
    train: (&Matrix, &[u8]),
    valid: (&Matrix, &[u8]),
    base: &EnsembleParams,
    objective: Objective,
    search: &SearchConfig,
    search_seed: u64,
) -> Result<TuneResult> {
    let candidates = search.candidates(search_seed)?;
    let (x, y) = train;
    let (vx, vy) = valid;
    let mut classes: Vec<u8> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if objective == Objective::Specificity && classes.len() != 2 {
        return Err(Error::Config("specificity needs binary labels".into()));
    }

    let score = |labels: &[u8], classes: &[u8]| -> Result<f64> {
        let cm = evaluate::confusion(vy, labels, classes)?;
        objective.score(&cm)
    };

    // Each candidate is answered by a fitted model and the stage of it that
    // equals the candidate's direct fit.
    let (fitted, source): (Vec<Ensemble>, Vec<usize>) = if base.kind == EnsembleKind::GradientBoosted {
        boosted_fits(x, y, base, &candidates)?
    } else {
        let n_max = candidates.iter().map(|c| c.0).max().expect("non-empty");
        let d_max = candidates.iter().map(|c| c.1).max().expect("non-empty");
        let start = Instant::now();
        let big = ensemble::fit(x, y, &base.clone().with_size(n_max, Some(d_max)))?;
        log::debug!(
            "{}: fitted {n_max} trees at depth {d_max} in {:.2?}",
            base.kind.name(),
            start.elapsed()
        );
        (vec![big], vec![0; candidates.len()])
    };
    let start = Instant::now();
    let mut objectives = vec![0.0; candidates.len()];
    for (m, model) in fitted.iter().enumerate() {
        let idx: Vec<usize> = (0..candidates.len()).filter(|&i| source[i] == m).collect();
        let stages: Vec<(usize, Option<usize>)> =
            idx.iter().map(|&i| (candidates[i].0, Some(candidates[i].1))).collect();
        let labels = ensemble::staged_predict(model, vx, &stages)?;
        for (&i, l) in idx.iter().zip(&labels) {
            objectives[i] = score(l, &model.classes)?;
        }
    }
    log::debug!("scored {} candidates in {:.2?}", candidates.len(), start.elapsed());

    let trace: Vec<Trial> = candidates
        .iter()
        .zip(&objectives)
        .map(|(&(n, d), &o)| Trial {
            n_estimators: n,
            max_depth: d,
            objective: o,
        })
        .collect();
    let mut best = 0;
    for i in 1..trace.len() {
        if better(&trace[i], &trace[best]) {
            best = i;
        }
    }
    let (n, d) = candidates[best];
    let src = &fitted[source[best]];
    let model = if base.kind == EnsembleKind::GradientBoosted {
        src.boosted_prefix(n, Some(d))?
    } else {
        src.truncated(n, Some(d))?
    };
    Ok(TuneResult {
        best: model.params.clone(),
        best_objective: trace[best].objective,
        trace,
        model,
    })
}

/// Boosted fits covering every candidate, and for each candidate the index
/// of the fit whose round prefix reproduces it. Depths are handled in
/// ascending order, in waves of one depth per worker thread. A depth reuses
/// an earlier fit that never hit its limit within the needed rounds;
/// otherwise it is fitted for the most rounds any of its candidates asks for,
/// continuing from the longest limit-free round prefix of any earlier fit.
fn boosted_fits(
    x: &Matrix,
    y: &[u8],
    base: &EnsembleParams,
    candidates: &[(usize, usize)],
) -> Result<(Vec<Ensemble>, Vec<usize>)> {
    let mut depths: Vec<usize> = candidates.iter().map(|c| c.1).collect();
    depths.sort_unstable();
    depths.dedup();
    let need = |d: usize| candidates.iter().filter(|c| c.1 == d).map(|c| c.0).max().expect("depth from candidates");
    let wave = rayon::current_num_threads().max(1);
    let mut fitted: Vec<Ensemble> = Vec::new();
    let mut by_depth: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pending: &[usize] = &depths;
    while !pending.is_empty() {
        let mut todo: Vec<(usize, Option<usize>)> = Vec::new();
        let mut taken = 0;
        for &d in pending {
            let free = |m: &Ensemble| m.depth_free_rounds();
            if let Some(m) = fitted.iter().rposition(|m| m.params.n_estimators >= need(d) && free(m) >= need(d)) {
                by_depth.insert(d, m);
            } else if todo.len() < wave {
                let resume = fitted
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| free(m) > 0)
                    .max_by_key(|(i, m)| (free(m), *i))
                    .map(|(i, _)| i);
                todo.push((d, resume));
            } else {
                break;
            }
            taken += 1;
        }
        pending = &pending[taken..];
        let fits: Vec<Ensemble> = todo
            .par_iter()
            .map(|&(d, resume)| {
                let params = base.clone().with_size(need(d), Some(d));
                let start = Instant::now();
                let prior = match resume {
                    Some(i) => {
                        let m = &fitted[i];
                        Some(m.boosted_prefix(m.depth_free_rounds(), m.params.tree.max_depth)?)
                    }
                    None => None,
                };
                let m = match &prior {
                    Some(p) => ensemble::resume_gbt(x, y, p, &params),
                    None => ensemble::fit(x, y, &params),
                };
                log::debug!(
                    "boosting: {} rounds at depth {d} in {:.2?}, resumed after {} rounds",
                    need(d),
                    start.elapsed(),
                    prior.map_or(0, |p| p.params.n_estimators)
                );
                m
            })
            .collect::<Result<_>>()?;
        for ((d, _), m) in todo.into_iter().zip(fits) {
            by_depth.insert(d, fitted.len());
            fitted.push(m);
        }
    }
    let source = candidates.iter().map(|c| by_depth[&c.1]).collect();
    Ok((fitted, source))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    /// Binary ROC AUC, or the mean one-vs-rest AUC for three classes; absent
    /// when a class is missing from the evaluated rows.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedImportance {
    pub feature: String,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub kind: EnsembleKind,
    pub params: EnsembleParams,
    pub objective: f64,
    pub tuning_trace: Vec<Trial>,
    pub train: EvalSummary,
    pub validation: EvalSummary,
    /// Sorted by decreasing importance, ties by feature name.
    pub importances: Vec<NamedImportance>,
    pub model_file: Option<String>,
    pub roc_files: Vec<String>,
    /// Risk mode: validation profit in cents.
    pub profit_cents: Option<i64>,
    pub profit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub input_rows: usize,
    pub modelled_rows: usize,
    pub train_rows: usize,
    pub valid_rows: usize,
    pub train_rows_resampled: usize,
    pub train_class_counts: BTreeMap<u8, usize>,
    pub valid_class_counts: BTreeMap<u8, usize>,
    pub train_resampled_class_counts: BTreeMap<u8, usize>,
    /// Binary modes: share of class 1 among validation rows.
    pub positive_base_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stages: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub dropped_columns: Vec<DroppedColumn>,
    pub preprocessed_columns: Vec<String>,
    pub clusters: Vec<Vec<String>>,
    pub representatives: Vec<String>,
    pub vif_trace: VifTrace,
    pub selected_features: Vec<String>,
    /// Per oversampled class; per-row detail lives in `adasyn_report.json`.
    pub adasyn: Vec<AdasynReport>,
    pub validation_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub mode: ModelMode,
    pub objective: Objective,
    pub master_seed: u64,
    pub data: DataSummary,
    pub provenance: Provenance,
    pub classifiers: Vec<ClassifierReport>,
    /// Classifier with the best validation objective (ties to list order).
    pub best_classifier: EnsembleKind,
    /// Milliseconds per stage; excluded from the canonical form.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn canonical_json(&self) -> Result<String> {
        report::canonical_json(self)
    }

    pub fn classifier(&self, kind: EnsembleKind) -> Option<&ClassifierReport> {
        self.classifiers.iter().find(|c| c.kind == kind)
    }
}

/// SHA-256 (hex) of a frame's byte image.
pub fn frame_hash(frame: &Frame) -> String {
    hex(&Sha256::digest(frame.to_le_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn class_counts(y: &[u8]) -> BTreeMap<u8, usize> {
    let mut m = BTreeMap::new();
    for &c in y {
        *m.entry(c).or_insert(0) += 1;
    }
    m
}

/// Runs the stages in order, timing each and tagging failures with the stage
/// name and the stages already completed.
struct Runner {
    completed: Vec<String>,
    timings: BTreeMap<String, f64>,
}

impl Runner {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        log::info!("stage {name}");
        match f() {
            Ok(v) => {
                self.timings
                    .insert(name.to_string(), start.elapsed().as_secs_f64() * 1e3);
                self.completed.push(name.to_string());
                Ok(v)
            }
            Err(e) => Err(Error::Stage {
                stage: name.to_string(),
                completed: self.completed.clone(),
                source: Box::new(e),
            }),
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn evaluate_split(model: &Ensemble, x: &Matrix, y: &[u8]) -> Result<(EvalSummary, Vec<Vec<f64>>)> {
    let proba = ensemble::predict_proba(model, x)?;
    let pred = ensemble::labels_from_proba(&model.classes, &proba, None);
    let confusion = evaluate::confusion(y, &pred, &model.classes)?;
    let metrics = evaluate::classification_metrics(&confusion);
    let present = class_counts(y).len();
    let auc = if present < 2 {
        None
    } else if model.classes.len() == 2 {
        let y01: Vec<u8> = y.iter().map(|&c| u8::from(c == model.classes[1])).collect();
        let s: Vec<f64> = proba.iter().map(|p| p[1]).collect();
        Some(evaluate::roc_auc(&y01, &s)?.auc)
    } else {
        Some(evaluate::multiclass_auc(y, &proba, &model.classes)?)
    };
    Ok((
        EvalSummary {
            rows: y.len(),
            confusion,
            metrics,
            auc,
        },
        proba,
    ))
}

struct Prepared {
    input_rows: usize,
    frame: Frame,
    labels: LabelVector,
}

fn ingest(cfg: &PipelineConfig) -> Result<Frame> {
    match &cfg.input {
        InputSource::Csv(path) => {
            let ic = IngestConfig {
                label_column: Some(cfg.label_column.clone()),
                id_columns: cfg.id_columns.clone(),
                missing_token: String::new(),
            };
            frame::read_csv(path, &ic)
        }
        InputSource::Generator(spec) => {
            let mut spec = spec.clone();
            spec.label_column = cfg.label_column.clone();
            Ok(synthgen::generate(&spec)?.0)
        }
    }
}

fn mode_labels(cfg: &PipelineConfig, frame: Frame) -> Result<Prepared> {
    let input_rows = frame.n_rows();
    let tri = frame::derive_labels(&frame, &cfg.label_column)?;
    let (frame, labels) = match cfg.mode {
        ModelMode::Response => (frame.clone(), frame::remap_response(&tri)?),
        ModelMode::Risk => frame::subset_risk(&frame, &tri)?,
        ModelMode::ResponseRisk => (frame, tri),
    };
    if labels.present_classes().len() < 2 {
        return Err(Error::Pipeline(format!(
            "{} mode needs at least two classes, found {:?}",
            cfg.mode.name(),
            labels.present_classes()
        )));
    }
    Ok(Prepared {
        input_rows,
        frame,
        labels,
    })
}

/// Runs the full pipeline. On failure with an output directory set, a
/// `failure.json` with the failed stage and the completed ones is written.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    let result = run_inner(cfg);
    if let (Err(Error::Stage { stage, completed, source }), Some(dir)) = (&result, &cfg.out_dir) {
        let dump = serde_json::json!({
            "failed_stage": stage,
            "completed_stages": completed,
            "error": source.to_string(),
        });
        let _ = write(&dir.join("failure.json"), &format!("{dump:#}\n"));
    }
    result
}

fn run_inner(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut run = Runner {
        completed: Vec::new(),
        timings: BTreeMap::new(),
    };
    let objective = cfg.objective();
    let mut seeds = BTreeMap::new();
    for name in ["split", "resample", "tune"] {
        seeds.insert(name.to_string(), seed::stage_seed(cfg.seed, name));
    }
    for kind in &cfg.classifiers {
        let key = format!("train/{}", kind.name());
        seeds.insert(key.clone(), seed::stage_seed(cfg.seed, &key));
    }
    let out = cfg.out_dir.as_deref();

    let raw = run.stage("ingest", || ingest(cfg))?;
    let prepared = run.stage("labels", || mode_labels(cfg, raw))?;

    let (train_raw, valid_raw, y_train, y_valid, valid_hash) = run.stage("split", || {
        let split = frame::stratified_split(&prepared.labels, cfg.train_fraction, seeds["split"])?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| prepared.labels.classes[i]).collect::<Vec<u8>>();
        let valid = prepared.frame.select_rows(&split.valid_indices);
        let hash = frame_hash(&valid.features_only());
        Ok((
            prepared.frame.select_rows(&split.train_indices),
            valid,
            pick(&split.train_indices),
            pick(&split.valid_indices),
            hash,
        ))
    })?;

    let (pre_model, train_p, valid_p) = run.stage("preprocess", || {
        let model = preprocess::fit_preprocessor(&train_raw, &cfg.code_ranges, cfg.missing_drop_threshold)?;
        let train_p = preprocess::apply_preprocessor(&model, &train_raw)?.features_only();
        let valid_p = preprocess::apply_preprocessor(&model, &valid_raw)?.features_only();
        if let Some(dir) = out {
            write(&dir.join("preprocess_model.json"), &model.to_json()?)?;
        }
        Ok((model, train_p, valid_p))
    })?;

    let (clustering, representatives) = run.stage("cluster", || {
        let corr = featsel::correlation_matrix(&train_p)?;
        let clustering = featsel::cluster_features(&corr, cfg.cluster_cut)?;
        let reps = featsel::pick_representatives(&train_p, &clustering)?;
        if let Some(dir) = out {
            write(&dir.join("dendrogram.json"), &clustering.dendrogram_json()?)?;
        }
        Ok((clustering, reps))
    })?;

    let vif_trace = run.stage("vif", || {
        let trace = featsel::vif_prune(&train_p.select_columns(&representatives)?, cfg.vif_threshold)?;
        if let Some(dir) = out {
            write(&dir.join("vif_trace.csv"), &trace.to_csv())?;
        }
        Ok(trace)
    })?;
    let selected = vif_trace.kept_names();

    let (x_train_orig, x_train, y_train_rs, x_valid, adasyn_reports) = run.stage("resample", || {
        let x_train = train_p.select_columns(&selected)?.feature_matrix()?;
        let x_valid = valid_p.select_columns(&selected)?.feature_matrix()?;
        let acfg = AdasynConfig {
            seed: seeds["resample"],
            ..cfg.adasyn.clone()
        };
        let (xr, yr, reports) = if cfg.mode == ModelMode::ResponseRisk {
            resample::adasyn_multiclass(&x_train, &y_train, &acfg)?
        } else {
            let (xr, yr, r) = resample::adasyn(&x_train, &y_train, &acfg)?;
            (xr, yr, vec![r])
        };
        if let Some(dir) = out {
            write(&dir.join("adasyn_report.json"), &serde_json::to_string_pretty(&reports)?)?;
        }
        Ok((x_train, xr, yr, x_valid, reports))
    })?;

    let search_seed = cfg.search.seed.unwrap_or(seeds["tune"]);
    let tuned: Vec<TuneResult> = run.stage("tune", || {
        cfg.classifiers
            .iter()
            .map(|&kind| {
                let base = EnsembleParams::new(kind).with_seed(seeds[&format!("train/{}", kind.name())]);
                log::info!("tuning {}", kind.name());
                tune(
                    (&x_train, &y_train_rs),
                    (&x_valid, &y_valid),
                    &base,
                    objective,
                    &cfg.search,
                    seed::substream(search_seed, kind as u64),
                )
            })
            .collect()
    })?;

    let models: Vec<Ensemble> = run.stage("train", || {
        tuned
            .iter()
            .map(|t| {
                let model = t.model.clone();
                if cfg.verify_refit && ensemble::fit(&x_train, &y_train_rs, &t.best)? != model {
                    return Err(Error::Pipeline(format!(
                        "refitted {} differs from its tuning candidate",
                        t.best.kind.name()
                    )));
                }
                if let Some(dir) = out {
                    write(
                        &dir.join("models").join(format!("{}.json", t.best.kind.name())),
                        &model.to_json()?,
                    )?;
                }
                Ok(model)
            })
            .collect()
    })?;

    let (classifiers, best_classifier) = run.stage("evaluate", || {
        if frame_hash(&valid_raw.features_only()) != valid_hash || x_valid.rows() != y_valid.len() {
            return Err(Error::Pipeline("validation partition changed after the split".into()));
        }
        let mut reports = Vec::new();
        for (model, t) in models.iter().zip(&tuned) {
            let (train, _) = evaluate_split(model, &x_train_orig, &y_train)?;
            let (validation, proba) = evaluate_split(model, &x_valid, &y_valid)?;
            let mut roc_files = Vec::new();
            if let Some(dir) = out {
                let name = model.kind.name();
                let targets: Vec<(usize, String)> = if model.classes.len() == 2 {
                    vec![(1, format!("roc/{name}.csv"))]
                } else {
                    (0..model.classes.len())
                        .map(|j| (j, format!("roc/{name}_class{}.csv", model.classes[j])))
                        .collect()
                };
                for (j, rel) in targets {
                    let y01: Vec<u8> = y_valid.iter().map(|&c| u8::from(c == model.classes[j])).collect();
                    let s: Vec<f64> = proba.iter().map(|p| p[j]).collect();
                    if let Ok(roc) = evaluate::roc_auc(&y01, &s) {
                        write(&dir.join(&rel), &roc.to_csv())?;
                        roc_files.push(rel);
                    }
                }
            }
            let profit_cents = if cfg.mode == ModelMode::Risk {
                Some(evaluate::profit(&validation.confusion, &cfg.payoff)?)
            } else {
                None
            };
            let mut importances: Vec<NamedImportance> = selected
                .iter()
                .zip(ensemble::feature_importance(model))
                .map(|(f, v)| NamedImportance {
                    feature: f.clone(),
                    importance: v,
                })
                .collect();
            importances.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.feature.cmp(&b.feature)));
            reports.push(ClassifierReport {
                kind: model.kind,
                params: model.params.clone(),
                objective: objective.score(&validation.confusion)?,
                tuning_trace: t.trace.clone(),
                train,
                validation,
                importances,
                model_file: out.map(|_| format!("models/{}.json", model.kind.name())),
                roc_files,
                profit: profit_cents.map(evaluate::format_dollars),
                profit_cents,
            });
        }
        let mut best = 0;
        for i in 1..reports.len() {
            if reports[i].objective > reports[best].objective {
                best = i;
            }
        }
        let best_kind = reports[best].kind;
        Ok((reports, best_kind))
    })?;

    let positive_base_rate = (cfg.mode != ModelMode::ResponseRisk)
        .then(|| y_valid.iter().filter(|&&c| c == 1).count() as f64 / y_valid.len() as f64);
    let mut adasyn_summary = adasyn_reports;
    for r in &mut adasyn_summary {
        r.points.clear();
    }
    let report = RunReport {
        version: REPORT_VERSION,
        mode: cfg.mode,
        objective,
        master_seed: cfg.seed,
        data: DataSummary {
            input_rows: prepared.input_rows,
            modelled_rows: prepared.labels.len(),
            train_rows: y_train.len(),
            valid_rows: y_valid.len(),
            train_rows_resampled: y_train_rs.len(),
            train_class_counts: class_counts(&y_train),
            valid_class_counts: class_counts(&y_valid),
            train_resampled_class_counts: class_counts(&y_train_rs),
            positive_base_rate,
        },
        provenance: Provenance {
            stages: run.completed.clone(),
            seeds,
            dropped_columns: pre_model.dropped_columns.clone(),
            preprocessed_columns: pre_model.kept_columns(),
            clusters: clustering
                .members()
                .iter()
                .map(|m| m.iter().map(|&j| clustering.names[j].clone()).collect())
                .collect(),
            representatives,
            vif_trace,
            selected_features: selected,
            adasyn: adasyn_summary,
            validation_hash: valid_hash,
        },
        classifiers,
        best_classifier,
        timings: run.timings,
    };
    if let Some(dir) = out {
        write(&dir.join("report.json"), &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
        write(&dir.join("report.canonical.json"), &report.canonical_json()?)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(mode: ModelMode) -> PipelineConfig {
        PipelineConfig {
            input: InputSource::Generator(GeneratorSpec {
                n_rows: 600,
                n_features: 40,
                seed: 5,
                ..GeneratorSpec::default()
            }),
            mode,
            verify_refit: true,
            search: SearchConfig {
                trials: 4,
                max_depth: IntDomain::Range { min: 1, max: 8 },
                n_estimators: IntDomain::Range { min: 5, max: 30 },
                ..SearchConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn objectives_default_by_mode() {
        assert_eq!(ModelMode::Response.default_objective(), Objective::Recall);
        assert_eq!(ModelMode::Risk.default_objective(), Objective::Specificity);
        assert_eq!(ModelMode::ResponseRisk.default_objective(), Objective::Accuracy);
    }

    #[test]
    fn search_defaults_cover_reported_optima() {
        let s = SearchConfig::default();
        let depths = s.max_depth.values();
        let sizes = s.n_estimators.values();
        for d in [1, 16, 24, 42, 47] {
            assert!(depths.contains(&d));
        }
        for n in [33, 60, 265, 280, 337] {
            assert!(sizes.contains(&n));
        }
        assert_eq!(s.trials, 25);
        assert_eq!(s.strategy, SearchStrategy::Random);
    }

    #[test]
    fn empty_search_space_is_a_config_error() {
        let s = SearchConfig {
            strategy: SearchStrategy::Grid,
            max_depth: IntDomain::Values(vec![]),
            ..SearchConfig::default()
        };
        assert!(matches!(s.candidates(0), Err(Error::Config(_))));
    }

    #[test]
    fn grid_enumerates_the_product() {
        let s = SearchConfig {
            strategy: SearchStrategy::Grid,
            max_depth: IntDomain::Values(vec![1, 3]),
            n_estimators: IntDomain::Range { min: 10, max: 11 },
            ..SearchConfig::default()
        };
        assert_eq!(s.candidates(0).unwrap(), vec![(10, 1), (10, 3), (11, 1), (11, 3)]);
    }

    #[test]
    fn domains_deserialise_from_ranges_and_lists() {
        let s: SearchConfig =
            serde_json::from_str(r#"{"max_depth": [2, 4], "n_estimators": {"min": 3, "max": 5}}"#).unwrap();
        assert_eq!(s.max_depth, IntDomain::Values(vec![2, 4]));
        assert_eq!(s.n_estimators.values(), vec![3, 4, 5]);
    }

    #[test]
    fn trial_ordering_prefers_fewer_then_shallower() {
        let t = |n, d, o| Trial {
            n_estimators: n,
            max_depth: d,
            objective: o,
        };
        assert!(better(&t(50, 3, 0.8), &t(10, 1, 0.7)));
        assert!(better(&t(10, 5, 0.8), &t(20, 1, 0.8)));
        assert!(better(&t(10, 2, 0.8), &t(10, 3, 0.8)));
        assert!(!better(&t(10, 3, 0.8), &t(10, 3, 0.8)));
    }

    #[test]
    fn small_run_completes_every_mode() {
        for mode in ModelMode::ALL {
            let report = run_pipeline(&small_config(mode)).unwrap();
            assert_eq!(report.provenance.stages, STAGES.to_vec());
            assert_eq!(report.classifiers.len(), 3);
            for c in &report.classifiers {
                let best = c
                    .tuning_trace
                    .iter()
                    .map(|t| t.objective)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(c.objective, best);
                assert_eq!(c.validation.rows, report.data.valid_rows);
                assert_eq!(c.profit_cents.is_some(), mode == ModelMode::Risk);
            }
        }
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let cfg = PipelineConfig {
            input: InputSource::Csv(PathBuf::from("/nonexistent/input.csv")),
            ..PipelineConfig::default()
        };
        match run_pipeline(&cfg) {
            Err(Error::Stage { stage, completed, .. }) => {
                assert_eq!(stage, "ingest");
                assert!(completed.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
