use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use creditscope::ensemble::{self, Ensemble, EnsembleKind, EnsembleParams};
use creditscope::evaluate::{self, ConfusionMatrix, PayoffMatrix};
use creditscope::featsel::{self, Cut};
use creditscope::frame::{self, Frame, IngestConfig};
use creditscope::matrix::Matrix;
use creditscope::pipeline::{self, InputSource, ModelMode, PipelineConfig};
use creditscope::preprocess::{self, CodeRanges, PreprocessModel};
use creditscope::resample::{self, AdasynConfig};
use creditscope::synthgen::{self, GeneratorSpec};
use creditscope::{Error, Result};

#[derive(Parser)]
#[command(name = "creditscope", version, about = "Credit-scoring pipeline toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (and optionally its ground truth).
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Generator spec (JSON); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run the full pipeline.
    Run {
        /// Pipeline config (JSON); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// response, risk or response_risk.
        #[arg(long)]
        mode: Option<String>,
        /// CSV input instead of the configured source.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fit the cleaning chain on a CSV (or apply a saved one) and write the
    /// transformed CSV plus `preprocess_model.json`.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
        /// Apply this saved model instead of fitting.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        missing_drop_threshold: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Correlation clustering plus VIF pruning on a preprocessed CSV.
    SelectFeatures {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, conflicts_with = "clusters")]
        cut_height: Option<f64>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long, default_value_t = featsel::DEFAULT_VIF_THRESHOLD)]
        vif_threshold: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// ADASYN oversampling of a labelled, fully observed CSV.
    Resample {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        k_neighbors: usize,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fit one ensemble on a labelled CSV.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// random_forest, extra_trees or gradient_boosted.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 100)]
        n_estimators: usize,
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write class probabilities for a CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics, AUC and optional ROC curve of a model on a labelled CSV.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// ROC curve CSV (binary models).
        #[arg(long)]
        roc: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Profit of a confusion matrix under a payoff matrix (cents).
    Profit {
        /// `{"classes": [...], "counts": [[...]]}`, rows = actual.
        #[arg(long)]
        confusion: PathBuf,
        /// `{"cents": [[...]]}`; the default risk payoff otherwise.
        #[arg(long)]
        payoff: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    input: PathBuf,
    /// Label column; pass an empty string for unlabelled input.
    #[arg(long, default_value = "goodbad")]
    label: String,
}

impl DataArgs {
    fn read(&self) -> Result<Frame> {
        let cfg = if self.label.is_empty() {
            IngestConfig::no_label()
        } else {
            IngestConfig::with_label(&self.label)
        };
        frame::read_csv(&self.input, &cfg)
    }

    /// Feature matrix plus class ids from the label column.
    fn labelled(&self) -> Result<(Frame, Matrix, Vec<u8>)> {
        let f = self.read()?;
        let j = f
            .label_index()
            .ok_or_else(|| Error::Input("a label column is required".into()))?;
        let y = (0..f.n_rows())
            .map(|r| match f.get(r, j) {
                Some(v) if v.fract() == 0.0 && (0.0..=255.0).contains(&v) => Ok(v as u8),
                Some(v) => Err(Error::LabelDomain(format!("row {}: label {v} is not a class id", r + 1))),
                None => Err(Error::LabelDomain(format!("row {}: missing label", r + 1))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let x = f.features_only().feature_matrix()?;
        Ok((f, x, y))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn matrix_frame(names: &[String], x: &Matrix, label: Option<(&str, &[u8])>) -> Result<Frame> {
    let mut cols: Vec<frame::ColumnMeta> = names.iter().map(frame::ColumnMeta::feature).collect();
    let mut data = x.to_columns();
    if let Some((name, y)) = label {
        cols.push(frame::ColumnMeta::label(name));
        data.push(y.iter().map(|&c| f64::from(c)).collect());
    }
    let mask = data.iter().map(|c| vec![false; c.len()]).collect();
    Frame::new(cols, data, mask)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            out,
            config,
            seed,
            truth,
        } => {
            let mut spec: GeneratorSpec = match config {
                Some(p) => serde_json::from_str(&read_text(&p)?)?,
                None => GeneratorSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let (frame, gt) = synthgen::generate(&spec)?;
            let mut buf = Vec::new();
            frame.write_csv(&mut buf, "")?;
            write_text(&out, &String::from_utf8(buf).expect("CSV output is UTF-8"))?;
            if let Some(p) = truth {
                write_text(&p, &serde_json::to_string_pretty(&gt)?)?;
            }
        }
        Command::Run {
            config,
            seed,
            out_dir,
            mode,
            input,
        } => {
            let mut cfg = match config {
                Some(p) => PipelineConfig::from_json(&read_text(&p)?)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = Some(d);
            }
            if let Some(m) = mode {
                cfg.mode = ModelMode::parse(&m)?;
            }
            if let Some(i) = input {
                cfg.input = InputSource::Csv(i);
            }
            let report = pipeline::run_pipeline(&cfg)?;
            for c in &report.classifiers {
                let m = &c.validation.metrics;
                let mut line = format!(
                    "{:<16} n_estimators={:<3} max_depth={:<3} objective={:.4} accuracy={:.4}",
                    c.kind.name(),
                    c.params.n_estimators,
                    c.params.tree.max_depth.unwrap_or(0),
                    c.objective,
                    m.accuracy
                );
                if let Some(auc) = c.validation.auc {
                    line.push_str(&format!(" auc={auc:.4}"));
                }
                if let Some(p) = &c.profit {
                    line.push_str(&format!(" profit={p}"));
                }
                println!("{line}");
            }
            println!("best: {}", report.best_classifier.name());
        }
        Command::Preprocess {
            data,
            model,
            missing_drop_threshold,
            out_dir,
        } => {
            let f = data.read()?;
            let model = match model {
                Some(p) => PreprocessModel::from_json(&read_text(&p)?)?,
                None => preprocess::fit_preprocessor(&f, &CodeRanges::default(), missing_drop_threshold)?,
            };
            let out = preprocess::apply_preprocessor(&model, &f)?;
            write_text(&out_dir.join("preprocess_model.json"), &model.to_json()?)?;
            out.write_csv_path(&out_dir.join("preprocessed.csv"), "")?;
        }
        Command::SelectFeatures {
            data,
            cut_height,
            clusters,
            vif_threshold,
            out_dir,
        } => {
            let f = data.read()?.features_only();
            let cut = match (clusters, cut_height) {
                (Some(k), _) => Cut::Count(k),
                (None, Some(h)) => Cut::Height(h),
                (None, None) => Cut::default(),
            };
            let corr = featsel::correlation_matrix(&f)?;
            let clustering = featsel::cluster_features(&corr, cut)?;
            let reps = featsel::pick_representatives(&f, &clustering)?;
            let trace = featsel::vif_prune(&f.select_columns(&reps)?, vif_threshold)?;
            write_text(&out_dir.join("dendrogram.json"), &clustering.dendrogram_json()?)?;
            write_text(&out_dir.join("vif_trace.csv"), &trace.to_csv())?;
            write_text(
                &out_dir.join("selected_features.json"),
                &serde_json::to_string_pretty(&trace.kept_names())?,
            )?;
        }
        Command::Resample {
            data,
            out,
            k_neighbors,
            beta,
            seed,
            report,
        } => {
            let (f, x, y) = data.labelled()?;
            let cfg = AdasynConfig {
                k_neighbors,
                beta,
                target: None,
                seed,
            };
            let mut classes = y.clone();
            classes.sort_unstable();
            classes.dedup();
            let (xr, yr, reports) = if classes.len() == 2 {
                let (xr, yr, r) = resample::adasyn(&x, &y, &cfg)?;
                (xr, yr, vec![r])
            } else {
                resample::adasyn_multiclass(&x, &y, &cfg)?
            };
            let names = f.features_only().column_names();
            matrix_frame(&names, &xr, Some((&data.label, &yr)))?.write_csv_path(&out, "")?;
            if let Some(p) = report {
                write_text(&p, &serde_json::to_string_pretty(&reports)?)?;
            }
        }
        Command::Train {
            data,
            kind,
            n_estimators,
            max_depth,
            seed,
            out,
        } => {
            let (_, x, y) = data.labelled()?;
            let params = EnsembleParams::new(EnsembleKind::parse(&kind)?)
                .with_size(n_estimators, max_depth)
                .with_seed(seed);
            let model = ensemble::fit(&x, &y, &params)?;
            write_text(&out, &model.to_json()?)?;
        }
        Command::Predict { model, data, out } => {
            let model = Ensemble::from_json(&read_text(&model)?)?;
            let x = data.read()?.features_only().feature_matrix()?;
            let proba = ensemble::predict_proba(&model, &x)?;
            let mut text: String = model
                .classes
                .iter()
                .map(|c| format!("p{c}"))
                .collect::<Vec<_>>()
                .join(",");
            text.push('\n');
            for row in proba {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            write_text(&out, &text)?;
        }
        Command::Evaluate {
            model,
            data,
            roc,
            out,
        } => {
            let model = Ensemble::from_json(&read_text(&model)?)?;
            let (_, x, y) = data.labelled()?;
            let proba = ensemble::predict_proba(&model, &x)?;
            let pred = ensemble::labels_from_proba(&model.classes, &proba, None);
            let cm = evaluate::confusion(&y, &pred, &model.classes)?;
            let metrics = evaluate::classification_metrics(&cm);
            let auc = if model.classes.len() == 2 {
                let y01: Vec<u8> = y.iter().map(|&c| u8::from(c == model.classes[1])).collect();
                let s: Vec<f64> = proba.iter().map(|p| p[1]).collect();
                let curve = evaluate::roc_auc(&y01, &s)?;
                if let Some(p) = roc {
                    write_text(&p, &curve.to_csv())?;
                }
                curve.auc
            } else {
                evaluate::multiclass_auc(&y, &proba, &model.classes)?
            };
            let doc = serde_json::json!({ "confusion": cm, "metrics": metrics, "auc": auc });
            let text = format!("{doc:#}\n");
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Profit { confusion, payoff } => {
            let cm: ConfusionMatrix = serde_json::from_str(&read_text(&confusion)?)?;
            let cm = ConfusionMatrix::from_counts(cm.classes, cm.counts)?;
            let payoff = match payoff {
                Some(p) => {
                    let m: PayoffMatrix = serde_json::from_str(&read_text(&p)?)?;
                    PayoffMatrix::from_cents(m.cents)?
                }
                None => PayoffMatrix::default_risk(),
            };
            let cents = evaluate::profit(&cm, &payoff)?;
            println!("{}", serde_json::json!({ "cents": cents, "dollars": evaluate::format_dollars(cents) }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
