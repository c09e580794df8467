//! End-to-end pipeline runs: determinism, reports and written artifacts.

use creditscope::ensemble::{self, Ensemble, EnsembleKind};
use creditscope::evaluate;
use creditscope::featsel::DEFAULT_VIF_THRESHOLD;
use creditscope::frame;
use creditscope::matrix::Matrix;
use creditscope::pipeline::{
    self, InputSource, IntDomain, ModelMode, Objective, PipelineConfig, SearchConfig, STAGES,
};
use creditscope::preprocess::{self, PreprocessModel};
use creditscope::seed;
use creditscope::synthgen::{self, GeneratorSpec};

fn generator() -> GeneratorSpec {
    GeneratorSpec {
        n_rows: 1500,
        n_features: 60,
        seed: 11,
        ..GeneratorSpec::default()
    }
}

fn config(mode: ModelMode, seed: u64) -> PipelineConfig {
    PipelineConfig {
        input: InputSource::Generator(generator()),
        mode,
        seed,
        search: SearchConfig {
            trials: 5,
            max_depth: IntDomain::Range { min: 1, max: 12 },
            n_estimators: IntDomain::Range { min: 5, max: 40 },
            ..SearchConfig::default()
        },
        ..PipelineConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_canonical_reports() {
    for mode in ModelMode::ALL {
        let a = pipeline::run_pipeline(&config(mode, 9)).unwrap().canonical_json().unwrap();
        let b = pipeline::run_pipeline(&config(mode, 9)).unwrap().canonical_json().unwrap();
        assert_eq!(a, b, "{mode:?}");
        assert!(!a.contains("\"timings\""));
    }
    let a = pipeline::run_pipeline(&config(ModelMode::Response, 1)).unwrap();
    let b = pipeline::run_pipeline(&config(ModelMode::Response, 2)).unwrap();
    assert_ne!(a.provenance.validation_hash, b.provenance.validation_hash);
}

#[test]
fn response_recall_beats_the_base_rate() {
    let report = pipeline::run_pipeline(&config(ModelMode::Response, 3)).unwrap();
    assert_eq!(report.objective, Objective::Recall);
    let base = report.data.positive_base_rate.unwrap();
    let best = report.classifier(report.best_classifier).unwrap();
    let recall = best.validation.metrics.recall[1];
    assert!(recall > base, "recall {recall} vs base rate {base}");
}

#[test]
fn risk_profit_matches_the_confusion_and_payoff() {
    let cfg = config(ModelMode::Risk, 4);
    let report = pipeline::run_pipeline(&cfg).unwrap();
    assert_eq!(report.objective, Objective::Specificity);
    for c in &report.classifiers {
        let cm = &c.validation.confusion;
        // Independent recomputation: sum of count times payoff over cells.
        let mut cents = 0i64;
        for (i, row) in cm.counts.iter().enumerate() {
            for (j, &n) in row.iter().enumerate() {
                cents += n as i64 * cfg.payoff.cents[i][j];
            }
        }
        assert_eq!(c.profit_cents, Some(cents), "{:?}", c.kind);
        assert_eq!(c.profit.as_deref(), Some(evaluate::format_dollars(cents).as_str()));
        let spec = cm.counts[0][0] as f64 / (cm.counts[0][0] + cm.counts[0][1]) as f64;
        assert_eq!(c.objective, spec);
    }
    let top = report.classifiers.iter().map(|c| c.objective).fold(f64::NEG_INFINITY, f64::max);
    let first = report.classifiers.iter().find(|c| c.objective == top).unwrap();
    assert_eq!(report.best_classifier, first.kind);
}

#[test]
fn provenance_records_stages_seeds_and_the_validation_partition() {
    let cfg = config(ModelMode::ResponseRisk, 21);
    let report = pipeline::run_pipeline(&cfg).unwrap();
    assert_eq!(report.provenance.stages, STAGES.to_vec());
    assert_eq!(report.provenance.seeds["split"], seed::stage_seed(21, "split"));
    assert_eq!(report.provenance.seeds["train/gradient_boosted"], seed::stage_seed(21, "train/gradient_boosted"));

    let (f, _) = synthgen::generate(&generator()).unwrap();
    let y = frame::derive_labels(&f, "goodbad").unwrap();
    let split = frame::stratified_split(&y, 0.7, seed::stage_seed(21, "split")).unwrap();
    let valid = f.select_rows(&split.valid_indices).features_only();
    assert_eq!(report.provenance.validation_hash, pipeline::frame_hash(&valid));
    assert_eq!(report.data.valid_rows, split.valid_indices.len());
    assert_eq!(report.data.train_rows + report.data.valid_rows, 1500);

    let kept = report.provenance.vif_trace.kept_names();
    assert_eq!(kept, report.provenance.selected_features);
    for c in &report.classifiers {
        let best = c.tuning_trace.iter().map(|t| t.objective).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(c.objective, best);
        assert_eq!(c.importances.len(), kept.len());
    }
    assert!(report.provenance.vif_trace.removals.iter().all(|s| s.vif > DEFAULT_VIF_THRESHOLD));
}

#[test]
fn csv_input_reproduces_the_generator_run() {
    let dir = tempfile::tempdir().unwrap();
    let (f, _) = synthgen::generate(&generator()).unwrap();
    let path = dir.path().join("data.csv");
    f.write_csv_path(&path, "").unwrap();

    let from_gen = pipeline::run_pipeline(&config(ModelMode::Risk, 6)).unwrap();
    let from_csv = pipeline::run_pipeline(&PipelineConfig {
        input: InputSource::Csv(path),
        ..config(ModelMode::Risk, 6)
    })
    .unwrap();
    assert_eq!(from_gen.canonical_json().unwrap(), from_csv.canonical_json().unwrap());
}

#[test]
fn written_models_reproduce_the_validation_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        out_dir: Some(dir.path().to_path_buf()),
        ..config(ModelMode::Response, 8)
    };
    let report = pipeline::run_pipeline(&cfg).unwrap();
    let read = |rel: &str| std::fs::read_to_string(dir.path().join(rel)).unwrap();
    assert_eq!(read("report.canonical.json"), report.canonical_json().unwrap());
    for name in ["report.json", "preprocess_model.json", "dendrogram.json", "vif_trace.csv", "adasyn_report.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }

    let (f, _) = synthgen::generate(&generator()).unwrap();
    let y = frame::remap_response(&frame::derive_labels(&f, "goodbad").unwrap()).unwrap();
    let split = frame::stratified_split(&y, 0.7, report.provenance.seeds["split"]).unwrap();
    let valid = f.select_rows(&split.valid_indices);
    let y_valid: Vec<u8> = split.valid_indices.iter().map(|&i| y.classes[i]).collect();
    let pre = PreprocessModel::from_json(&read("preprocess_model.json")).unwrap();
    let x: Matrix = preprocess::apply_preprocessor(&pre, &valid)
        .unwrap()
        .features_only()
        .select_columns(&report.provenance.selected_features)
        .unwrap()
        .feature_matrix()
        .unwrap();

    for kind in EnsembleKind::ALL {
        let c = report.classifier(kind).unwrap();
        let model = Ensemble::from_json(&read(c.model_file.as_deref().unwrap())).unwrap();
        assert_eq!(model.params, c.params);
        let pred = ensemble::predict(&model, &x, None).unwrap();
        let cm = evaluate::confusion(&y_valid, &pred, &model.classes).unwrap();
        assert_eq!(cm, c.validation.confusion, "{kind:?}");
        assert_eq!(c.roc_files.len(), 1);
        assert!(dir.path().join(&c.roc_files[0]).is_file());
    }
}

#[test]
fn a_failed_stage_writes_a_failure_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = String::from("id,x1,x2,goodbad\n");
    for i in 0..40 {
        rows.push_str(&format!("{i},{},{},1\n", i % 7, i % 3));
    }
    let csv = dir.path().join("one_class.csv");
    std::fs::write(&csv, rows).unwrap();
    let cfg = PipelineConfig {
        input: InputSource::Csv(csv),
        id_columns: vec!["id".into()],
        out_dir: Some(dir.path().join("out")),
        ..config(ModelMode::Response, 1)
    };
    let err = pipeline::run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("labels"), "{err}");
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/failure.json")).unwrap()).unwrap();
    assert_eq!(dump["failed_stage"], "labels");
    assert_eq!(dump["completed_stages"], serde_json::json!(["ingest"]));
}
