use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use chunkwise::corpus::synthetic::{generate, SyntheticConfig};
use chunkwise::corpus::Document;
use chunkwise::model::Classifier;
use chunkwise::pipeline::*;
use chunkwise::training::{initial_checkpoint, ClassifierSetup};
use chunkwise_durable::{ActivityError, EngineError, EventKind, LedgerOutcome};

fn corpus(n_per_class: usize) -> Vec<Document> {
    generate(&SyntheticConfig { docs_per_class: n_per_class, ..SyntheticConfig::default() })
}

fn classifier() -> Arc<Classifier> {
    let ckpt = initial_checkpoint(&corpus(5), &ClassifierSetup::default(), 7).unwrap();
    Arc::new(Classifier::from_checkpoint(ckpt).unwrap())
}

fn input(dir: &Path) -> PipelineInput {
    PipelineInput { dir: dir.to_path_buf(), seed: 12, checkpoint: None }
}

#[test]
fn find_files_lists_json_sorted_and_recursive() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["b.json", "a.json", "c.txt"] {
        std::fs::write(dir.path().join(name), "{}").unwrap();
    }
    std::fs::create_dir(dir.path().join("sub")).unwrap();
    std::fs::write(dir.path().join("sub/d.jsonl"), "{}").unwrap();
    let files = find_files(dir.path()).unwrap();
    let names: Vec<String> =
        files.iter().map(|f| Path::new(f).strip_prefix(dir.path()).unwrap().display().to_string()).collect();
    assert_eq!(names, vec!["a.json", "b.json", "sub/d.jsonl"]);

    let err = find_files(&dir.path().join("missing")).unwrap_err();
    assert_eq!(err.kind, NOT_FOUND);
    assert!(!err.retryable);
}

#[test]
fn read_validate_classifies_failures() {
    let dir = tempfile::tempdir().unwrap();
    let doc = &corpus(1)[0];
    let good = dir.path().join("good.json");
    std::fs::write(&good, serde_json::to_string(doc).unwrap()).unwrap();
    assert_eq!(&read_validate(&good).unwrap(), doc);

    let one_line = dir.path().join("one.jsonl");
    std::fs::write(&one_line, format!("{}\n", doc.to_json_line())).unwrap();
    assert_eq!(&read_validate(&one_line).unwrap(), doc);

    let cases = [
        ("missing.json", None, NOT_FOUND),
        ("bad.json", Some("{not json".to_string()), MALFORMED_JSON),
        ("schema.json", Some(r#"{"id": "x"}"#.to_string()), SCHEMA_INVALID),
        ("two.jsonl", Some(format!("{0}\n{0}\n", doc.to_json_line())), SCHEMA_INVALID),
    ];
    for (name, content, kind) in cases {
        let path = dir.path().join(name);
        if let Some(c) = content {
            std::fs::write(&path, c).unwrap();
        }
        let err = read_validate(&path).unwrap_err();
        assert_eq!(err.kind, kind, "{name}");
        assert!(!err.retryable, "{name}");
    }
}

#[test]
fn classify_is_deterministic_and_normalized() {
    let clf = classifier();
    let doc = &corpus(1)[2];
    let a = classify_document(&clf, doc, "p", 3).unwrap();
    let b = classify_document(&clf, doc, "p", 3).unwrap();
    assert_eq!(a, b);
    assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(a.label, clf.labels[a.class]);

    let blank = Document { id: "blank".into(), language: "en".into(), label: None, paragraphs: vec!["  ".into()] };
    let err = classify_document(&clf, &blank, "p", 3).unwrap_err();
    assert_eq!(err.kind, NO_CHUNKS);
    assert!(!err.retryable);
}

#[test]
fn directory_of_valid_files_is_fully_predicted() {
    let dir = tempfile::tempdir().unwrap();
    let docs: Vec<Document> = corpus(7).into_iter().take(25).collect();
    write_document_files(dir.path(), &docs).unwrap();
    let host = PipelineHost::start(classifier(), None).unwrap();
    let out = host.run(&input(dir.path())).unwrap();
    assert_eq!(out.state.predicted, 25);
    assert_eq!(out.predictions.len(), 25);
    assert!(out.state.skipped.is_empty());
    assert!(out.state.is_conserved());
    assert_eq!(out.state.batches, 3);
    for p in &out.predictions {
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let ids: BTreeSet<&str> = out.predictions.iter().map(|p| p.doc_id.as_str()).collect();
    assert_eq!(ids, docs.iter().map(|d| d.id.as_str()).collect());

    let child = host.batch_workflow_id(&out.workflow_id).unwrap();
    let runs = host.engine().histories(&child).unwrap();
    assert_eq!(runs.len(), 3, "child chain shows up as separate runs");
    for h in &runs {
        h.check().unwrap();
        for e in h.events_of(EventKind::ActivityStarted) {
            let expected = if e.name.as_deref() == Some(CLASSIFY) { "W2" } else { "W1" };
            assert_eq!(e.worker.as_deref(), Some(expected));
        }
    }
}

#[test]
fn empty_directory_completes_with_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let host = PipelineHost::start(classifier(), None).unwrap();
    let out = host.run(&input(dir.path())).unwrap();
    assert_eq!(out.state.discovered, 0);
    assert!(out.predictions.is_empty());
    assert!(out.state.skipped.is_empty());
}

#[test]
fn missing_directory_fails_the_pipeline_after_one_attempt() {
    let dir = tempfile::tempdir().unwrap();
    let host = PipelineHost::start(classifier(), None).unwrap();
    let id = host.submit(&input(&dir.path().join("nope"))).unwrap();
    match host.wait(&id) {
        Err(EngineError::WorkflowFailed { message, .. }) => assert!(message.contains(NOT_FOUND), "{message}"),
        other => panic!("unexpected {other:?}"),
    }
    let h = host.engine().history(&id, None).unwrap();
    assert_eq!(h.count(EventKind::ActivityStarted), 1);
    assert_eq!(h.terminal().unwrap().kind, EventKind::WorkflowFailed);
}

#[test]
fn one_invalid_file_in_a_batch_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let docs: Vec<Document> = corpus(3).into_iter().take(9).collect();
    write_document_files(dir.path(), &docs).unwrap();
    std::fs::write(dir.path().join("broken.json"), "{\"id\": ").unwrap();
    let host = PipelineHost::start(classifier(), None).unwrap();
    let out = host.run(&input(dir.path())).unwrap();
    assert_eq!((out.state.predicted, out.state.skipped.len()), (9, 1));
    assert_eq!(out.state.skipped[0].kind, MALFORMED_JSON);

    let child = host.batch_workflow_id(&out.workflow_id).unwrap();
    let runs = host.engine().histories(&child).unwrap();
    assert_eq!(runs.len(), 1);
    let h = &runs[0];
    assert_eq!(h.terminal().unwrap().kind, EventKind::WorkflowCompleted);
    let broken_attempts = host
        .engine()
        .ledger()
        .iter()
        .filter(|e| e.activity == READ_VALIDATE && e.workflow_id == child)
        .count();
    assert_eq!(broken_attempts, 10, "every file read exactly once");
    assert_eq!(h.count(EventKind::ActivityRetryScheduled), 0);
}

#[test]
fn seven_files_fit_in_one_run() {
    let dir = tempfile::tempdir().unwrap();
    write_document_files(dir.path(), &corpus(2)[..7]).unwrap();
    let host = PipelineHost::start(classifier(), None).unwrap();
    let out = host.run(&input(dir.path())).unwrap();
    let child = host.batch_workflow_id(&out.workflow_id).unwrap();
    let runs = host.engine().histories(&child).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].count(EventKind::WorkflowContinuedAsNew), 0);
}

#[test]
fn transient_read_errors_are_retried() {
    let dir = tempfile::tempdir().unwrap();
    write_document_files(dir.path(), &corpus(1)[..1]).unwrap();
    let host = PipelineHost::start(classifier(), None).unwrap();
    host.engine()
        .inject_failures(READ_VALIDATE, (0..2).map(|_| ActivityError::retryable("io", "permission denied")));
    let out = host.run(&input(dir.path())).unwrap();
    assert_eq!(out.state.predicted, 1);
    let child = host.batch_workflow_id(&out.workflow_id).unwrap();
    let h = host.engine().history(&child, None).unwrap();
    let attempts: Vec<u32> = h
        .events_of(EventKind::ActivityStarted)
        .filter(|e| e.name.as_deref() == Some(READ_VALIDATE))
        .map(|e| e.attempt.unwrap())
        .collect();
    assert_eq!(attempts, vec![1, 2, 3]);
}

#[test]
fn results_do_not_depend_on_the_run_and_reach_the_jsonl_sink() {
    let dir = tempfile::tempdir().unwrap();
    write_document_files(dir.path(), &corpus(3)[..12]).unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let file = out_dir.path().join("predictions.jsonl");
    let sink = Arc::new(JsonlSink::create(&file).unwrap());
    let host = PipelineHost::start(classifier(), Some(sink)).unwrap();
    let a = host.run(&input(dir.path())).unwrap();
    let b = host.run(&input(dir.path())).unwrap();
    assert_eq!(a.by_path(), b.by_path());
    let lines: Vec<Prediction> = std::fs::read_to_string(&file)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 24);
    assert_eq!(lines[..12], a.predictions[..]);

    let io_ran_classify = host.engine().ledger().iter().any(|e| e.worker == "W1" && e.activity == CLASSIFY);
    assert!(!io_ran_classify);
    assert!(host.engine().ledger().iter().all(|e| e.outcome == LedgerOutcome::Completed));
}
