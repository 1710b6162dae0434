//! Whole runs over scripted datasets.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};

use annoloop_core::agents::PromptTemplates;
use annoloop_core::providers::{
    Client, ErrorClass, Fault, FaultRule, MockProvider, MockScript, ModelSpec,
};
use annoloop_core::runner::{
    read_log, read_run_log, run_batch, LogWarning, NullSink, RunClients, RunEvent, RunSummary,
    Sample, SampleStatus, EXPORT_FILE, SESSION_LOG, SUMMARY_FILE,
};
use common::{
    annotator_body, experiment, reflective_fixture, run_config, summary_without_timestamps,
};

fn clients(annot: &MockScript, rev: Option<&MockScript>) -> (RunClients, Arc<MockProvider>, Option<Arc<MockProvider>>) {
    let am = Arc::new(MockProvider::new(annot.clone()));
    let rm = rev.map(|r| Arc::new(MockProvider::new(r.clone())));
    let c = RunClients {
        annotator: Arc::new(Client::new(ModelSpec::mock("a", annot.clone()), am.clone())),
        reviewer: rev.zip(rm.clone()).map(|(s, m)| Arc::new(Client::new(ModelSpec::mock("r", s.clone()), m))),
    };
    (c, am, rm)
}

#[tokio::test]
async fn export_is_independent_of_worker_count() {
    let fx = reflective_fixture(20);
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(fx.annotator.clone(), Some(fx.reviewer.clone()));
    let mut exports = Vec::new();
    for (run_id, workers) in [("w1", 1), ("w4", 4), ("w16", 16)] {
        let cfg = run_config(exp.clone(), dir.path(), run_id, workers);
        let (c, _, _) = clients(&fx.annotator, Some(&fx.reviewer));
        run_batch(&cfg, &fx.samples, &c, &PromptTemplates::default(), &NullSink, None).await.unwrap();
        let run = dir.path().join(run_id);
        let summary = fs::read_to_string(run.join(SUMMARY_FILE)).unwrap();
        let mut s = summary_without_timestamps(&summary);
        s["run_id"] = "x".into();
        exports.push((fs::read(run.join(EXPORT_FILE)).unwrap(), s));
    }
    assert_eq!(exports[0], exports[1]);
    assert_eq!(exports[0], exports[2]);
}

#[tokio::test]
async fn macro_f1_of_scripted_scores() {
    let rows = [
        ("a", "<M>x</M> y", "<M>x</M> y"),                        // F1 1
        ("b", "<M>p</M> <M>q</M> r", "<M>p</M> q <M>r</M>"),      // tp=fp=fn=1, F1 0.5
        ("c", "<M>u</M> v", "u <M>v</M>"),                        // F1 0
    ];
    let mut script = MockScript::default();
    let samples: Vec<Sample> = rows
        .iter()
        .enumerate()
        .map(|(i, (id, gold, pred))| {
            let text = gold.replace("<M>", "").replace("</M>", "");
            script.fixtures.insert(text.clone(), annotator_body("", pred));
            Sample { index: i, id: id.to_string(), text, gold_tagged: gold.to_string() }
        })
        .collect();
    let mut exp = experiment(script.clone(), None);
    exp.label = "M".into();
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(exp, dir.path(), "r", 2);
    let (c, _, _) = clients(&script, None);
    let s = run_batch(&cfg, &samples, &c, &PromptTemplates::default(), &NullSink, None).await.unwrap();
    let f1: Vec<f64> = s.outcomes.iter().map(|o| o.metrics_pre.as_ref().unwrap().f1).collect();
    assert_eq!(f1, vec![1.0, 0.5, 0.0]);
    assert_eq!(s.macro_pre.unwrap().f1, 0.5);
    assert_eq!(s.macro_post, s.macro_pre);
    // pooled: tp=2, fp=2, fn=2
    assert_eq!(s.micro_pre.unwrap().f1, 0.5);
}

#[tokio::test]
async fn quota_failures_stay_isolated() {
    let fx = reflective_fixture(6);
    let mut script = fx.annotator.clone();
    script.faults.push(FaultRule {
        when_user_contains: Some("In scene 3,".into()),
        fault: Fault::Status { code: 429 },
        times: None,
    });
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(experiment(script.clone(), None), dir.path(), "q", 3);
    let (c, am, _) = clients(&script, None);
    let s = run_batch(&cfg, &fx.samples, &c, &PromptTemplates::default(), &NullSink, None).await.unwrap();
    for o in &s.outcomes {
        if o.sample.index == 3 {
            assert_eq!(o.status_label(), "Failed(QuotaExceeded)");
        } else {
            assert_eq!(o.status, SampleStatus::Ok);
        }
    }
    assert!(s.any_failed());
    assert_eq!(s.error_counts, BTreeMap::from([("QuotaExceeded".to_string(), 1)]));
    assert_eq!(s.status_counts["Ok"], 5);
    // 5 single successes plus 4 attempts for the throttled sample
    assert_eq!(am.calls(), 9);
    let (log, warnings) = read_run_log(dir.path(), "q").unwrap();
    assert!(warnings.is_empty());
    assert_eq!(log.len(), 9);
    let throttled: Vec<_> = log.iter().filter(|e| e.sample_id == "s03").collect();
    assert_eq!(throttled.len(), 4);
    assert!(throttled.iter().all(|e| e.error_class == Some(ErrorClass::QuotaExceeded)));
    assert_eq!(throttled.iter().map(|e| e.attempt).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
}

#[tokio::test]
async fn one_event_per_sample_then_summary() {
    let fx = reflective_fixture(7);
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(experiment(fx.annotator.clone(), Some(fx.reviewer.clone())), dir.path(), "e", 3);
    let (c, am, rm) = clients(&fx.annotator, Some(&fx.reviewer));
    let events = Mutex::new(Vec::new());
    let sink = |e: &RunEvent| events.lock().unwrap().push(e.clone());
    let s = run_batch(&cfg, &fx.samples, &c, &PromptTemplates::default(), &sink, None).await.unwrap();
    let events = events.into_inner().unwrap();
    assert_eq!(events.len(), 8);
    for (k, e) in events[..7].iter().enumerate() {
        let RunEvent::Sample(e) = e else { panic!("sample event expected") };
        assert_eq!((e.completed, e.total), (k + 1, 7));
        assert!(e.f1_post.unwrap() > e.f1_pre.unwrap());
        assert!(e.final_doc.is_some());
    }
    let RunEvent::Summary(last) = &events[7] else { panic!("summary last") };
    assert_eq!(last.macro_post, s.macro_post);
    assert!(last.complete);
    // every model call is one log line
    let log = read_run_log(dir.path(), "e").unwrap().0;
    assert_eq!(log.len(), am.calls() + rm.unwrap().calls());
    assert!(log.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    let reloaded = RunSummary::load(&dir.path().join("e").join(SUMMARY_FILE)).unwrap();
    assert_eq!(reloaded, s);
}

#[tokio::test]
async fn cancel_before_start_marks_incomplete() {
    let fx = reflective_fixture(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(experiment(fx.annotator.clone(), None), dir.path(), "c", 1);
    let (c, am, _) = clients(&fx.annotator, None);
    let cancel = AtomicBool::new(true);
    let s = run_batch(&cfg, &fx.samples, &c, &PromptTemplates::default(), &NullSink, Some(&cancel))
        .await
        .unwrap();
    assert!(!s.complete);
    assert!(s.outcomes.is_empty());
    assert_eq!(am.calls(), 0);
    assert!(dir.path().join("c").join(EXPORT_FILE).exists());
}

#[tokio::test]
async fn empty_dataset_and_bad_run_id_are_rejected() {
    let fx = reflective_fixture(1);
    let dir = tempfile::tempdir().unwrap();
    let (c, _, _) = clients(&fx.annotator, None);
    let cfg = run_config(experiment(fx.annotator.clone(), None), dir.path(), "ok", 1);
    assert!(run_batch(&cfg, &[], &c, &PromptTemplates::default(), &NullSink, None).await.is_err());
    let cfg = run_config(experiment(fx.annotator.clone(), None), dir.path(), "../escape", 1);
    assert!(run_batch(&cfg, &fx.samples, &c, &PromptTemplates::default(), &NullSink, None).await.is_err());
}

#[tokio::test]
async fn truncated_log_tail_is_tolerated() {
    let fx = reflective_fixture(2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(experiment(fx.annotator.clone(), None), dir.path(), "t", 1);
    let (c, _, _) = clients(&fx.annotator, None);
    run_batch(&cfg, &fx.samples, &c, &PromptTemplates::default(), &NullSink, None).await.unwrap();
    let path = dir.path().join("t").join(SESSION_LOG);
    let mut data = fs::read_to_string(&path).unwrap();
    data.push_str("{\"timestamp\":\"2026-");
    fs::write(&path, data).unwrap();
    let (entries, warnings) = read_log(&path).unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(warnings, vec![LogWarning::TruncatedTail { line: 3 }]);
}
