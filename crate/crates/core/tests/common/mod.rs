//! Fixtures shared by the integration tests.

#![allow(dead_code)]

pub mod oracle;


use std::path::Path;

use annoloop_core::agents::{ExperimentConfig, Paradigm, DEFAULT_LABEL};
use annoloop_core::providers::{ContainsFixture, ModelSpec, MockScript, RetryPolicy};
use annoloop_core::runner::{RunConfig, Sample};
use serde_json::json;

pub fn annotator_body(reasoning: &str, annotated: &str) -> String {
    json!({ "reasoning": reasoning, "annotated_text": annotated }).to_string()
}

pub fn reviewer_body(critique: &str, revised: &str) -> String {
    json!({ "critique": critique, "revised_text": revised }).to_string()
}

/// Substring of the reviewer prompt that identifies a sample.
pub fn reviewer_needle(text: &str) -> String {
    format!("Original text:\n{text}\n\n")
}

pub struct Fixture {
    pub samples: Vec<Sample>,
    /// Tags only the first metaphor of each sample.
    pub annotator: MockScript,
    /// Returns the gold annotation.
    pub reviewer: MockScript,
    /// Returns the annotator's text unchanged.
    pub identity_reviewer: MockScript,
}

fn m(s: &str) -> String {
    format!("<{DEFAULT_LABEL}>{s}</{DEFAULT_LABEL}>")
}

const OPENERS: [&str; 5] = ["velvet", "a storm", "ice", "gold", "a ghost"];
const SUBJECTS: [&str; 4] = ["her voice", "the city", "his temper", "the market"];

/// `n` samples, each with two gold metaphors.
pub fn reflective_fixture(n: usize) -> Fixture {
    let mut fx = Fixture {
        samples: Vec::new(),
        annotator: MockScript::default(),
        reviewer: MockScript::default(),
        identity_reviewer: MockScript::default(),
    };
    for i in 0..n {
        let subject = SUBJECTS[i % SUBJECTS.len()];
        let image = OPENERS[i % OPENERS.len()];
        let text = format!("In scene {i}, {subject} was {image} and time was a thief.");
        let gold = format!("In scene {i}, {subject} was {} and {}.", m(image), m("time was a thief"));
        let under = format!("In scene {i}, {subject} was {} and time was a thief.", m(image));
        fx.annotator
            .fixtures
            .insert(text.clone(), annotator_body("tagged the attribution", &under));
        fx.reviewer.contains.push(ContainsFixture {
            needle: reviewer_needle(&text),
            body: reviewer_body("the second clause is also figurative", &gold),
        });
        fx.identity_reviewer.contains.push(ContainsFixture {
            needle: reviewer_needle(&text),
            body: reviewer_body("no changes", &under),
        });
        fx.samples.push(Sample {
            index: i,
            id: format!("s{i:02}"),
            text,
            gold_tagged: gold,
        });
    }
    fx
}

pub fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 4,
        base_delay_ms: 1,
        backoff_factor: 2.0,
        jitter_fraction: 0.2,
    }
}

pub fn experiment(annotator: MockScript, reviewer: Option<MockScript>) -> ExperimentConfig {
    ExperimentConfig {
        paradigm: Paradigm::ZeroShot,
        label: DEFAULT_LABEL.to_string(),
        annotator: ModelSpec::mock("annotator", annotator),
        reviewer_mode: reviewer.is_some(),
        reviewer: reviewer.map(|s| ModelSpec::mock("reviewer", s)),
        retry: fast_retry(),
        include_annotator_reasoning: true,
    }
}

pub fn run_config(experiment: ExperimentConfig, out: &Path, run_id: &str, workers: usize) -> RunConfig {
    RunConfig {
        experiment,
        workers,
        baseline_f1: 0.5,
        output_dir: out.to_path_buf(),
        run_id: run_id.to_string(),
    }
}

pub fn dataset_csv(samples: &[Sample]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["id", "text", "gold"]).unwrap();
    for s in samples {
        w.write_record([&s.id, &s.text, &s.gold_tagged]).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Summary JSON with the wall-clock fields removed.
pub fn summary_without_timestamps(json_text: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(json_text).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("started_at");
    obj.remove("finished_at");
    v
}
