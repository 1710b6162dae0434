//! Annotator and Reviewer agents.
//!
//! Builds the prompts for each paradigm, parses the JSON the models return,
//! and runs the reflective loop for a single sample: annotate, score, review
//! once (when Reviewer Mode is on), score again.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::evaluator::{evaluate_docs, tokenize, MetricFlag};
use crate::providers::{
    complete_with, AttemptRecord, ChatRequest, Client, ErrorClass, ModelSpec, ProviderError,
    RetryPolicy,
};
use crate::runner::{AgentRole, Sample, SampleOutcome, SampleStatus};
use crate::tagspan::{parse_tagged, strip_tags, LabelSet, TagError};

pub const DEFAULT_LABEL: &str = "Metaphor";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub source_text: String,
    pub gold_tagged: String,
}

/// How the agents are prompted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Paradigm {
    /// Instruction only.
    ZeroShot,
    /// Instruction plus worked demonstrations.
    FewShot { examples: Vec<ExamplePair> },
    /// The whole codebook injected into the system instruction.
    FullContextCodebook { codebook_text: String },
    /// A tuned model id, prompted in the shape of `base_style`.
    FineTuned {
        tuned_model_id: String,
        base_style: Box<Paradigm>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParadigmError {
    #[error("few-shot paradigm needs at least one example")]
    NoExamples,
    #[error("codebook text is empty")]
    EmptyCodebook,
    #[error("tuned_model_id is empty")]
    EmptyTunedModel,
    #[error("fine-tuned base_style must be zero_shot, few_shot or full_context_codebook")]
    NestedFineTuned,
    #[error("example {index}: tagged text does not tokenize like its source text")]
    InconsistentExample { index: usize },
}

impl Paradigm {
    /// The prompt-shaping paradigm (a fine-tuned paradigm's base style).
    pub fn prompt_style(&self) -> &Paradigm {
        match self {
            Paradigm::FineTuned { base_style, .. } => base_style,
            other => other,
        }
    }

    pub fn codebook(&self) -> Option<&str> {
        match self.prompt_style() {
            Paradigm::FullContextCodebook { codebook_text } => Some(codebook_text),
            _ => None,
        }
    }

    pub fn examples(&self) -> &[ExamplePair] {
        match self.prompt_style() {
            Paradigm::FewShot { examples } => examples,
            _ => &[],
        }
    }

    pub fn tuned_model_id(&self) -> Option<&str> {
        match self {
            Paradigm::FineTuned { tuned_model_id, .. } => Some(tuned_model_id),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Paradigm::ZeroShot => "zero_shot",
            Paradigm::FewShot { .. } => "few_shot",
            Paradigm::FullContextCodebook { .. } => "full_context_codebook",
            Paradigm::FineTuned { .. } => "fine_tuned",
        }
    }

    pub fn validate(&self, labels: &LabelSet) -> Result<(), ParadigmError> {
        match self {
            Paradigm::ZeroShot => Ok(()),
            Paradigm::FewShot { examples } => {
                if examples.is_empty() {
                    return Err(ParadigmError::NoExamples);
                }
                for (index, ex) in examples.iter().enumerate() {
                    let tagged = tokenize(&strip_tags(&ex.gold_tagged, labels));
                    let source = tokenize(&ex.source_text);
                    let same = tagged.len() == source.len()
                        && tagged.iter().zip(&source).all(|(a, b)| a.text == b.text);
                    if !same {
                        return Err(ParadigmError::InconsistentExample { index });
                    }
                }
                Ok(())
            }
            Paradigm::FullContextCodebook { codebook_text } => {
                if codebook_text.trim().is_empty() {
                    Err(ParadigmError::EmptyCodebook)
                } else {
                    Ok(())
                }
            }
            Paradigm::FineTuned {
                tuned_model_id,
                base_style,
            } => {
                if tuned_model_id.trim().is_empty() {
                    return Err(ParadigmError::EmptyTunedModel);
                }
                if matches!(**base_style, Paradigm::FineTuned { .. }) {
                    return Err(ParadigmError::NestedFineTuned);
                }
                base_style.validate(labels)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseSchema {
    AnnotatorSchema,
    ReviewerSchema,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_instruction: String,
    pub user_message: String,
    pub schema: ResponseSchema,
}

impl PromptBundle {
    pub fn to_request(&self, json_mode: bool) -> ChatRequest {
        ChatRequest {
            system: self.system_instruction.clone(),
            user: self.user_message.clone(),
            json_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorResponse {
    pub reasoning: String,
    pub annotated_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewerResponse {
    pub critique: String,
    pub revised_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentResponse {
    Annotator(AnnotatorResponse),
    Reviewer(ReviewerResponse),
}

/// Prompt templates with `{{NAME}}` placeholders.
///
/// System templates see `LABEL`, `CODEBOOK` and `EXAMPLES`; the annotator
/// user template sees `TEXT`; the reviewer user template sees `TEXT`,
/// `ANNOTATED` and `REASONING`. `CODEBOOK`, `EXAMPLES` and `REASONING`
/// expand to whole sections, or to nothing when absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub annotator_system: String,
    pub annotator_user: String,
    pub reviewer_system: String,
    pub reviewer_user: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            annotator_system: include_str!("../templates/annotator_system.txt").to_string(),
            annotator_user: include_str!("../templates/annotator_user.txt").to_string(),
            reviewer_system: include_str!("../templates/reviewer_system.txt").to_string(),
            reviewer_user: include_str!("../templates/reviewer_user.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Defaults, overridden by any of `annotator_system.txt`,
    /// `annotator_user.txt`, `reviewer_system.txt`, `reviewer_user.txt`
    /// found in `dir`.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = PromptTemplates::default();
        for (name, slot) in [
            ("annotator_system.txt", &mut t.annotator_system),
            ("annotator_user.txt", &mut t.annotator_user),
            ("reviewer_system.txt", &mut t.reviewer_system),
            ("reviewer_user.txt", &mut t.reviewer_user),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        Ok(t)
    }
}

/// Single-pass placeholder substitution. Substituted values are never
/// rescanned, so a codebook containing `{{TEXT}}` stays literal. Unknown
/// placeholders are left as written.
pub fn fill_template(template: &str, values: &BTreeMap<&str, &str>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) if values.contains_key(&after[..close]) => {
                out.push_str(values[&after[..close]]);
                rest = &after[close + 2..];
            }
            _ => {
                out.push('{');
                rest = &rest[open + 1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn codebook_section(paradigm: &Paradigm) -> String {
    match paradigm.codebook() {
        Some(text) => format!(
            "Annotation guidelines (codebook), to be applied in full:\n<codebook>\n{text}\n</codebook>\n\n"
        ),
        None => String::new(),
    }
}

fn examples_section(paradigm: &Paradigm) -> String {
    let examples = paradigm.examples();
    if examples.is_empty() {
        return String::new();
    }
    let mut out = String::from("Worked examples:\n\n");
    for (i, ex) in examples.iter().enumerate() {
        out.push_str(&format!(
            "Example {}\nInput: {}\nOutput: {}\n\n",
            i + 1,
            ex.source_text,
            ex.gold_tagged
        ));
    }
    out
}

fn system_prompt(template: &str, paradigm: &Paradigm, label: &str) -> String {
    let codebook = codebook_section(paradigm);
    let examples = examples_section(paradigm);
    let values = BTreeMap::from([
        ("LABEL", label),
        ("CODEBOOK", codebook.as_str()),
        ("EXAMPLES", examples.as_str()),
    ]);
    fill_template(template, &values)
}

pub fn build_annotator_prompt_with(
    templates: &PromptTemplates,
    sample_text: &str,
    paradigm: &Paradigm,
    label: &str,
) -> PromptBundle {
    let values = BTreeMap::from([("TEXT", sample_text), ("LABEL", label)]);
    PromptBundle {
        system_instruction: system_prompt(&templates.annotator_system, paradigm, label),
        user_message: fill_template(&templates.annotator_user, &values),
        schema: ResponseSchema::AnnotatorSchema,
    }
}

pub fn build_annotator_prompt(sample_text: &str, paradigm: &Paradigm, label: &str) -> PromptBundle {
    build_annotator_prompt_with(&PromptTemplates::default(), sample_text, paradigm, label)
}

/// The reviewer sees the same paradigm context as the annotator.
pub fn build_reviewer_prompt_with(
    templates: &PromptTemplates,
    sample_text: &str,
    annotator_output: &AnnotatorResponse,
    paradigm: &Paradigm,
    label: &str,
    include_reasoning: bool,
) -> PromptBundle {
    let reasoning = if include_reasoning && !annotator_output.reasoning.trim().is_empty() {
        format!("Annotator reasoning:\n{}\n\n", annotator_output.reasoning)
    } else {
        String::new()
    };
    let values = BTreeMap::from([
        ("TEXT", sample_text),
        ("LABEL", label),
        ("ANNOTATED", annotator_output.annotated_text.as_str()),
        ("REASONING", reasoning.as_str()),
    ]);
    PromptBundle {
        system_instruction: system_prompt(&templates.reviewer_system, paradigm, label),
        user_message: fill_template(&templates.reviewer_user, &values),
        schema: ResponseSchema::ReviewerSchema,
    }
}

pub fn build_reviewer_prompt(
    sample_text: &str,
    annotator_output: &AnnotatorResponse,
    paradigm: &Paradigm,
    label: &str,
) -> PromptBundle {
    build_reviewer_prompt_with(
        &PromptTemplates::default(),
        sample_text,
        annotator_output,
        paradigm,
        label,
        true,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentParseError {
    #[error("malformed JSON{}: {detail}", if *.unbalanced { " (unbalanced, likely truncated)" } else { "" })]
    MalformedJson { detail: String, unbalanced: bool },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl AgentParseError {
    pub fn to_provider_error(&self) -> ProviderError {
        let class = match self {
            AgentParseError::MalformedJson {
                unbalanced: true, ..
            } => ErrorClass::Truncated,
            _ => ErrorClass::MalformedResponse,
        };
        ProviderError::new(class, self.to_string())
    }
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(inner) = t.strip_prefix("```") else {
        return t;
    };
    // drop the info string ("json") on the opening fence line
    let inner = match inner.find('\n') {
        Some(nl) => &inner[nl + 1..],
        None => inner,
    };
    inner.trim_end().strip_suffix("```").unwrap_or(inner).trim()
}

/// True when braces/brackets or a string literal are left open.
fn is_unbalanced(text: &str) -> bool {
    let mut depth: i64 = 0;
    let mut in_string = false;
    let mut escaped = false;
    for c in text.chars() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' | '[' => depth += 1,
            '}' | ']' => depth -= 1,
            _ => {}
        }
    }
    in_string || depth != 0
}

fn normalize_key(key: &str) -> String {
    key.trim()
        .chars()
        .map(|c| match c {
            ' ' | '-' => '_',
            c => c.to_ascii_lowercase(),
        })
        .collect()
}

fn required_field(
    map: &serde_json::Map<String, Value>,
    name: &str,
) -> Result<String, AgentParseError> {
    let value = map
        .iter()
        .find(|(k, _)| normalize_key(k) == name)
        .map(|(_, v)| v)
        .ok_or_else(|| AgentParseError::SchemaMismatch(format!("missing field {name:?}")))?;
    value
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| AgentParseError::SchemaMismatch(format!("field {name:?} is not a string")))
}

/// Parses a model's JSON reply. Keys match case-insensitively with spaces
/// and hyphens read as underscores ("Revised Text" == "revised_text").
pub fn parse_agent_json(raw: &str, schema: ResponseSchema) -> Result<AgentResponse, AgentParseError> {
    let body = strip_fences(raw);
    let value: Value = serde_json::from_str(body).map_err(|e| AgentParseError::MalformedJson {
        detail: e.to_string(),
        unbalanced: is_unbalanced(body),
    })?;
    let Value::Object(map) = value else {
        return Err(AgentParseError::SchemaMismatch(
            "top-level value is not an object".into(),
        ));
    };
    Ok(match schema {
        ResponseSchema::AnnotatorSchema => AgentResponse::Annotator(AnnotatorResponse {
            reasoning: required_field(&map, "reasoning")?,
            annotated_text: required_field(&map, "annotated_text")?,
        }),
        ResponseSchema::ReviewerSchema => AgentResponse::Reviewer(ReviewerResponse {
            critique: required_field(&map, "critique")?,
            revised_text: required_field(&map, "revised_text")?,
        }),
    })
}

pub fn parse_annotator_json(raw: &str) -> Result<AnnotatorResponse, AgentParseError> {
    match parse_agent_json(raw, ResponseSchema::AnnotatorSchema)? {
        AgentResponse::Annotator(r) => Ok(r),
        AgentResponse::Reviewer(_) => unreachable!("schema selects variant"),
    }
}

pub fn parse_reviewer_json(raw: &str) -> Result<ReviewerResponse, AgentParseError> {
    match parse_agent_json(raw, ResponseSchema::ReviewerSchema)? {
        AgentResponse::Reviewer(r) => Ok(r),
        AgentResponse::Annotator(_) => unreachable!("schema selects variant"),
    }
}

fn default_label() -> String {
    DEFAULT_LABEL.to_string()
}

fn default_true() -> bool {
    true
}

/// Everything that defines one experimental condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub paradigm: Paradigm,
    #[serde(default = "default_label")]
    pub label: String,
    pub annotator: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<ModelSpec>,
    #[serde(default)]
    pub reviewer_mode: bool,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Pass the annotator's reasoning to the reviewer.
    #[serde(default = "default_true")]
    pub include_annotator_reasoning: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("reviewer_mode is on but no reviewer model is configured")]
    MissingReviewer,
    #[error(transparent)]
    Label(#[from] TagError),
    #[error(transparent)]
    Paradigm(#[from] ParadigmError),
    #[error(transparent)]
    Spec(#[from] crate::providers::SpecError),
    #[error("{0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn labels(&self) -> Result<LabelSet, TagError> {
        LabelSet::single(&self.label)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let labels = self.labels()?;
        self.paradigm.validate(&labels)?;
        self.annotator.validate()?;
        self.retry.validate()?;
        match (&self.reviewer, self.reviewer_mode) {
            (None, true) => return Err(ConfigError::MissingReviewer),
            (Some(r), true) => r.validate()?,
            _ => {}
        }
        Ok(())
    }

    /// Annotator spec with the tuned model id substituted in when the
    /// paradigm is fine-tuned.
    pub fn effective_annotator_spec(&self) -> ModelSpec {
        let mut spec = self.annotator.clone();
        if let Some(id) = self.paradigm.tuned_model_id() {
            spec.model_id = id.to_string();
        }
        spec
    }
}

/// Receives every model attempt made while processing a sample.
pub trait InteractionSink: Send + Sync {
    fn record(&self, role: AgentRole, request: &ChatRequest, attempt: &AttemptRecord);
}

impl<F> InteractionSink for F
where
    F: Fn(AgentRole, &ChatRequest, &AttemptRecord) + Send + Sync,
{
    fn record(&self, role: AgentRole, request: &ChatRequest, attempt: &AttemptRecord) {
        self(role, request, attempt)
    }
}

async fn call_agent<T>(
    client: &Client,
    bundle: &PromptBundle,
    retry: &RetryPolicy,
    role: AgentRole,
    sink: &dyn InteractionSink,
    parse: impl Fn(&str) -> Result<T, AgentParseError>,
) -> Result<T, ProviderError> {
    let request = bundle.to_request(client.spec().json_mode);
    complete_with(
        client,
        &request,
        retry,
        |resp| parse(&resp.body_text).map_err(|e| e.to_provider_error()),
        |attempt| sink.record(role, &request, attempt),
    )
    .await
    .map(|(value, _)| value)
}

/// Runs the reflective loop for one sample. Failures land in the
/// outcome's status; nothing is returned as an error.
pub async fn run_sample(
    sample: &Sample,
    config: &ExperimentConfig,
    templates: &PromptTemplates,
    annotator: &Client,
    reviewer: Option<&Client>,
    sink: &dyn InteractionSink,
) -> SampleOutcome {
    let mut outcome = SampleOutcome::new(sample.clone());
    if sample.gold_tagged.trim().is_empty() {
        outcome.status = SampleStatus::SkippedEmptyGold;
        return outcome;
    }
    let labels = match config.labels() {
        Ok(l) => l,
        Err(e) => {
            outcome.status = SampleStatus::Failed;
            outcome.error_detail = Some(e.to_string());
            return outcome;
        }
    };

    let bundle = build_annotator_prompt_with(templates, &sample.text, &config.paradigm, &config.label);
    let annotation = match call_agent(
        annotator,
        &bundle,
        &config.retry,
        AgentRole::Annotator,
        sink,
        parse_annotator_json,
    )
    .await
    {
        Ok(a) => a,
        Err(err) => {
            outcome.status = SampleStatus::Failed;
            outcome.error_class = Some(err.class);
            outcome.error_detail = Some(err.detail);
            return outcome;
        }
    };

    let gold_doc = parse_tagged(&sample.gold_tagged, &labels);
    let annotated_doc = parse_tagged(&annotation.annotated_text, &labels);
    let mut pre = evaluate_docs(&gold_doc, &annotated_doc);
    if gold_doc.plain_text.trim().is_empty() {
        pre.flags.push(MetricFlag::EmptyGold);
    }
    outcome.annotator_response = Some(annotation.clone());
    outcome.metrics_pre = Some(pre.clone());
    outcome.metrics_post = Some(pre.clone());
    outcome.final_doc = Some(annotated_doc.clone());
    outcome.status = SampleStatus::Ok;

    if !config.reviewer_mode {
        return outcome;
    }
    let Some(reviewer) = reviewer else {
        outcome.status = SampleStatus::ReviewFailed;
        outcome.error_detail = Some(ConfigError::MissingReviewer.to_string());
        return outcome;
    };
    let bundle = build_reviewer_prompt_with(
        templates,
        &sample.text,
        &annotation,
        &config.paradigm,
        &config.label,
        config.include_annotator_reasoning,
    );
    match call_agent(
        reviewer,
        &bundle,
        &config.retry,
        AgentRole::Reviewer,
        sink,
        parse_reviewer_json,
    )
    .await
    {
        Ok(review) => {
            let revised_doc = parse_tagged(&review.revised_text, &labels);
            let post = if revised_doc.plain_text == annotated_doc.plain_text
                && revised_doc.spans == annotated_doc.spans
            {
                pre
            } else {
                let mut m = evaluate_docs(&gold_doc, &revised_doc);
                m.flags.extend(pre.flags.iter().filter(|f| **f == MetricFlag::EmptyGold));
                m
            };
            outcome.metrics_post = Some(post);
            outcome.final_doc = Some(revised_doc);
            outcome.reviewer_response = Some(review);
        }
        Err(err) => {
            outcome.status = SampleStatus::ReviewFailed;
            outcome.error_class = Some(err.class);
            outcome.error_detail = Some(err.detail);
        }
    }
    outcome
}
