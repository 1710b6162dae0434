//! The JSON experiment document accepted by the CLI (`--config`) and by
//! `POST /api/runs`. Codebook and few-shot examples are supplied separately
//! (files or uploaded ids) and bound in by [`ConfigDocument::resolve`].

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agents::{ConfigError, ExamplePair, ExperimentConfig, Paradigm, DEFAULT_LABEL};
use crate::providers::{ModelSpec, RetryPolicy};
use crate::runner::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParadigmKind {
    ZeroShot,
    FewShot,
    FullContextCodebook,
    FineTuned,
}

fn default_label() -> String {
    DEFAULT_LABEL.to_string()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDocument {
    pub paradigm: ParadigmKind,
    /// Required for `fine_tuned`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuned_model_id: Option<String>,
    /// Prompt shape for `fine_tuned`; defaults to `zero_shot`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_style: Option<ParadigmKind>,
    #[serde(default = "default_label")]
    pub label: String,
    pub annotator: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<ModelSpec>,
    #[serde(default)]
    pub reviewer_mode: bool,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_true")]
    pub include_annotator_reasoning: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

impl ConfigDocument {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Invalid(format!("config: {e}")))
    }

    fn paradigm(
        &self,
        kind: ParadigmKind,
        codebook: &Option<String>,
        examples: &Option<Vec<ExamplePair>>,
    ) -> Result<Paradigm, ConfigError> {
        Ok(match kind {
            ParadigmKind::ZeroShot => Paradigm::ZeroShot,
            ParadigmKind::FewShot => Paradigm::FewShot {
                examples: examples.clone().ok_or_else(|| {
                    ConfigError::Invalid("few_shot paradigm needs an examples file".into())
                })?,
            },
            ParadigmKind::FullContextCodebook => Paradigm::FullContextCodebook {
                codebook_text: codebook.clone().ok_or_else(|| {
                    ConfigError::Invalid("full_context_codebook paradigm needs a codebook".into())
                })?,
            },
            ParadigmKind::FineTuned => {
                let base = self.base_style.unwrap_or(ParadigmKind::ZeroShot);
                if base == ParadigmKind::FineTuned {
                    return Err(ConfigError::Invalid(
                        "base_style cannot be fine_tuned".into(),
                    ));
                }
                Paradigm::FineTuned {
                    tuned_model_id: self.tuned_model_id.clone().ok_or_else(|| {
                        ConfigError::Invalid("fine_tuned paradigm needs tuned_model_id".into())
                    })?,
                    base_style: Box::new(self.paradigm(base, codebook, examples)?),
                }
            }
        })
    }

    /// Binds the document to its inputs and validates the result.
    pub fn resolve(
        &self,
        codebook: Option<String>,
        examples: Option<Vec<ExamplePair>>,
        output_dir: PathBuf,
        default_run_id: impl FnOnce() -> String,
    ) -> Result<RunConfig, ConfigError> {
        let experiment = ExperimentConfig {
            paradigm: self.paradigm(self.paradigm, &codebook, &examples)?,
            label: self.label.clone(),
            annotator: self.annotator.clone(),
            reviewer: self.reviewer.clone(),
            reviewer_mode: self.reviewer_mode,
            retry: self.retry.clone(),
            include_annotator_reasoning: self.include_annotator_reasoning,
        };
        let config = RunConfig {
            experiment,
            workers: self.workers.unwrap_or(4),
            baseline_f1: self.baseline_f1.unwrap_or(0.5),
            output_dir,
            run_id: self.run_id.clone().unwrap_or_else(default_run_id),
        };
        config.validate()?;
        Ok(config)
    }
}
