//! Command-line front end: run experiments, score prediction files,
//! regenerate exports and serve the HTTP API.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use annoloop_core::agents::{PromptTemplates, DEFAULT_LABEL};
use annoloop_core::config::ConfigDocument;
use annoloop_core::evaluator::{evaluate_pair, fmt_metric, macro_average, micro_average, MetricFlag};
use annoloop_core::runner::{
    export_csv, load_dataset_csv, load_examples_csv, load_predictions_csv, new_run_id, run_batch,
    RunClients, RunEvent, RunSummary, SUMMARY_FILE,
};
use annoloop_core::service::{serve, ServiceConfig};
use annoloop_core::tagspan::LabelSet;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "annoloop", version, about = "Annotator/Reviewer span tagging with token-level scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate (and optionally review) every sample of a dataset.
    Run {
        /// CSV with header `id,text,gold`.
        #[arg(long)]
        dataset: PathBuf,
        /// JSON experiment document.
        #[arg(long)]
        config: PathBuf,
        /// Codebook text for the full-context paradigm.
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Few-shot examples CSV with header `text,gold`.
        #[arg(long)]
        examples: Option<PathBuf>,
        /// Directory receiving `<run_id>/` artifacts.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Directory with replacement prompt templates.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Score predictions against gold annotations.
    Evaluate {
        /// CSV with header `id,text,gold`.
        #[arg(long)]
        gold: PathBuf,
        /// CSV with `id` and a `pred` or `final_text` column.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value = DEFAULT_LABEL)]
        label: String,
    },
    /// Regenerate `export.csv` from a run's `summary.json`.
    Export {
        #[arg(long)]
        run_dir: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8787")]
        addr: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Allowed browser origin; repeatable. Any origin when omitted.
        #[arg(long = "ui-origin")]
        ui_origins: Vec<String>,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Check a dataset CSV without running anything.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
    },
}

/// A failure printed as one `error[kind]: message` line.
#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl fmt::Display) -> Self {
        CliError {
            kind,
            message: message.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.replace(['\r', '\n'], " ");
        write!(f, "error[{}]: {one_line}", self.kind)
    }
}

fn at(path: &Path, e: impl fmt::Display) -> String {
    format!("{}: {e}", path.display())
}

fn load_templates(dir: Option<&Path>) -> Result<PromptTemplates, CliError> {
    match dir {
        Some(d) => PromptTemplates::load_dir(d).map_err(|e| CliError::new("templates", at(d, e))),
        None => Ok(PromptTemplates::default()),
    }
}

#[allow(clippy::too_many_arguments)]
async fn cmd_run(
    dataset: &Path,
    config: &Path,
    codebook: Option<&Path>,
    examples: Option<&Path>,
    out: PathBuf,
    templates: Option<&Path>,
    workers: Option<usize>,
    run_id: Option<String>,
) -> Result<ExitCode, CliError> {
    let samples = load_dataset_csv(dataset).map_err(|e| CliError::new("dataset", at(dataset, e)))?;
    let text = std::fs::read_to_string(config).map_err(|e| CliError::new("config", at(config, e)))?;
    let mut doc = ConfigDocument::from_json(&text).map_err(|e| CliError::new("config", at(config, e)))?;
    if workers.is_some() {
        doc.workers = workers;
    }
    if run_id.is_some() {
        doc.run_id = run_id;
    }
    let codebook = codebook
        .map(|p| std::fs::read_to_string(p).map_err(|e| CliError::new("codebook", at(p, e))))
        .transpose()?;
    let examples = examples
        .map(|p| load_examples_csv(p).map_err(|e| CliError::new("examples", at(p, e))))
        .transpose()?;
    let run_config = doc
        .resolve(codebook, examples, out, new_run_id)
        .map_err(|e| CliError::new("config", e))?;
    if run_config.run_dir().exists() {
        return Err(CliError::new(
            "config",
            format!("run directory {} already exists", run_config.run_dir().display()),
        ));
    }
    let templates = load_templates(templates)?;
    let clients = RunClients::from_config(&run_config.experiment).map_err(|e| CliError::new("config", e))?;

    let progress = |event: &RunEvent| {
        if let RunEvent::Sample(e) = event {
            let f1 = |v: Option<f64>| v.map_or_else(|| "-".to_string(), fmt_metric);
            println!(
                "[{}/{}] {} {} f1 {} -> {}",
                e.completed,
                e.total,
                e.id,
                e.status_label,
                f1(e.f1_pre),
                f1(e.f1_post)
            );
        }
    };
    let summary = run_batch(&run_config, &samples, &clients, &templates, &progress, None)
        .await
        .map_err(|e| CliError::new("run", e))?;
    print_summary(&summary, &run_config.run_dir());
    Ok(if summary.any_failed() {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn print_summary(summary: &RunSummary, dir: &Path) {
    println!();
    println!("run {}  ({})", summary.run_id, dir.display());
    println!("{:<6} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1");
    for (name, avg) in [("pre", summary.macro_pre), ("post", summary.macro_post)] {
        match avg {
            Some(m) => println!(
                "{name:<6} {:>9} {:>9} {:>9}",
                fmt_metric(m.precision),
                fmt_metric(m.recall),
                fmt_metric(m.f1)
            ),
            None => println!("{name:<6} {:>9} {:>9} {:>9}", "-", "-", "-"),
        }
    }
    let counts: Vec<String> = summary
        .status_counts
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    println!("status {}", counts.join(" "));
    if !summary.error_counts.is_empty() {
        let errors: Vec<String> = summary
            .error_counts
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        println!("errors {}", errors.join(" "));
    }
}

fn cmd_evaluate(gold: &Path, pred: &Path, label: &str) -> Result<ExitCode, CliError> {
    let labels = LabelSet::single(label).map_err(|e| CliError::new("label", e))?;
    let gold_rows = load_dataset_csv(gold).map_err(|e| CliError::new("dataset", at(gold, e)))?;
    let preds = load_predictions_csv(pred).map_err(|e| CliError::new("predictions", at(pred, e)))?;
    let by_id: HashMap<&str, &str> = preds.iter().map(|p| (p.id.as_str(), p.tagged.as_str())).collect();
    let mut scored = Vec::with_capacity(gold_rows.len());
    println!("id\tprecision\trecall\tf1\tflags");
    for row in &gold_rows {
        let p = by_id
            .get(row.id.as_str())
            .ok_or_else(|| CliError::new("predictions", format!("no prediction for id {:?}", row.id)))?;
        let m = evaluate_pair(&row.gold_tagged, p, &labels);
        let flags: Vec<&str> = m
            .flags
            .iter()
            .map(|f| match f {
                MetricFlag::AlignmentDivergent => "AlignmentDivergent",
                MetricFlag::EmptyGold => "EmptyGold",
            })
            .collect();
        println!(
            "{}\t{}\t{}\t{}\t{}",
            row.id,
            fmt_metric(m.precision),
            fmt_metric(m.recall),
            fmt_metric(m.f1),
            flags.join(",")
        );
        scored.push(m);
    }
    let mac = macro_average(&scored).map_err(|e| CliError::new("eval", e))?;
    let mic = micro_average(&scored).map_err(|e| CliError::new("eval", e))?;
    println!(
        "macro\t{}\t{}\t{}\tn={}",
        fmt_metric(mac.precision),
        fmt_metric(mac.recall),
        fmt_metric(mac.f1),
        mac.samples
    );
    println!(
        "micro\t{}\t{}\t{}\t",
        fmt_metric(mic.precision),
        fmt_metric(mic.recall),
        fmt_metric(mic.f1)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(run_dir: &Path, out: Option<&Path>) -> Result<ExitCode, CliError> {
    let path = run_dir.join(SUMMARY_FILE);
    let summary = RunSummary::load(&path).map_err(|e| CliError::new("summary", at(&path, e)))?;
    let bytes = export_csv(&summary);
    match out {
        Some(p) => std::fs::write(p, bytes).map_err(|e| CliError::new("io", at(p, e)))?,
        None => std::io::stdout()
            .write_all(&bytes)
            .map_err(|e| CliError::new("io", e))?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(dataset: &Path) -> Result<ExitCode, CliError> {
    let samples = load_dataset_csv(dataset).map_err(|e| CliError::new("dataset", at(dataset, e)))?;
    let empty = samples.iter().filter(|s| s.gold_tagged.trim().is_empty()).count();
    println!("ok: {} samples ({empty} with empty gold)", samples.len());
    Ok(ExitCode::SUCCESS)
}

async fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run {
            dataset,
            config,
            codebook,
            examples,
            out,
            templates,
            workers,
            run_id,
        } => {
            cmd_run(
                &dataset,
                &config,
                codebook.as_deref(),
                examples.as_deref(),
                out,
                templates.as_deref(),
                workers,
                run_id,
            )
            .await
        }
        Command::Evaluate { gold, pred, label } => cmd_evaluate(&gold, &pred, &label),
        Command::Export { run_dir, out } => cmd_export(&run_dir, out.as_deref()),
        Command::Serve {
            addr,
            out,
            ui_origins,
            templates,
        } => {
            let mut config = ServiceConfig::new(out);
            config.ui_origins = ui_origins;
            config.templates = load_templates(templates.as_deref())?;
            serve(&addr, config)
                .await
                .map_err(|e| CliError::new("serve", format!("{addr}: {e}")))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { dataset } => cmd_validate(&dataset),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
