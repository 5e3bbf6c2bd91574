//! Command-line driver. `run` parses arguments, dispatches to a subcommand
//! and returns the process exit code.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use promptflow_core::{Answer, ExperienceStore, MetaPrompt, TaskKind};
use serde_json::json;

use crate::backend::{self, BackendConfig, BackendKind};
use crate::config::{self, ConfigError, RunConfig};
use crate::dataset::{self, DatasetError, DatasetFormat, ExampleRecord};
use crate::engine::{self, EngineError};
use crate::evaluation::{evaluate, EvalOptions};
use crate::report::{self, to_json_pretty};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "promptflow", version, about = "Sectioned prompt optimization with learned operator selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Print results and errors as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` override; dotted keys reach nested fields.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Use the mock backend with this script.
    #[arg(long, value_name = "PATH")]
    pub mock_script: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a starter config, prompt template, mock script and sample data.
    Init {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        #[arg(long, default_value = "CLS")]
        task: TaskKind,
        /// Comma-separated label set.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Optimize the configured prompt.
    Train(ConfigArgs),
    /// Score a prompt on a dataset without training.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Prompt template file; defaults to the config's template.
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Dataset file; defaults to the config's test set, else its train set.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long, default_value = "auto")]
        format: DatasetFormat,
    },
    /// Summarize a run directory's checkpoints as JSON and CSV.
    Report {
        run_dir: PathBuf,
    },
    /// Copy a run's learned matrix to an experience file.
    ExperienceExport {
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an experience file against a config and install it as the
    /// config's `experience_in`.
    ExperienceImport {
        input: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Validate a config and print it with defaults filled in.
    ValidateConfig(ConfigArgs),
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error(transparent)]
    Backend(#[from] backend::BackendError),
    #[error(transparent)]
    Summary(#[from] report::SummaryError),
    #[error(transparent)]
    Experience(#[from] promptflow_core::ExperienceError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Dataset(_) | CliError::Invalid(_) => EXIT_INVALID,
            CliError::Engine(EngineError::Dataset(_)) | CliError::Engine(EngineError::NothingToEdit) => EXIT_INVALID,
            CliError::Experience(_) => EXIT_INVALID,
            _ => EXIT_RUNTIME,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Dataset(_) => "dataset",
            CliError::Invalid(_) => "invalid",
            CliError::Engine(_) => "engine",
            CliError::Eval(_) => "evaluation",
            CliError::Backend(_) => "backend",
            CliError::Summary(_) => "report",
            CliError::Experience(_) => "experience",
            CliError::Io { .. } => "io",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(io_err(p))
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<String>, CliError> {
        let mut out = self.set.clone();
        if let Some(seed) = self.seed {
            out.push(format!("seed={seed}"));
        }
        if let Some(script) = &self.mock_script {
            let abs = absolute(script)?;
            out.push("backend.kind=mock".into());
            out.push(format!("backend.mock_script={}", serde_json::to_string(&abs).expect("path serializes")));
        }
        Ok(out)
    }

    fn load(&self) -> Result<RunConfig, CliError> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| CliError::Invalid("--config is required for this subcommand".into()))?;
        Ok(config::load(path, &self.overrides()?)?)
    }

    /// The backend settings, from the config when one is given.
    fn backend(&self) -> Result<(BackendConfig, Option<RunConfig>), CliError> {
        if self.config.is_some() {
            let cfg = self.load()?;
            return Ok((cfg.backend.clone(), Some(cfg)));
        }
        let mut b = BackendConfig::default();
        if let Some(script) = &self.mock_script {
            b.mock_script = Some(absolute(script)?);
        } else {
            b.kind = BackendKind::Http;
        }
        b.validate().map_err(CliError::Invalid)?;
        Ok((b, None))
    }
}

struct Io<'a> {
    out: &'a mut dyn Write,
    json: bool,
}

impl Io<'_> {
    fn emit(&mut self, text: &str, value: serde_json::Value) {
        let _ = if self.json {
            writeln!(self.out, "{}", serde_json::to_string(&value).expect("json serializes"))
        } else {
            writeln!(self.out, "{text}")
        };
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{rendered}") } else { write!(out, "{rendered}") };
            return code;
        }
    };
    let json = cli.json;
    let mut io = Io { out, json };
    match dispatch(cli.command, &mut io) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = e.exit_code();
            let _ = if json {
                let v = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
                writeln!(err, "{v}")
            } else {
                writeln!(err, "error: {e}")
            };
            code
        }
    }
}

/// Log level implied by the verbosity flags.
pub fn log_level(cli: &Cli) -> log::LevelFilter {
    if cli.quiet {
        return log::LevelFilter::Error;
    }
    match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    }
}

fn dispatch(command: Command, io: &mut Io<'_>) -> Result<(), CliError> {
    match command {
        Command::Init { dir, task, labels, force } => init(&dir, task, &labels, force, io),
        Command::Train(args) => train(&args, io),
        Command::Evaluate { cfg, prompt, dataset, task, format } => {
            evaluate_cmd(&cfg, prompt.as_deref(), dataset.as_deref(), task, format, io)
        }
        Command::Report { run_dir } => report_cmd(&run_dir, io),
        Command::ExperienceExport { run_dir, out } => experience_export(&run_dir, &out, io),
        Command::ExperienceImport { input, cfg } => experience_import(&input, &cfg, io),
        Command::ValidateConfig(args) => {
            let cfg = args.load()?;
            io.emit(&cfg.to_json(), serde_json::to_value(&cfg).expect("config serializes"));
            Ok(())
        }
    }
}

fn init(dir: &Path, task: TaskKind, labels: &[String], force: bool, io: &mut Io<'_>) -> Result<(), CliError> {
    let files = ["run.json", "template.json", "mock_script.json", "data/train.jsonl"].map(|f| dir.join(f));
    if !force {
        if let Some(existing) = files.iter().find(|p| p.exists()) {
            return Err(CliError::Invalid(format!("{} already exists; pass --force to overwrite", existing.display())));
        }
    }
    let labels = match (task, labels.is_empty()) {
        (TaskKind::Cls, true) => vec!["yes".to_string(), "no".to_string()],
        _ => labels.to_vec(),
    };
    let mut cfg = RunConfig {
        task,
        labels: labels.clone(),
        template: Some("template.json".into()),
        iterations: 3,
        ..RunConfig::default()
    };
    cfg.dataset.train = "data/train.jsonl".into();
    cfg.backend.mock_script = Some("mock_script.json".into());
    let template = MetaPrompt::scratch(task, &labels);
    let script = json!([{ "match": { "any": true }, "response": "{}" }]);
    write_file(&files[0], &cfg.to_json())?;
    write_file(&files[1], &template.to_template_json())?;
    write_file(&files[2], &to_json_pretty(&script))?;
    write_file(&files[3], &sample_dataset(task, &labels))?;
    let written: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    io.emit(&format!("wrote {}", written.join(", ")), json!({ "written": written }));
    Ok(())
}

/// A handful of placeholder examples to replace with real data.
fn sample_dataset(task: TaskKind, labels: &[String]) -> String {
    (0..6)
        .map(|i| {
            let gold = match task {
                TaskKind::Cls => Answer::Cls(labels[i % labels.len()].clone()),
                TaskKind::Ner => Answer::Ner(
                    labels.iter().take(1).map(|l| (l.clone(), BTreeSet::from([(0, 6)]))).collect(),
                ),
                TaskKind::Mrc => Answer::Mrc(vec!["sample".into()]),
            };
            let record = ExampleRecord { id: format!("sample-{i}"), task, input: format!("sample text {i}"), gold };
            serde_json::to_string(&record).expect("record serializes") + "\n"
        })
        .collect()
}

fn train(args: &ConfigArgs, io: &mut Io<'_>) -> Result<(), CliError> {
    let cfg = args.load()?;
    let data = engine::load_datasets(&cfg)?;
    let template = engine::load_template(&cfg, &data.labels)?;
    let backend = backend::from_config(&cfg.backend)?;
    let outcome = engine::train(&cfg, &data, template, backend.as_ref(), Some(&cfg.output_dir))?;
    let r = &outcome.report;
    let run_dir = outcome.run_dir.as_ref().map(|p| p.display().to_string());
    let test = r.test.as_ref().map(|t| t.objective);
    let text = format!(
        "run {}: {} iterations, best train {:.5}{}, stop: {:?}\nwrote {}",
        r.run_id,
        r.iterations.len(),
        r.best_train,
        test.map(|t| format!(", test {t:.5}")).unwrap_or_default(),
        r.stop_reason,
        run_dir.clone().unwrap_or_default(),
    );
    io.emit(
        &text,
        json!({
            "run_id": r.run_id,
            "run_dir": run_dir,
            "iterations": r.iterations.len(),
            "best_train": r.best_train,
            "test": test,
            "stop_reason": r.stop_reason,
            "best_fingerprint": r.best_fingerprint,
        }),
    );
    Ok(())
}

fn evaluate_cmd(
    args: &ConfigArgs,
    prompt: Option<&Path>,
    dataset_path: Option<&Path>,
    task: Option<TaskKind>,
    format: DatasetFormat,
    io: &mut Io<'_>,
) -> Result<(), CliError> {
    let (backend_cfg, cfg) = args.backend()?;
    let examples = match (dataset_path, &cfg) {
        (Some(p), _) => dataset::load(p, format)?,
        (None, Some(c)) => {
            let d = engine::load_datasets(c)?;
            if d.test.is_empty() {
                d.train
            } else {
                d.test
            }
        }
        (None, None) => return Err(CliError::Invalid("--dataset or --config is required".into())),
    };
    let task = task
        .or(cfg.as_ref().map(|c| c.task))
        .or(examples.first().map(|e| e.task))
        .ok_or(DatasetError::Empty)?;
    let labels = match &cfg {
        Some(c) if !c.labels.is_empty() => c.labels.clone(),
        _ => dataset::labels_of(&examples),
    };
    dataset::validate(&examples, task, &labels)?;
    let prompt = match (prompt, &cfg) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            MetaPrompt::from_template_json(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?
        }
        (None, Some(c)) => engine::load_template(c, &labels)?,
        (None, None) => MetaPrompt::scratch(task, &labels),
    };
    let mut opts = EvalOptions::new(task);
    if let Some(c) = &cfg {
        opts.objective = c.objective;
        opts.cls_average = c.cls_average;
        opts.bad_case_cap = c.bad_case_cap;
        opts.diagnose = c.diagnose_bad_cases;
        opts.seed = c.seed;
    }
    opts.model = backend_cfg.model.clone();
    opts.max_tokens = backend_cfg.max_tokens;
    let backend = backend::from_config(&backend_cfg)?;
    let ev = evaluate(&prompt, &examples, backend.as_ref(), &opts)?;
    let o = &ev.report.overall;
    let text = format!(
        "objective {}\nprecision {:.5} recall {:.5} f1 {:.5} ({} examples, {} format failures, {} bad cases)",
        ev.objective(),
        o.precision,
        o.recall,
        o.f1,
        examples.len(),
        ev.report.format_failures,
        ev.bad_cases.len()
    );
    io.emit(
        &text,
        json!({ "objective": ev.objective(), "report": ev.report, "bad_cases": ev.bad_cases }),
    );
    Ok(())
}

fn report_cmd(run_dir: &Path, io: &mut Io<'_>) -> Result<(), CliError> {
    let (summary, csv) = report::summarize(run_dir)?;
    write_file(&run_dir.join("summary.json"), &to_json_pretty(&summary))?;
    write_file(&run_dir.join("summary.csv"), &csv)?;
    io.emit(csv.trim_end(), serde_json::to_value(&summary).expect("summary serializes"));
    Ok(())
}

fn experience_export(run_dir: &Path, out: &Path, io: &mut Io<'_>) -> Result<(), CliError> {
    let src = run_dir.join("experience.json");
    let text = std::fs::read_to_string(&src).map_err(io_err(&src))?;
    let store = ExperienceStore::parse(&text)?;
    write_file(out, &store.to_json())?;
    io.emit(
        &format!("exported {} ({} epochs) to {}", src.display(), store.epochs_trained, out.display()),
        json!({ "from": src, "to": out, "epochs_trained": store.epochs_trained }),
    );
    Ok(())
}

fn experience_import(input: &Path, args: &ConfigArgs, io: &mut Io<'_>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(input).map_err(io_err(input))?;
    let store = ExperienceStore::parse(&text)?;
    let mut cfg = args.load()?;
    let target = cfg
        .experience_in
        .clone()
        .ok_or_else(|| CliError::Invalid("config has no experience_in path to import into".into()))?;
    cfg.experience_in = None;
    let labels = if cfg.labels.is_empty() { Vec::new() } else { cfg.labels.clone() };
    let template = engine::load_template(&cfg, &labels)?;
    let rows = engine::section_rows(&template);
    let stored = store.matrix()?;
    let known_rows = stored.sections().to_vec();
    let known_ops = stored.operators().to_vec();
    store.align(&rows, &cfg.operators)?;
    let new_rows: Vec<&String> = rows.iter().filter(|r| !known_rows.contains(r)).collect();
    let new_ops: Vec<String> =
        cfg.operators.iter().filter(|o| !known_ops.contains(o)).map(|o| o.to_string()).collect();
    if store.task_kind != cfg.task {
        log::warn!("experience was trained on {} but the config is {}", store.task_kind, cfg.task);
    }
    write_file(&target, &store.to_json())?;
    io.emit(
        &format!(
            "installed {} as {} (new sections: {}, new operators: {})",
            input.display(),
            target.display(),
            if new_rows.is_empty() { "none".to_string() } else { format!("{new_rows:?}") },
            if new_ops.is_empty() { "none".to_string() } else { new_ops.join(", ") },
        ),
        json!({ "installed": target, "new_sections": new_rows, "new_operators": new_ops }),
    );
    Ok(())
}
