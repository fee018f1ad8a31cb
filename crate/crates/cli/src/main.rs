mod layers;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use juvenotes_core::domain::{Course, CourseId, JobId, PaperMeta, PastPaperId};
use juvenotes_core::ocr::content_type_for;
use juvenotes_core::pipeline::{HaltPoint, JobState, Pipeline};
use juvenotes_core::store::{SeedFile, Store};
use juvenotes_core::Error;
use juvenotes_server::Settings;

/// Set to a job state (or `before-commit`) to make `process` die at that
/// point, as a crash would. Used by recovery tests.
const HALT_ENV: &str = "JUVENOTES_HALT_AT";

#[derive(Debug, Parser)]
#[command(name = "juvenotes", version, about = "Turn exam papers into a practice question bank")]
struct Cli {
    /// TOML file with the same keys as the environment variables.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print a JSON summary instead of text lines.
    #[arg(long, global = true)]
    json: bool,
    /// Database location; overrides DATABASE_URL.
    #[arg(long, global = true, value_name = "URL")]
    database: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Provider {
    Local,
    Remote,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP and websocket service.
    Serve {
        #[arg(long, value_name = "ADDR")]
        bind: Option<String>,
        /// Token table file; overrides AUTH_TOKENS_FILE.
        #[arg(long, value_name = "FILE")]
        tokens: Option<PathBuf>,
    },
    /// Run one document through the pipeline without the service.
    Process {
        file: PathBuf,
        /// Course id or course code.
        #[arg(long)]
        course: String,
        #[arg(long)]
        paper_title: String,
        #[arg(long)]
        paper_year: i32,
        /// Which OCR and question providers to use.
        #[arg(long, value_enum)]
        provider: Option<Provider>,
        /// Also write the resulting bank here.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Write a paper's question bank in interchange form.
    Export {
        #[arg(long)]
        paper_id: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Load an interchange bank into a course.
    Import {
        #[arg(long, value_name = "FILE")]
        file: PathBuf,
        /// Course id or course code.
        #[arg(long)]
        course: String,
    },
    /// Load institutions, courses, concepts and users from `seed.json`.
    Seed {
        #[arg(long, value_name = "DIR", default_value = "fixtures")]
        fixtures_dir: PathBuf,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub exit: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { exit: 2, message: message.into() }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self { exit: 1, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let usage = matches!(
            e,
            Error::Config(_)
                | Error::InvalidRequest(_)
                | Error::UnknownCourse(_)
                | Error::UnknownPaper(_)
                | Error::BadInterchange(_)
                | Error::InvalidContent(_)
                | Error::UnsupportedFormat(_)
                | Error::EmptyDocument
                | Error::TooLarge { .. }
        );
        Self { exit: if usage { 2 } else { 1 }, message: format!("{}: {e}", e.code()) }
    }
}

/// A command's result, printed as `key: value` lines or one JSON object.
struct Summary(Vec<(&'static str, Value)>);

impl Summary {
    fn print(&self, as_json: bool) {
        if as_json {
            let map: serde_json::Map<String, Value> = self.0.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
            println!("{}", Value::Object(map));
        } else {
            for (k, v) in &self.0 {
                match v {
                    Value::String(s) => println!("{k}: {s}"),
                    other => println!("{k}: {other}"),
                }
            }
        }
    }
}

fn settings(cli: &Cli, flags: layers::Vars) -> Result<Settings, CliError> {
    let file = match &cli.config {
        Some(path) => layers::from_config_file(path)?,
        None => layers::Vars::new(),
    };
    let mut flags = flags;
    if let Some(db) = &cli.database {
        flags.insert("DATABASE_URL".into(), db.clone());
    }
    Settings::from_vars(layers::merge([file, layers::from_env(), flags])).map_err(|e| CliError::usage(e.to_string()))
}

fn resolve_course(store: &Store, course: &str) -> Result<Course, CliError> {
    match store.course(&CourseId::from(course)) {
        Ok(c) => Ok(c),
        Err(Error::UnknownCourse(_)) => Ok(store.course_by_code(course)?),
        Err(e) => Err(e.into()),
    }
}

fn halt_point() -> Result<Option<HaltPoint>, CliError> {
    let Ok(raw) = std::env::var(HALT_ENV) else { return Ok(None) };
    if raw == "before-commit" {
        return Ok(Some(HaltPoint::BeforeInsertCommit));
    }
    raw.parse::<JobState>()
        .map(|s| Some(HaltPoint::Entered(s)))
        .map_err(|_| CliError::usage(format!("{HALT_ENV}={raw:?} is not a job state")))
}

/// Runs a job inline. With a halt point configured the process dies the
/// moment the job stops short of a terminal state.
fn drive(pipeline: &Pipeline, job: &JobId) -> Result<JobState, CliError> {
    let state = pipeline.run_job(job)?;
    if !state.is_terminal() && pipeline.config().halt_at.is_some() {
        eprintln!("halting job {job} in state {state}");
        std::process::abort();
    }
    Ok(state)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
}

fn process(
    cli: &Cli,
    file: &Path,
    course: &str,
    paper: PaperMeta,
    provider: Option<Provider>,
    out: Option<&Path>,
) -> Result<Summary, CliError> {
    let bytes = std::fs::read(file).map_err(|e| CliError::usage(format!("cannot read {}: {e}", file.display())))?;
    let mut flags = layers::Vars::new();
    if let Some(p) = provider {
        let (ocr, synth) = match p {
            Provider::Local => ("fixture", "local"),
            Provider::Remote => ("remote", "remote"),
        };
        flags.insert("OCR_PROVIDER".into(), ocr.into());
        flags.insert("SYNTH_PROVIDER".into(), synth.into());
    }
    let settings = settings(cli, flags)?;
    let store = Arc::new(settings.open_store()?);
    let mut config = settings.pipeline_config();
    config.halt_at = halt_point()?;
    let pipeline = Pipeline::new(
        Arc::clone(&store),
        settings.ocr_provider()?,
        settings.synthesis_provider()?,
        Arc::new(juvenotes_core::progress::ProgressHub::new()),
        config,
    );

    for pending in pipeline.pending_jobs()? {
        let state = drive(&pipeline, &pending)?;
        eprintln!("recovered unfinished job {pending}: {state}");
    }

    let course = resolve_course(&store, course)?;
    let filename = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "document".into());
    let started = Instant::now();
    let document = store.put_document(&filename, content_type_for(&filename), &bytes)?;
    let job_id = pipeline.submit_job(&document.id, &course.id, &paper)?;
    drive(&pipeline, &job_id)?;
    let job = pipeline.job(&job_id)?;
    let seconds = started.elapsed().as_secs_f64();

    if let Some(failure) = &job.failure {
        return Err(CliError::failure(format!(
            "job {job_id} failed during {}: {}: {}",
            failure.stage, failure.error_code, failure.message
        )));
    }
    let result = job.result.as_ref().ok_or_else(|| CliError::failure(format!("job {job_id} finished without a result")))?;
    let mut summary = vec![
        ("job_id", json!(job_id)),
        ("paper_id", json!(result.past_paper_id)),
        ("accepted", json!(result.accepted_count)),
        ("dropped", json!(result.dropped_count)),
        ("dropped_reasons", json!(result.dropped)),
        ("rejected", json!(result.rejected)),
        ("inserted", json!(result.inserted)),
        ("seconds", json!((seconds * 1000.0).round() / 1000.0)),
    ];
    if let Some(path) = out {
        write_file(path, &store.export_bank(&result.past_paper_id)?)?;
        summary.push(("out", json!(path.display().to_string())));
    }
    Ok(Summary(summary))
}

fn run(cli: &Cli) -> Result<Option<Summary>, CliError> {
    match &cli.command {
        Command::Serve { bind, tokens } => {
            let mut flags = layers::Vars::new();
            if let Some(b) = bind {
                flags.insert("BIND_ADDR".into(), b.clone());
            }
            if let Some(t) = tokens {
                flags.insert("AUTH_TOKENS_FILE".into(), t.display().to_string());
            }
            let settings = settings(cli, flags)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::failure(e.to_string()))?;
            runtime.block_on(juvenotes_server::run(&settings))?;
            Ok(None)
        }
        Command::Process { file, course, paper_title, paper_year, provider, out } => {
            let paper = PaperMeta { title: paper_title.clone(), year: *paper_year };
            process(cli, file, course, paper, *provider, out.as_deref()).map(Some)
        }
        Command::Export { paper_id, out } => {
            let store = settings(cli, layers::Vars::new())?.open_store()?;
            let paper = PastPaperId::from(paper_id.as_str());
            let bank = store.export_bank(&paper)?;
            write_file(out, &bank)?;
            Ok(Some(Summary(vec![
                ("paper_id", json!(paper)),
                ("questions", json!(store.paper_questions(&paper)?.len())),
                ("out", json!(out.display().to_string())),
            ])))
        }
        Command::Import { file, course } => {
            let store = settings(cli, layers::Vars::new())?.open_store()?;
            let bytes =
                std::fs::read(file).map_err(|e| CliError::usage(format!("cannot read {}: {e}", file.display())))?;
            let course = resolve_course(&store, course)?;
            let summary = store.import_bank(&bytes, &course.id)?;
            Ok(Some(Summary(vec![
                ("paper_id", json!(summary.past_paper_id)),
                ("inserted", json!(summary.inserted)),
                ("skipped", json!(summary.skipped)),
            ])))
        }
        Command::Seed { fixtures_dir } => {
            let path = fixtures_dir.join("seed.json");
            if !path.is_file() {
                return Err(CliError::usage(format!("{} not found", path.display())));
            }
            let seed = SeedFile::load(&path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            let store = settings(cli, layers::Vars::new())?.open_store()?;
            let counts = store.seed(&seed)?;
            Ok(Some(Summary(vec![
                ("institutions", json!(counts.institutions)),
                ("concepts", json!(counts.concepts)),
                ("courses", json!(counts.courses)),
                ("users", json!(counts.users)),
            ])))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| default_level.into()),
        )
        .init();
    match run(&cli) {
        Ok(summary) => {
            if let Some(s) = summary {
                s.print(cli.json);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit)
        }
    }
}
