//! Service settings read from a flat key/value map (environment variables,
//! or the same keys from a config file).

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use juvenotes_core::clock::SystemClock;
use juvenotes_core::ocr::{FixtureOcrProvider, OcrProvider, RemoteOcrConfig, RemoteOcrProvider};
use juvenotes_core::pipeline::{Pipeline, PipelineConfig};
use juvenotes_core::progress::ProgressHub;
use juvenotes_core::store::{Location, Store};
use juvenotes_core::synthesis::{LocalSynthesisProvider, RemoteLlmConfig, RemoteSynthesisProvider, SynthesisProvider};
use juvenotes_core::upload::{UploadConfig, DEFAULT_CHUNK_SIZE, DEFAULT_MAX_UPLOAD};
use juvenotes_core::{Error, Result};

/// Every key the service understands.
pub const KEYS: &[&str] = &[
    "BIND_ADDR",
    "DATABASE_URL",
    "AUTH_TOKENS_FILE",
    "OCR_PROVIDER",
    "OCR_FIXTURES_DIR",
    "OCR_ENDPOINT",
    "OCR_API_KEY",
    "SYNTH_PROVIDER",
    "LLM_ENDPOINT",
    "LLM_API_KEY",
    "LLM_MODEL",
    "PROMPT_PATH",
    "LOCALE_NOTE",
    "REVIEW_FIRST",
    "PIPELINE_WORKERS",
    "UPLOAD_CHUNK_SIZE",
    "MAX_UPLOAD_BYTES",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcrChoice {
    Fixture,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthChoice {
    Local,
    Remote,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub bind_addr: SocketAddr,
    pub database_url: String,
    pub auth_tokens_file: Option<PathBuf>,
    pub ocr: OcrChoice,
    pub ocr_fixtures_dir: PathBuf,
    pub synth: SynthChoice,
    pub prompt_path: PathBuf,
    pub locale_note: Option<String>,
    pub review_first: bool,
    pub workers: usize,
    pub upload: UploadConfig,
    vars: BTreeMap<String, String>,
}

fn parse<T: FromStr>(vars: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match vars.get(key).map(|v| v.trim()).filter(|v| !v.is_empty()) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| Error::Config(format!("{key}={v:?} is not valid"))),
    }
}

fn flag(vars: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    match vars.get(key).map(|v| v.trim().to_ascii_lowercase()).as_deref() {
        None | Some("") | Some("0") | Some("false") | Some("no") | Some("off") => Ok(false),
        Some("1") | Some("true") | Some("yes") | Some("on") => Ok(true),
        Some(other) => Err(Error::Config(format!("{key}={other:?} is not a boolean"))),
    }
}

impl Settings {
    pub fn from_env() -> Result<Self> {
        let vars = KEYS.iter().filter_map(|k| std::env::var(k).ok().map(|v| (k.to_string(), v))).collect();
        Self::from_vars(vars)
    }

    pub fn from_vars(vars: BTreeMap<String, String>) -> Result<Self> {
        if let Some(unknown) = vars.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown setting {unknown}")));
        }
        let get = |k: &str| vars.get(k).map(|v| v.trim().to_string()).filter(|v| !v.is_empty());
        let ocr = match get("OCR_PROVIDER").as_deref() {
            None | Some("fixture") | Some("local") => OcrChoice::Fixture,
            Some("remote") => OcrChoice::Remote,
            Some(other) => return Err(Error::Config(format!("OCR_PROVIDER={other:?}: expected fixture or remote"))),
        };
        let synth = match get("SYNTH_PROVIDER").as_deref() {
            None | Some("local") => SynthChoice::Local,
            Some("remote") => SynthChoice::Remote,
            Some(other) => return Err(Error::Config(format!("SYNTH_PROVIDER={other:?}: expected local or remote"))),
        };
        let chunk_size = parse(&vars, "UPLOAD_CHUNK_SIZE", DEFAULT_CHUNK_SIZE)?;
        let mut upload = UploadConfig::with_chunk_size(chunk_size).map_err(|e| Error::Config(e.to_string()))?;
        upload.max_upload_size = parse(&vars, "MAX_UPLOAD_BYTES", DEFAULT_MAX_UPLOAD)?;
        let workers: usize = parse(&vars, "PIPELINE_WORKERS", 2)?;
        if workers == 0 {
            return Err(Error::Config("PIPELINE_WORKERS must be at least 1".into()));
        }
        Ok(Self {
            bind_addr: parse(&vars, "BIND_ADDR", SocketAddr::from(([127, 0, 0, 1], 8080)))?,
            database_url: get("DATABASE_URL").unwrap_or_else(|| "juvenotes.db".into()),
            auth_tokens_file: get("AUTH_TOKENS_FILE").map(PathBuf::from),
            ocr,
            ocr_fixtures_dir: get("OCR_FIXTURES_DIR").map(PathBuf::from).unwrap_or_else(|| "fixtures/layouts".into()),
            synth,
            prompt_path: get("PROMPT_PATH").map(PathBuf::from).unwrap_or_else(|| "prompts/system.txt".into()),
            locale_note: get("LOCALE_NOTE"),
            review_first: flag(&vars, "REVIEW_FIRST")?,
            workers,
            upload,
            vars,
        })
    }

    fn lookup(&self, key: &str) -> Option<String> {
        self.vars.get(key).cloned()
    }

    pub fn open_store(&self) -> Result<Store> {
        Store::open(Location::parse(&self.database_url)?, Arc::new(SystemClock))
    }

    pub fn ocr_provider(&self) -> Result<Arc<dyn OcrProvider>> {
        Ok(match self.ocr {
            OcrChoice::Fixture => Arc::new(FixtureOcrProvider::new(self.ocr_fixtures_dir.clone(), Arc::new(SystemClock))),
            OcrChoice::Remote => Arc::new(RemoteOcrProvider::new(
                RemoteOcrConfig::from_lookup(|k| self.lookup(k))?,
                Arc::new(SystemClock),
            )),
        })
    }

    pub fn synthesis_provider(&self) -> Result<Arc<dyn SynthesisProvider>> {
        Ok(match self.synth {
            SynthChoice::Local => Arc::new(LocalSynthesisProvider),
            SynthChoice::Remote => {
                Arc::new(RemoteSynthesisProvider::new(RemoteLlmConfig::from_lookup(|k| self.lookup(k))?))
            }
        })
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            review_first: self.review_first,
            workers: self.workers,
            prompt_path: Some(self.prompt_path.clone()),
            locale_note: self.locale_note.clone(),
            ..PipelineConfig::default()
        }
    }

    pub fn pipeline(&self, store: Arc<Store>) -> Result<Pipeline> {
        Ok(Pipeline::new(
            store,
            self.ocr_provider()?,
            self.synthesis_provider()?,
            Arc::new(ProgressHub::new()),
            self.pipeline_config(),
        ))
    }
}
