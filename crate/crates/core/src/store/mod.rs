//! Relational persistence for the whole engine.
//!
//! One embedded SQLite database holds catalog data, question banks,
//! engagement records, jobs, audit artifacts and the sync change log.
//! Callers get a connection through [`Store::read`] or a transaction
//! through [`Store::write`]; each module owns the SQL for its tables.

mod catalog;
mod integrity;
mod interchange;
mod questions;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use rusqlite::{Connection, ErrorCode, Transaction, TransactionBehavior};

use crate::clock::{from_millis, to_millis, Clock};
use crate::{Error, Result};

pub use catalog::{DocumentRecord, SeedCounts, SeedFile};
pub use integrity::{check_integrity, IntegrityProblem};
pub use interchange::{
    ImportSummary, InterchangeChoice, InterchangeDocument, InterchangePart, InterchangeQuestion, BANK_VERSION,
};
pub use questions::{BankInsert, Page, QuestionFilter, DEFAULT_PAGE_SIZE, MAX_PAGE_SIZE};

pub(crate) use catalog::{load_course, load_user, resolve_concepts};
pub(crate) use questions::{course_fingerprints, insert_bank_tx, load_question, set_question_state};

const SCHEMA: &str = include_str!("schema.sql");

/// Where the database lives, parsed from DATABASE_URL or a CLI flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Memory,
    File(PathBuf),
}

impl Location {
    /// Accepts `:memory:`, `sqlite::memory:`, `sqlite://<path>`,
    /// `sqlite:<path>` or a bare file path. Server URLs for other engines
    /// are refused: only the embedded backend is built in.
    pub fn parse(url: &str) -> Result<Self> {
        let url = url.trim();
        if url.is_empty() {
            return Err(Error::Config("empty database location".into()));
        }
        if url == ":memory:" || url == "sqlite::memory:" {
            return Ok(Location::Memory);
        }
        if let Some(path) = url.strip_prefix("sqlite://").or_else(|| url.strip_prefix("sqlite:")) {
            return Ok(Location::File(PathBuf::from(path)));
        }
        if let Some((scheme, _)) = url.split_once("://") {
            return Err(Error::Config(format!("unsupported database backend {scheme:?}; use a file path or sqlite:// URL")));
        }
        Ok(Location::File(PathBuf::from(url)))
    }
}

pub struct Store {
    conn: Mutex<Connection>,
    clock: Arc<dyn Clock>,
    location: Location,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("location", &self.location).finish()
    }
}

impl Store {
    pub fn open(location: Location, clock: Arc<dyn Clock>) -> Result<Self> {
        let conn = match &location {
            Location::Memory => Connection::open_in_memory()?,
            Location::File(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                let conn = Connection::open(path)?;
                conn.pragma_update(None, "journal_mode", "WAL")?;
                conn
            }
        };
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn: Mutex::new(conn), clock, location })
    }

    pub fn open_path(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self> {
        Self::open(Location::File(path.as_ref().to_path_buf()), clock)
    }

    pub fn in_memory(clock: Arc<dyn Clock>) -> Result<Self> {
        Self::open(Location::Memory, clock)
    }

    pub fn location(&self) -> &Location {
        &self.location
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn lock(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn read<T>(&self, f: impl FnOnce(&Connection) -> Result<T>) -> Result<T> {
        let conn = self.lock();
        f(&conn).map_err(classify)
    }

    /// Runs `f` in one transaction: committed if it returns `Ok`, rolled
    /// back otherwise.
    pub fn write<T>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T>) -> Result<T> {
        let mut conn = self.lock();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        match f(&tx) {
            Ok(value) => {
                tx.commit().map_err(|e| classify(e.into()))?;
                Ok(value)
            }
            Err(e) => Err(classify(e)),
        }
    }
}

/// Constraint failures surface as integrity violations; other storage
/// errors pass through.
fn classify(err: Error) -> Error {
    match err {
        Error::Storage(rusqlite::Error::SqliteFailure(e, msg)) if e.code == ErrorCode::ConstraintViolation => {
            Error::IntegrityViolation(msg.unwrap_or_else(|| e.to_string()))
        }
        other => other,
    }
}

pub(crate) fn ts(t: DateTime<Utc>) -> i64 {
    to_millis(t)
}

pub(crate) fn from_ts(ms: i64) -> DateTime<Utc> {
    from_millis(ms)
}

/// Appends to the sync change log; the returned sequence number is the
/// cursor that covers this mutation.
pub(crate) fn record_change(tx: &Transaction<'_>, question_id: &str, change: Change, at: DateTime<Utc>) -> Result<i64> {
    tx.execute(
        "INSERT INTO change_log (question_id, change, at) VALUES (?1, ?2, ?3)",
        rusqlite::params![question_id, change.as_str(), ts(at)],
    )?;
    Ok(tx.last_insert_rowid())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Change {
    Upsert,
    Retire,
}

impl Change {
    fn as_str(self) -> &'static str {
        match self {
            Change::Upsert => "upsert",
            Change::Retire => "retire",
        }
    }
}

pub(crate) fn meta_get(conn: &Connection, key: &str) -> Result<Option<String>> {
    use rusqlite::OptionalExtension;
    Ok(conn
        .query_row("SELECT value FROM meta WHERE key = ?1", [key], |r| r.get(0))
        .optional()?)
}

pub(crate) fn meta_set(tx: &Transaction<'_>, key: &str, value: &str) -> Result<()> {
    tx.execute(
        "INSERT INTO meta (key, value) VALUES (?1, ?2) ON CONFLICT (key) DO UPDATE SET value = excluded.value",
        [key, value],
    )?;
    Ok(())
}
