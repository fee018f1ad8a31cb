//! Resumable chunked uploads. Sessions live in memory: a client that loses
//! its session (idle expiry or server restart) starts a new one.

pub mod protocol;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{wire_enum, CourseId, JobId, PaperMeta, SessionId};
use crate::ocr::{content_type_for, ACCEPTED_CONTENT_TYPES};
use crate::pipeline::Pipeline;
use crate::progress::{ProgressEvent, Stage};
use crate::store::DocumentRecord;
use crate::{Error, Result};

pub const DEFAULT_CHUNK_SIZE: u64 = 256 * 1024;
pub const MIN_CHUNK_SIZE: u64 = 64 * 1024;
pub const MAX_CHUNK_SIZE: u64 = 1024 * 1024;
pub const DEFAULT_MAX_UPLOAD: u64 = 50 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UploadConfig {
    pub chunk_size: u64,
    pub max_upload_size: u64,
    pub idle_timeout: Duration,
}

impl Default for UploadConfig {
    fn default() -> Self {
        Self { chunk_size: DEFAULT_CHUNK_SIZE, max_upload_size: DEFAULT_MAX_UPLOAD, idle_timeout: Duration::hours(24) }
    }
}

impl UploadConfig {
    pub fn with_chunk_size(chunk_size: u64) -> Result<Self> {
        if !(MIN_CHUNK_SIZE..=MAX_CHUNK_SIZE).contains(&chunk_size) {
            return Err(Error::BadChunkSize(chunk_size));
        }
        Ok(Self { chunk_size, ..Self::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadMeta {
    pub filename: String,
    pub size: u64,
    pub sha256: String,
    pub course_id: CourseId,
    pub paper: PaperMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Open,
    Complete,
    Aborted,
    Expired,
}

wire_enum!(SessionState { Open => "open", Complete => "complete", Aborted => "aborted", Expired => "expired" });

/// Snapshot of a session as reported to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadSession {
    pub session_id: SessionId,
    pub filename: String,
    pub declared_size: u64,
    pub declared_hash: String,
    pub chunk_size: u64,
    pub total_chunks: u64,
    pub received: Vec<bool>,
    pub state: SessionState,
    pub created_at: DateTime<Utc>,
}

impl UploadSession {
    pub fn received_count(&self) -> u64 {
        self.received.iter().filter(|r| **r).count() as u64
    }

    pub fn missing(&self) -> Vec<u64> {
        (0..self.total_chunks).filter(|i| !self.received[*i as usize]).collect()
    }

    pub fn percent(&self) -> u8 {
        (100 * self.received_count() / self.total_chunks.max(1)) as u8
    }

    /// Expected length of chunk `index`; the last one may be short.
    pub fn chunk_len(&self, index: u64) -> u64 {
        if index + 1 == self.total_chunks {
            self.declared_size - self.chunk_size * index
        } else {
            self.chunk_size
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkAck {
    Accepted,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkReceipt {
    pub ack: ChunkAck,
    pub received: u64,
    pub total: u64,
    /// Emitted only when the chunk was new.
    pub progress: Option<ProgressEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletedUpload {
    pub document: DocumentRecord,
    pub job_id: JobId,
}

struct Session {
    info: UploadSession,
    course_id: CourseId,
    paper: PaperMeta,
    chunks: Vec<Option<Vec<u8>>>,
    last_activity: DateTime<Utc>,
    completed: Option<CompletedUpload>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub struct UploadManager {
    pipeline: Arc<Pipeline>,
    config: UploadConfig,
    sessions: Mutex<HashMap<SessionId, Arc<Mutex<Session>>>>,
}

impl UploadManager {
    pub fn new(pipeline: Arc<Pipeline>, config: UploadConfig) -> Self {
        Self { pipeline, config, sessions: Mutex::new(HashMap::new()) }
    }

    pub fn config(&self) -> &UploadConfig {
        &self.config
    }

    pub fn pipeline(&self) -> &Arc<Pipeline> {
        &self.pipeline
    }

    fn now(&self) -> DateTime<Utc> {
        self.pipeline.store().now()
    }

    pub fn init(&self, meta: &UploadMeta) -> Result<UploadSession> {
        if meta.size == 0 {
            return Err(Error::EmptyDocument);
        }
        if meta.size > self.config.max_upload_size {
            return Err(Error::TooLarge { size: meta.size, max: self.config.max_upload_size });
        }
        if meta.filename.trim().is_empty() {
            return Err(Error::InvalidRequest("filename is empty".into()));
        }
        let content_type = content_type_for(&meta.filename);
        if !ACCEPTED_CONTENT_TYPES.contains(&content_type) {
            return Err(Error::UnsupportedFormat(content_type.to_string()));
        }
        if !is_sha256_hex(&meta.sha256) {
            return Err(Error::InvalidRequest("sha256 must be 64 lowercase hex digits".into()));
        }
        if meta.paper.title.trim().is_empty() {
            return Err(Error::InvalidRequest("paper title is empty".into()));
        }
        self.pipeline.store().course(&meta.course_id)?;
        self.purge_expired();

        let now = self.now();
        let total = meta.size.div_ceil(self.config.chunk_size);
        let info = UploadSession {
            session_id: SessionId::new(),
            filename: meta.filename.clone(),
            declared_size: meta.size,
            declared_hash: meta.sha256.clone(),
            chunk_size: self.config.chunk_size,
            total_chunks: total,
            received: vec![false; total as usize],
            state: SessionState::Open,
            created_at: now,
        };
        let session = Session {
            info: info.clone(),
            course_id: meta.course_id.clone(),
            paper: meta.paper.clone(),
            chunks: vec![None; total as usize],
            last_activity: now,
            completed: None,
        };
        self.sessions.lock().unwrap().insert(info.session_id.clone(), Arc::new(Mutex::new(session)));
        tracing::info!(session = %info.session_id, size = meta.size, chunks = total, "upload opened");
        Ok(info)
    }

    fn session(&self, id: &SessionId) -> Result<Arc<Mutex<Session>>> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    /// Marks the session expired when idle too long; fails unless open.
    fn check_open(&self, s: &mut Session, now: DateTime<Utc>) -> Result<()> {
        if s.info.state == SessionState::Open && now - s.last_activity > self.config.idle_timeout {
            s.info.state = SessionState::Expired;
            s.chunks.clear();
        }
        match s.info.state {
            SessionState::Open => Ok(()),
            SessionState::Expired => Err(Error::SessionExpired(s.info.session_id.to_string())),
            SessionState::Complete | SessionState::Aborted => Err(Error::SessionClosed(s.info.session_id.to_string())),
        }
    }

    pub fn append_chunk(&self, id: &SessionId, index: i64, payload: &[u8], chunk_hash: &str) -> Result<ChunkReceipt> {
        let session = self.session(id)?;
        let mut s = session.lock().unwrap();
        let now = self.now();
        self.check_open(&mut s, now)?;
        let total = s.info.total_chunks;
        let idx = u64::try_from(index).ok().filter(|i| *i < total).ok_or(Error::BadIndex { index, total })?;
        let expected = s.info.chunk_len(idx);
        if payload.len() as u64 != expected {
            return Err(Error::BadLength { index: idx, expected, got: payload.len() as u64 });
        }
        if sha256_hex(payload) != chunk_hash.to_ascii_lowercase() {
            return Err(Error::ChunkCorrupt(idx));
        }
        s.last_activity = now;
        if s.info.received[idx as usize] {
            return Ok(ChunkReceipt { ack: ChunkAck::Duplicate, received: s.info.received_count(), total, progress: None });
        }
        s.info.received[idx as usize] = true;
        s.chunks[idx as usize] = Some(payload.to_vec());
        let received = s.info.received_count();
        let event = ProgressEvent {
            id: id.to_string(),
            stage: Stage::Uploading,
            percent: s.info.percent(),
            log: format!("received chunk {idx} ({received}/{total})"),
            at: now,
        };
        // published under the session lock so events leave in order
        let progress = self.pipeline.hub().publish(event);
        Ok(ChunkReceipt { ack: ChunkAck::Accepted, received, total, progress })
    }

    /// Indices still missing, ascending.
    pub fn resume(&self, id: &SessionId) -> Result<UploadSession> {
        let session = self.session(id)?;
        let mut s = session.lock().unwrap();
        let now = self.now();
        self.check_open(&mut s, now)?;
        s.last_activity = now;
        Ok(s.info.clone())
    }

    pub fn status(&self, id: &SessionId) -> Result<UploadSession> {
        Ok(self.session(id)?.lock().unwrap().info.clone())
    }

    /// Assembles the chunks, stores the document and queues a job for it.
    /// Completing an already completed session returns the same result.
    pub fn complete(&self, id: &SessionId) -> Result<CompletedUpload> {
        let session = self.session(id)?;
        let mut s = session.lock().unwrap();
        if let Some(done) = &s.completed {
            return Ok(done.clone());
        }
        let now = self.now();
        self.check_open(&mut s, now)?;
        let missing = s.info.total_chunks - s.info.received_count();
        if missing > 0 {
            return Err(Error::Incomplete { missing });
        }
        let mut bytes = Vec::with_capacity(s.info.declared_size as usize);
        for chunk in &s.chunks {
            bytes.extend_from_slice(chunk.as_deref().expect("bitmap is full"));
        }
        if sha256_hex(&bytes) != s.info.declared_hash {
            s.info.state = SessionState::Aborted;
            s.chunks.clear();
            return Err(Error::ContentCorrupt);
        }
        let store = self.pipeline.store();
        let document = store.put_document(&s.info.filename, content_type_for(&s.info.filename), &bytes)?;
        let job_id = self.pipeline.submit_job(&document.id, &s.course_id, &s.paper)?;
        self.pipeline.hub().publish(ProgressEvent {
            id: id.to_string(),
            stage: Stage::Done,
            percent: 100,
            log: format!("upload complete; job {job_id} queued"),
            at: now,
        });
        self.pipeline.hub().forget(id.as_str());
        s.info.state = SessionState::Complete;
        s.chunks.clear();
        let done = CompletedUpload { document, job_id };
        s.completed = Some(done.clone());
        Ok(done)
    }

    /// Forgets sessions idle past the timeout and finished ones past twice
    /// the timeout.
    pub fn purge_expired(&self) -> usize {
        let now = self.now();
        let idle = self.config.idle_timeout;
        let mut sessions = self.sessions.lock().unwrap();
        let before = sessions.len();
        sessions.retain(|_, s| {
            let s = s.lock().unwrap();
            let age = now - s.last_activity;
            match s.info.state {
                SessionState::Open => age <= idle,
                _ => age <= idle * 2,
            }
        });
        before - sessions.len()
    }
}
