//! Durable job queue that takes an uploaded document through OCR,
//! question generation and insertion.
//!
//! Every state change is committed before the next stage starts, together
//! with the artifact that stage produced, so a job interrupted at any point
//! resumes from its last committed state.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rusqlite::{params, Connection, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::domain::{
    wire_enum, CourseId, DocumentId, JobId, PaperMeta, PastPaperId, QuestionState, SourceSpan,
};
use crate::ocr::{layout_to_text, OcrProvider, OrderedText};
use crate::progress::{ProgressEvent, ProgressHub, Stage};
use crate::store::{course_fingerprints, from_ts, insert_bank_tx, load_course, resolve_concepts, ts, Store};
use crate::synthesis::{
    generate_with_model, merge_windows, validate_and_dedupe, ContextTags, ParseContext, PromptTemplate,
    SynthesisOutput, SynthesisProvider,
};
use crate::{Error, Result};

/// Prompt used when the configured prompt file cannot be read.
pub const DEFAULT_SYSTEM_PROMPT: &str = include_str!("../../../prompts/system.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Ocr,
    Generating,
    Inserting,
    Done,
    Failed,
}

wire_enum!(JobState {
    Queued => "queued",
    Ocr => "ocr",
    Generating => "generating",
    Inserting => "inserting",
    Done => "done",
    Failed => "failed",
});

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    fn stage(self) -> Stage {
        match self {
            JobState::Queued => Stage::Uploading,
            JobState::Ocr => Stage::Ocr,
            JobState::Generating => Stage::Generating,
            JobState::Inserting => Stage::Inserting,
            JobState::Done => Stage::Done,
            JobState::Failed => Stage::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailure {
    pub stage: JobState,
    pub error_code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobResult {
    pub past_paper_id: PastPaperId,
    pub accepted_count: u32,
    pub dropped_count: u32,
    /// Drop reason code → count.
    pub dropped: BTreeMap<String, u32>,
    /// Reasons the generator gave for fragments it could not use.
    pub rejected: Vec<String>,
    /// Accepted questions that were new to the store.
    pub inserted: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineJob {
    pub id: JobId,
    pub document_id: DocumentId,
    pub course_id: CourseId,
    pub paper: PaperMeta,
    pub state: JobState,
    pub attempts: BTreeMap<JobState, u32>,
    pub timestamps: BTreeMap<JobState, DateTime<Utc>>,
    pub failure: Option<JobFailure>,
    pub result: Option<JobResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    #[serde(flatten)]
    pub job: PipelineJob,
    pub log: Vec<ProgressEvent>,
}

/// Where a worker stops as if the process had died there; used to test
/// recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HaltPoint {
    /// Right after the job's move into this state is committed.
    Entered(JobState),
    /// With the question bank written but its transaction not committed.
    BeforeInsertCommit,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Hold generated questions as drafts until a reviewer publishes them.
    pub review_first: bool,
    pub workers: usize,
    pub stage_attempts: u32,
    pub retry_delay: Duration,
    pub prompt_path: Option<PathBuf>,
    pub locale_note: Option<String>,
    /// Re-do failed model windows with the rule-based extractor.
    pub fallback_to_rule_based: bool,
    pub halt_at: Option<HaltPoint>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            review_first: false,
            workers: 2,
            stage_attempts: 3,
            retry_delay: Duration::from_secs(2),
            prompt_path: Some(PathBuf::from("prompts/system.txt")),
            locale_note: None,
            fallback_to_rule_based: true,
            halt_at: None,
        }
    }
}

pub struct Pipeline {
    store: Arc<Store>,
    ocr: Arc<dyn OcrProvider>,
    synthesis: Arc<dyn SynthesisProvider>,
    hub: Arc<ProgressHub>,
    config: PipelineConfig,
    claimed: Mutex<HashSet<JobId>>,
    wake: Condvar,
}

const JOB_COLUMNS: &str =
    "id, document_id, course_id, paper_title, paper_year, state, attempts, timestamps, failure, result";

fn job_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<[Option<String>; 10]> {
    let mut out: [Option<String>; 10] = Default::default();
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = match r.get_ref(i)? {
            rusqlite::types::ValueRef::Null => None,
            rusqlite::types::ValueRef::Integer(n) => Some(n.to_string()),
            v => Some(v.as_str()?.to_string()),
        };
    }
    Ok(out)
}

fn load_job(conn: &Connection, id: &JobId) -> Result<PipelineJob> {
    let row = conn
        .query_row(&format!("SELECT {JOB_COLUMNS} FROM jobs WHERE id = ?1"), [id.as_str()], job_from_row)
        .optional()?
        .ok_or_else(|| Error::UnknownJob(id.to_string()))?;
    let [id, doc, course, title, year, state, attempts, stamps, failure, result] = row;
    let text = |v: Option<String>| v.unwrap_or_default();
    Ok(PipelineJob {
        id: text(id).into(),
        document_id: text(doc).into(),
        course_id: text(course).into(),
        paper: PaperMeta {
            title: text(title),
            year: text(year).parse().map_err(|_| Error::IntegrityViolation("job year is not a number".into()))?,
        },
        state: text(state).parse().map_err(|e: String| Error::IntegrityViolation(e))?,
        attempts: serde_json::from_str(&text(attempts))?,
        timestamps: serde_json::from_str(&text(stamps))?,
        failure: failure.map(|f| serde_json::from_str(&f)).transpose()?,
        result: result.map(|r| serde_json::from_str(&r)).transpose()?,
    })
}

fn save_job(tx: &Transaction<'_>, job: &PipelineJob) -> Result<()> {
    tx.execute(
        "UPDATE jobs SET state = ?2, attempts = ?3, timestamps = ?4, failure = ?5, result = ?6 WHERE id = ?1",
        params![
            job.id.as_str(),
            job.state.as_str(),
            serde_json::to_string(&job.attempts)?,
            serde_json::to_string(&job.timestamps)?,
            job.failure.as_ref().map(serde_json::to_string).transpose()?,
            job.result.as_ref().map(serde_json::to_string).transpose()?,
        ],
    )?;
    Ok(())
}

fn job_log(conn: &Connection, id: &JobId) -> Result<Vec<ProgressEvent>> {
    let mut stmt = conn.prepare("SELECT stage, percent, log, at FROM job_events WHERE job_id = ?1 ORDER BY seq")?;
    let rows = stmt.query_map([id.as_str()], |r| {
        Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?, r.get::<_, String>(2)?, r.get::<_, i64>(3)?))
    })?;
    let mut out = Vec::new();
    for row in rows {
        let (stage, percent, log, at) = row?;
        out.push(ProgressEvent {
            id: id.to_string(),
            stage: stage.parse().map_err(|e: String| Error::IntegrityViolation(e))?,
            percent: percent as u8,
            log,
            at: from_ts(at),
        });
    }
    Ok(out)
}

fn put_artifact(tx: &Transaction<'_>, job: &PipelineJob, kind: &str, body: &str, at: DateTime<Utc>) -> Result<()> {
    tx.execute(
        "INSERT INTO audit_artifacts (document_id, job_id, kind, body, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
        params![job.document_id.as_str(), job.id.as_str(), kind, body, ts(at)],
    )?;
    Ok(())
}

fn latest_artifact(conn: &Connection, job: &JobId, kind: &str) -> Result<String> {
    conn.query_row(
        "SELECT body FROM audit_artifacts WHERE job_id = ?1 AND kind = ?2 ORDER BY id DESC LIMIT 1",
        [job.as_str(), kind],
        |r| r.get(0),
    )
    .optional()?
    .ok_or_else(|| Error::IntegrityViolation(format!("job {job} has no {kind} artifact")))
}

/// Maps byte offsets in the ordered text back to page/paragraph positions.
fn span_of(text: &OrderedText, offsets: Option<[usize; 2]>) -> Option<SourceSpan> {
    let [start, end] = offsets?;
    Some(SourceSpan { start: text.locate(start)?, end: text.locate(end.saturating_sub(1).max(start))? })
}

impl Pipeline {
    pub fn new(
        store: Arc<Store>,
        ocr: Arc<dyn OcrProvider>,
        synthesis: Arc<dyn SynthesisProvider>,
        hub: Arc<ProgressHub>,
        config: PipelineConfig,
    ) -> Self {
        Self { store, ocr, synthesis, hub, config, claimed: Mutex::new(HashSet::new()), wake: Condvar::new() }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn hub(&self) -> &Arc<ProgressHub> {
        &self.hub
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Queues a stored document for processing. Submitting the same
    /// document again creates a separate job.
    pub fn submit_job(&self, document: &DocumentId, course: &CourseId, paper: &PaperMeta) -> Result<JobId> {
        let now = self.store.now();
        if paper.title.trim().is_empty() {
            return Err(Error::InvalidRequest("paper title is empty".into()));
        }
        if !paper.year_is_valid(chrono::Datelike::year(&now)) {
            return Err(Error::InvalidRequest(format!("paper year {} is out of range", paper.year)));
        }
        let job = PipelineJob {
            id: JobId::new(),
            document_id: document.clone(),
            course_id: course.clone(),
            paper: paper.clone(),
            state: JobState::Queued,
            attempts: BTreeMap::new(),
            timestamps: BTreeMap::from([(JobState::Queued, now)]),
            failure: None,
            result: None,
        };
        let filename = self.store.write(|tx| {
            let filename: String = tx
                .query_row("SELECT filename FROM documents WHERE id = ?1", [document.as_str()], |r| r.get(0))
                .optional()?
                .ok_or_else(|| Error::UnknownDocument(document.to_string()))?;
            load_course(tx, course)?;
            tx.execute(
                &format!(
                    "INSERT INTO jobs ({JOB_COLUMNS}, seq)
                     VALUES (?1, ?2, ?3, ?4, ?5, 'queued', '{{}}', ?6, NULL, NULL,
                             (SELECT coalesce(max(seq), 0) + 1 FROM jobs))"
                ),
                params![
                    job.id.as_str(),
                    document.as_str(),
                    course.as_str(),
                    paper.title,
                    paper.year,
                    serde_json::to_string(&job.timestamps)?,
                ],
            )?;
            Ok(filename)
        })?;
        self.emit(&job.id, Stage::Uploading, 100, format!("{filename} queued as job {}", job.id))?;
        self.wake.notify_all();
        Ok(job.id)
    }

    pub fn job(&self, id: &JobId) -> Result<PipelineJob> {
        self.store.read(|c| load_job(c, id))
    }

    pub fn job_status(&self, id: &JobId) -> Result<JobStatus> {
        self.store.read(|c| Ok(JobStatus { job: load_job(c, id)?, log: job_log(c, id)? }))
    }

    /// Jobs not yet done or failed, oldest first.
    pub fn pending_jobs(&self) -> Result<Vec<JobId>> {
        self.store.read(|c| {
            let ids: Vec<String> = c
                .prepare("SELECT id FROM jobs WHERE state NOT IN ('done', 'failed') ORDER BY seq")?
                .query_map([], |r| r.get(0))?
                .collect::<rusqlite::Result<_>>()?;
            Ok(ids.into_iter().map(JobId::from).collect())
        })
    }

    /// The job's log so far followed by its live events.
    pub fn watch(&self, id: &JobId) -> Result<JobWatch> {
        let rx = self.hub.subscribe(id.as_str());
        let backlog = self.job_status(id)?.log;
        Ok(JobWatch { seen: backlog.clone(), backlog: backlog.into(), rx, finished: false })
    }

    /// Polls until the job is done or failed.
    pub fn wait_for(&self, id: &JobId, timeout: Duration) -> Result<PipelineJob> {
        let deadline = Instant::now() + timeout;
        loop {
            let job = self.job(id)?;
            if job.state.is_terminal() || Instant::now() >= deadline {
                return Ok(job);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Runs a job to a terminal state on the calling thread. Stage errors
    /// end up in the job's failure record; only storage errors are
    /// returned. A configured halt point returns the state reached.
    pub fn run_job(&self, id: &JobId) -> Result<JobState> {
        if !self.claimed.lock().unwrap().insert(id.clone()) {
            return Err(Error::BadState(format!("job {id} is already running")));
        }
        let out = self.drive(id);
        self.claimed.lock().unwrap().remove(id);
        out
    }

    fn halts_at(&self, point: HaltPoint) -> bool {
        self.config.halt_at == Some(point)
    }

    fn drive(&self, id: &JobId) -> Result<JobState> {
        let mut job = self.job(id)?;
        loop {
            if job.state.is_terminal() || self.halts_at(HaltPoint::Entered(job.state)) {
                return Ok(job.state);
            }
            let step = match job.state {
                JobState::Queued => self.advance(&mut job, JobState::Ocr, |_, _| Ok(())),
                JobState::Ocr => self.run_ocr(&mut job),
                JobState::Generating => self.run_generation(&mut job),
                JobState::Inserting => match self.run_insert(&mut job) {
                    Ok(false) => return Ok(job.state),
                    other => other.map(|_| ()),
                },
                JobState::Done | JobState::Failed => unreachable!(),
            };
            match step {
                Ok(()) => {}
                Err(e @ (Error::Storage(_) | Error::Io(_))) => return Err(e),
                Err(e) => self.fail(&mut job, e)?,
            }
        }
    }

    /// Commits the move to `to` together with whatever `extra` writes.
    fn advance(
        &self,
        job: &mut PipelineJob,
        to: JobState,
        extra: impl FnOnce(&Transaction<'_>, &PipelineJob) -> Result<()>,
    ) -> Result<()> {
        let now = self.store.now();
        let mut next = job.clone();
        next.state = to;
        next.timestamps.insert(to, now);
        self.store.write(|tx| {
            extra(tx, &next)?;
            save_job(tx, &next)
        })?;
        *job = next;
        if !to.is_terminal() {
            self.emit(&job.id, to.stage(), 0, format!("{to} started"))?;
        }
        Ok(())
    }

    fn fail(&self, job: &mut PipelineJob, err: Error) -> Result<()> {
        let stage = job.state;
        tracing::warn!(job = %job.id, %stage, error = %err, "job failed");
        let failure = JobFailure { stage, error_code: err.code().to_string(), message: err.to_string() };
        let log = format!("{stage} failed: {}: {}", failure.error_code, failure.message);
        job.failure = Some(failure);
        self.advance(job, JobState::Failed, |_, _| Ok(()))?;
        self.emit(&job.id, Stage::Failed, 100, log)?;
        Ok(())
    }

    /// Calls `f` up to the configured number of attempts while it fails
    /// with a retryable error, counting attempts on the job.
    fn attempt<T>(&self, job: &mut PipelineJob, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let stage = job.state;
        let mut tries = 0;
        loop {
            tries += 1;
            *job.attempts.entry(stage).or_insert(0) += 1;
            self.store.write(|tx| save_job(tx, job))?;
            match f() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && tries < self.config.stage_attempts => {
                    self.emit(&job.id, stage.stage(), 0, format!("attempt {tries} failed ({}), retrying", e.code()))?;
                    std::thread::sleep(self.config.retry_delay);
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn run_ocr(&self, job: &mut PipelineJob) -> Result<()> {
        let (record, bytes) = self.store.document(&job.document_id)?;
        let analysis = self.attempt(job, || self.ocr.analyze(&bytes, &record.content_type))?;
        let ordered = layout_to_text(&analysis.layout);
        self.emit(
            &job.id,
            Stage::Ocr,
            100,
            format!(
                "{} read {} pages, {} paragraphs, {} characters",
                self.ocr.name(),
                analysis.layout.pages.len(),
                analysis.layout.paragraph_count(),
                ordered.text.chars().count()
            ),
        )?;
        let at = self.store.now();
        self.advance(job, JobState::Generating, |tx, j| {
            put_artifact(tx, j, "ocr-response", &analysis.raw_payload, at)?;
            put_artifact(tx, j, "ordered-text", &serde_json::to_string(&ordered)?, at)
        })
    }

    fn system_prompt(&self) -> String {
        self.config
            .prompt_path
            .as_ref()
            .and_then(|p| std::fs::read_to_string(p).ok())
            .filter(|s| !s.trim().is_empty())
            .unwrap_or_else(|| DEFAULT_SYSTEM_PROMPT.to_string())
    }

    fn context(&self, course: &CourseId) -> Result<ContextTags> {
        self.store.read(|c| {
            let course = load_course(c, course)?;
            let institution: Option<String> = c
                .query_row(
                    "SELECT i.name FROM institutions i JOIN institution_courses ic ON ic.institution_id = i.id
                     WHERE ic.course_id = ?1 ORDER BY i.name LIMIT 1",
                    [course.id.as_str()],
                    |r| r.get(0),
                )
                .optional()?;
            Ok(ContextTags { institution, course_code: course.code, locale_note: self.config.locale_note.clone() })
        })
    }

    fn run_generation(&self, job: &mut PipelineJob) -> Result<()> {
        let ordered: OrderedText =
            serde_json::from_str(&self.store.read(|c| latest_artifact(c, &job.id, "ordered-text"))?)?;
        let template = PromptTemplate { system_instructions: self.system_prompt(), context: self.context(&job.course_id)? };
        let ctx = ParseContext {
            provider_name: self.synthesis.name().to_string(),
            model_version: String::new(),
            generator: self.synthesis.generator(),
            document_id: Some(job.document_id.clone()),
            created_at: self.store.now(),
            latency_ms: 0,
        };
        let windows = if ordered.text.trim().is_empty() {
            Vec::new()
        } else {
            self.attempt(job, || {
                generate_with_model(&*self.synthesis, &ordered.text, &template, &ctx, self.config.fallback_to_rule_based)
            })?
        };
        let mut merged = merge_windows(&windows);
        if merged.provider_name.is_empty() {
            merged.provider_name = self.synthesis.name().to_string();
        }
        for d in &mut merged.drafts {
            if d.source_span.is_none() {
                d.source_span = span_of(&ordered, d.source_offsets);
            }
        }
        let fell_back = windows.iter().filter(|w| w.fell_back.is_some()).count();
        let mut log = format!(
            "{} produced {} drafts and {} rejected fragments from {} windows",
            merged.provider_name,
            merged.drafts.len(),
            merged.rejected.len(),
            windows.len()
        );
        if fell_back > 0 {
            log.push_str(&format!("; {fell_back} windows used the rule-based fallback"));
        }
        self.emit(&job.id, Stage::Generating, 100, log)?;
        let raw: Vec<serde_json::Value> = windows
            .iter()
            .map(|w| {
                serde_json::json!({
                    "window_index": w.window_index,
                    "fell_back": w.fell_back,
                    "model_version": w.raw.as_ref().map(|r| r.model_version.clone()),
                    "text": w.raw.as_ref().map(|r| r.text.clone()),
                })
            })
            .collect();
        let at = self.store.now();
        self.advance(job, JobState::Inserting, |tx, j| {
            put_artifact(tx, j, "model-output", &serde_json::to_string(&raw)?, at)?;
            put_artifact(tx, j, "drafts", &serde_json::to_string(&merged)?, at)
        })
    }

    /// Returns false when halted before commit.
    fn run_insert(&self, job: &mut PipelineJob) -> Result<bool> {
        let synth: SynthesisOutput = serde_json::from_str(&self.store.read(|c| latest_artifact(c, &job.id, "drafts"))?)?;
        let state = if self.config.review_first { QuestionState::Draft } else { QuestionState::Published };
        let now = self.store.now();
        let halt = self.halts_at(HaltPoint::BeforeInsertCommit);
        let mut next = job.clone();
        let outcome = self.store.write(|tx| {
            let course = load_course(tx, &job.course_id)?;
            let mut drafts = synth.drafts.clone();
            for d in &mut drafts {
                d.concept_ids = resolve_concepts(tx, &course, &d.concept_names)?;
                d.provenance.source_document_id = Some(job.document_id.clone());
            }
            let existing = course_fingerprints(tx, &course.id)?;
            let deduped = validate_and_dedupe(drafts, &existing);
            let bank = insert_bank_tx(tx, &deduped.accepted, &course.id, &job.paper, Some(&job.document_id), state, now)?;
            let dropped: BTreeMap<String, u32> =
                deduped.drop_counts().into_iter().map(|(k, v)| (k.to_string(), v as u32)).collect();
            next.result = Some(JobResult {
                past_paper_id: bank.past_paper_id,
                accepted_count: deduped.accepted.len() as u32,
                dropped_count: deduped.dropped.len() as u32,
                dropped,
                rejected: synth.rejected.iter().map(|r| r.reason.clone()).collect(),
                inserted: bank.inserted as u32,
            });
            next.state = JobState::Done;
            next.timestamps.insert(JobState::Done, now);
            put_artifact(tx, &next, "dropped", &serde_json::to_string(&deduped.dropped)?, now)?;
            save_job(tx, &next)?;
            if halt {
                return Err(Error::BadState("halted before commit".into()));
            }
            Ok(())
        });
        match outcome {
            Err(_) if halt => return Ok(false),
            other => other?,
        }
        *job = next;
        let result = job.result.as_ref().expect("set above");
        self.emit(
            &job.id,
            Stage::Inserting,
            100,
            format!("{} accepted ({} new), {} dropped", result.accepted_count, result.inserted, result.dropped_count),
        )?;
        let ready = if self.config.review_first { "awaiting review" } else { "published" };
        self.emit(&job.id, Stage::Done, 100, format!("{} questions {ready}", result.accepted_count))?;
        self.wake.notify_all();
        Ok(true)
    }

    /// Appends an event to the job's persisted log and broadcasts it.
    /// Percent never drops within a stage, even across restarts.
    fn emit(&self, id: &JobId, stage: Stage, percent: u8, log: String) -> Result<()> {
        let now = self.store.now();
        let event = self.store.write(|tx| {
            let last: Option<(i64, String, i64)> = tx
                .query_row(
                    "SELECT seq, stage, percent FROM job_events WHERE job_id = ?1 ORDER BY seq DESC LIMIT 1",
                    [id.as_str()],
                    |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
                )
                .optional()?;
            let mut percent = percent.min(100);
            let mut seq = 1;
            if let Some((last_seq, last_stage, last_percent)) = last {
                if matches!(last_stage.as_str(), "done" | "failed") {
                    return Ok(None);
                }
                if last_stage == stage.as_str() {
                    percent = percent.max(last_percent as u8);
                }
                seq = last_seq + 1;
            }
            tx.execute(
                "INSERT INTO job_events (job_id, seq, stage, percent, log, at) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![id.as_str(), seq, stage.as_str(), percent, log, ts(now)],
            )?;
            Ok(Some(ProgressEvent { id: id.to_string(), stage, percent, log: log.clone(), at: now }))
        })?;
        if let Some(event) = event {
            tracing::info!(job = %id, stage = %event.stage, percent = event.percent, "{}", event.log);
            self.hub.publish(event);
            if stage.is_terminal() {
                self.hub.forget(id.as_str());
            }
        }
        Ok(())
    }

    fn claim_next(&self) -> Result<Option<JobId>> {
        let pending = self.pending_jobs()?;
        let mut claimed = self.claimed.lock().unwrap();
        Ok(pending.into_iter().find(|id| claimed.insert(id.clone())))
    }

    /// Starts the worker pool. Jobs left unfinished by an earlier process
    /// are picked up first.
    pub fn start_workers(self: &Arc<Self>) -> Workers {
        let stop = Arc::new(AtomicBool::new(false));
        let handles = (0..self.config.workers.max(1))
            .map(|n| {
                let pipeline = Arc::clone(self);
                let stop = Arc::clone(&stop);
                std::thread::Builder::new()
                    .name(format!("pipeline-worker-{n}"))
                    .spawn(move || pipeline.work(&stop))
                    .expect("spawn pipeline worker")
            })
            .collect();
        Workers { pipeline: Arc::clone(self), stop, handles }
    }

    fn work(&self, stop: &AtomicBool) {
        while !stop.load(Ordering::SeqCst) {
            match self.claim_next() {
                Ok(Some(id)) => {
                    if let Err(e) = self.drive(&id) {
                        tracing::error!(job = %id, error = %e, "job aborted by a storage error");
                    }
                    self.claimed.lock().unwrap().remove(&id);
                    if self.config.halt_at.is_some() {
                        // a halted job stays pending; do not spin on it
                        let guard = self.claimed.lock().unwrap();
                        let _ = self.wake.wait_timeout(guard, Duration::from_millis(200));
                    }
                }
                Ok(None) => {
                    let guard = self.claimed.lock().unwrap();
                    let _ = self.wake.wait_timeout(guard, Duration::from_millis(200));
                }
                Err(e) => {
                    tracing::error!(error = %e, "cannot read the job queue");
                    std::thread::sleep(Duration::from_millis(500));
                }
            }
        }
    }
}

/// Handle to running workers; dropping it stops them after their current
/// job.
pub struct Workers {
    pipeline: Arc<Pipeline>,
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl Workers {
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.pipeline.wake.notify_all();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Workers {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Replays a job's recorded events, then follows live ones until the job
/// reaches a terminal stage.
pub struct JobWatch {
    backlog: VecDeque<ProgressEvent>,
    seen: Vec<ProgressEvent>,
    rx: broadcast::Receiver<ProgressEvent>,
    finished: bool,
}

impl JobWatch {
    pub async fn next(&mut self) -> Option<ProgressEvent> {
        if self.finished {
            return None;
        }
        let event = match self.backlog.pop_front() {
            Some(e) => e,
            None => loop {
                match self.rx.recv().await {
                    Ok(e) if self.seen.contains(&e) => continue,
                    Ok(e) => break e,
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            },
        };
        self.finished = event.stage.is_terminal();
        Some(event)
    }
}
