//! JSON messages of the upload channel and a transport-independent
//! connection handler. The server feeds it frames and sends back whatever
//! it returns.

use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ChunkAck, UploadManager, UploadMeta};
use crate::domain::{CourseId, DocumentId, JobId, PaperMeta, PastPaperId, SessionId};
use crate::pipeline::{JobState, PipelineJob};
use crate::progress::{ProgressEvent, Stage};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ClientMessage {
    #[serde(rename = "upload.init")]
    Init { filename: String, size: u64, sha256: String, course_id: CourseId, paper: PaperMeta },
    #[serde(rename = "upload.chunk")]
    Chunk {
        session_id: SessionId,
        index: i64,
        sha256: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<String>,
    },
    #[serde(rename = "upload.resume")]
    Resume { session_id: SessionId },
    #[serde(rename = "upload.complete")]
    Complete { session_id: SessionId },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    /// Type of the client message being acknowledged.
    pub of: String,
    pub session_id: SessionId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_chunks: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<ChunkAck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub document_id: Option<DocumentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<JobId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Ack(Ack),
    Progress { id: String, stage: Stage, percent: u8, log: String, ts: chrono::DateTime<chrono::Utc> },
    Error {
        code: String,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session_id: Option<SessionId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        index: Option<i64>,
    },
    Result { job_id: JobId, paper_id: PastPaperId, question_count: u32 },
}

impl ServerMessage {
    pub fn error(err: &Error) -> Self {
        ServerMessage::Error { code: err.code().to_string(), message: err.to_string(), session_id: None, index: None }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

impl From<&ProgressEvent> for ServerMessage {
    fn from(e: &ProgressEvent) -> Self {
        ServerMessage::Progress { id: e.id.clone(), stage: e.stage, percent: e.percent, log: e.log.clone(), ts: e.at }
    }
}

/// The closing message for a finished job: a result when it is done, an
/// error carrying the failure code when it failed.
pub fn job_outcome(job: &PipelineJob) -> Option<ServerMessage> {
    match job.state {
        JobState::Done => {
            let result = job.result.as_ref()?;
            Some(ServerMessage::Result {
                job_id: job.id.clone(),
                paper_id: result.past_paper_id.clone(),
                question_count: result.accepted_count,
            })
        }
        JobState::Failed => {
            let failure = job.failure.as_ref()?;
            Some(ServerMessage::Error {
                code: failure.error_code.clone(),
                message: format!("job {} failed during {}: {}", job.id, failure.stage, failure.message),
                session_id: None,
                index: None,
            })
        }
        _ => None,
    }
}

/// What to send back for one incoming frame.
#[derive(Debug, Default, PartialEq)]
pub struct Reply {
    pub messages: Vec<ServerMessage>,
    /// Set once an upload completes: the caller should stream this job's
    /// progress followed by [`job_outcome`].
    pub watch_job: Option<JobId>,
}

impl Reply {
    fn one(message: ServerMessage) -> Self {
        Reply { messages: vec![message], watch_job: None }
    }
}

struct PendingChunk {
    session_id: SessionId,
    index: i64,
    sha256: String,
}

/// Per-connection protocol state. With `binary` set a chunk message may
/// omit `data` and be followed by a binary frame: 4-byte big-endian index
/// then the payload.
pub struct UploadConnection {
    manager: Arc<UploadManager>,
    binary: bool,
    pending: Option<PendingChunk>,
}

fn located(err: Error, session_id: &SessionId, index: Option<i64>) -> ServerMessage {
    ServerMessage::Error {
        code: err.code().to_string(),
        message: err.to_string(),
        session_id: Some(session_id.clone()),
        index,
    }
}

impl UploadConnection {
    pub fn new(manager: Arc<UploadManager>, binary: bool) -> Self {
        Self { manager, binary, pending: None }
    }

    pub fn binary(&self) -> bool {
        self.binary
    }

    pub fn on_text(&mut self, text: &str) -> Reply {
        let message: ClientMessage = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => return Reply::one(ServerMessage::error(&Error::InvalidRequest(format!("malformed message: {e}")))),
        };
        match message {
            ClientMessage::Init { filename, size, sha256, course_id, paper } => {
                let meta = UploadMeta { filename, size, sha256, course_id, paper };
                match self.manager.init(&meta) {
                    Ok(s) => Reply::one(ServerMessage::Ack(Ack {
                        of: "upload.init".into(),
                        chunk_size: Some(s.chunk_size),
                        total_chunks: Some(s.total_chunks),
                        missing: Some(s.missing()),
                        session_id: s.session_id,
                        ..Default::default()
                    })),
                    Err(e) => Reply::one(ServerMessage::error(&e)),
                }
            }
            ClientMessage::Chunk { session_id, index, sha256, data: Some(data) } => {
                match base64::engine::general_purpose::STANDARD.decode(data.as_bytes()) {
                    Ok(payload) => self.append(&session_id, index, &payload, &sha256),
                    Err(e) => Reply::one(located(
                        Error::InvalidRequest(format!("chunk data is not base64: {e}")),
                        &session_id,
                        Some(index),
                    )),
                }
            }
            ClientMessage::Chunk { session_id, index, sha256, data: None } => {
                if !self.binary {
                    return Reply::one(located(
                        Error::InvalidRequest("chunk data missing and binary frames were not negotiated".into()),
                        &session_id,
                        Some(index),
                    ));
                }
                self.pending = Some(PendingChunk { session_id, index, sha256 });
                Reply::default()
            }
            ClientMessage::Resume { session_id } => match self.manager.resume(&session_id) {
                Ok(s) => Reply::one(ServerMessage::Ack(Ack {
                    of: "upload.resume".into(),
                    received: Some(s.received_count()),
                    total_chunks: Some(s.total_chunks),
                    chunk_size: Some(s.chunk_size),
                    missing: Some(s.missing()),
                    session_id,
                    ..Default::default()
                })),
                Err(e) => Reply::one(located(e, &session_id, None)),
            },
            ClientMessage::Complete { session_id } => match self.manager.complete(&session_id) {
                Ok(done) => Reply {
                    messages: vec![ServerMessage::Ack(Ack {
                        of: "upload.complete".into(),
                        document_id: Some(done.document.id),
                        job_id: Some(done.job_id.clone()),
                        session_id,
                        ..Default::default()
                    })],
                    watch_job: Some(done.job_id),
                },
                Err(e) => Reply::one(located(e, &session_id, None)),
            },
        }
    }

    pub fn on_binary(&mut self, frame: &[u8]) -> Reply {
        let Some(pending) = self.pending.take() else {
            return Reply::one(ServerMessage::error(&Error::InvalidRequest(
                "binary frame without a preceding upload.chunk".into(),
            )));
        };
        if frame.len() < 4 {
            return Reply::one(located(
                Error::InvalidRequest("binary frame shorter than its index prefix".into()),
                &pending.session_id,
                Some(pending.index),
            ));
        }
        let index = i64::from(u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]));
        if index != pending.index {
            return Reply::one(located(
                Error::InvalidRequest(format!("binary frame is for chunk {index}, expected {}", pending.index)),
                &pending.session_id,
                Some(pending.index),
            ));
        }
        self.append(&pending.session_id, index, &frame[4..], &pending.sha256)
    }

    fn append(&self, session_id: &SessionId, index: i64, payload: &[u8], sha256: &str) -> Reply {
        match self.manager.append_chunk(session_id, index, payload, sha256) {
            Ok(receipt) => {
                let mut messages = vec![ServerMessage::Ack(Ack {
                    of: "upload.chunk".into(),
                    session_id: session_id.clone(),
                    index: Some(index),
                    status: Some(receipt.ack),
                    received: Some(receipt.received),
                    total_chunks: Some(receipt.total),
                    ..Default::default()
                })];
                if let Some(p) = &receipt.progress {
                    messages.push(p.into());
                }
                Reply { messages, watch_job: None }
            }
            Err(e) => Reply::one(located(e, session_id, Some(index))),
        }
    }
}

/// Frames a chunk for a binary-capable connection.
pub fn binary_frame(index: u32, payload: &[u8]) -> Vec<u8> {
    let mut frame = Vec::with_capacity(payload.len() + 4);
    frame.extend_from_slice(&index.to_be_bytes());
    frame.extend_from_slice(payload);
    frame
}

pub fn parse_server_message(text: &str) -> Result<ServerMessage> {
    serde_json::from_str(text).map_err(|e| Error::InvalidRequest(format!("malformed server message: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::upload::sha256_hex;
    use crate::upload::tests::manager;
    use serde_json::json;

    fn acks(reply: &Reply) -> Vec<&Ack> {
        reply
            .messages
            .iter()
            .filter_map(|m| match m {
                ServerMessage::Ack(a) => Some(a),
                _ => None,
            })
            .collect()
    }

    fn error_code(reply: &Reply) -> Option<&str> {
        reply.messages.iter().find_map(|m| match m {
            ServerMessage::Error { code, .. } => Some(code.as_str()),
            _ => None,
        })
    }

    fn init(conn: &mut UploadConnection, bytes: &[u8]) -> SessionId {
        let reply = conn.on_text(
            &json!({
                "type": "upload.init", "filename": "paper_B.pdf", "size": bytes.len(), "sha256": sha256_hex(bytes),
                "course_id": "course-phy201", "paper": {"title": "Physiology CAT", "year": 2019}
            })
            .to_string(),
        );
        let ack = acks(&reply)[0].clone();
        assert_eq!(ack.of, "upload.init");
        ack.session_id
    }

    #[test]
    fn message_shapes() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"upload.resume","session_id":"s1"}"#).unwrap();
        assert_eq!(m, ClientMessage::Resume { session_id: "s1".into() });
        let out = ServerMessage::Result { job_id: "j".into(), paper_id: "p".into(), question_count: 3 }.to_json();
        assert_eq!(out, r#"{"type":"result","job_id":"j","paper_id":"p","question_count":3}"#);
        let e = ServerMessage::error(&Error::Incomplete { missing: 2 }).to_json();
        assert_eq!(serde_json::from_str::<serde_json::Value>(&e).unwrap()["code"], "incomplete");
        let ack = ServerMessage::Ack(Ack { of: "upload.resume".into(), session_id: "s".into(), missing: Some(vec![2, 3]), ..Default::default() });
        assert_eq!(ack.to_json(), r#"{"type":"ack","of":"upload.resume","session_id":"s","missing":[2,3]}"#);
        assert_eq!(parse_server_message(&ack.to_json()).unwrap(), ack);
    }

    #[test]
    fn base64_upload_end_to_end() {
        let (m, _) = manager(crate::upload::MIN_CHUNK_SIZE);
        let m = Arc::new(m);
        let bytes = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/paper_B.pdf")).unwrap();
        let mut conn = UploadConnection::new(m.clone(), false);
        let session = init(&mut conn, &bytes);
        let b64 = base64::engine::general_purpose::STANDARD;
        let size = crate::upload::MIN_CHUNK_SIZE as usize;
        for (i, c) in bytes.chunks(size).enumerate() {
            let reply = conn.on_text(
                &json!({"type": "upload.chunk", "session_id": session, "index": i, "sha256": sha256_hex(c), "data": b64.encode(c)})
                    .to_string(),
            );
            assert_eq!(acks(&reply)[0].status, Some(ChunkAck::Accepted));
            assert!(matches!(reply.messages.last(), Some(ServerMessage::Progress { stage: Stage::Uploading, .. })));
        }
        let reply = conn.on_text(&json!({"type": "upload.chunk", "session_id": session, "index": 0, "sha256": "00"}).to_string());
        assert_eq!(error_code(&reply), Some("invalid-request"));

        let reply = conn.on_text(&json!({"type": "upload.complete", "session_id": session}).to_string());
        let job = reply.watch_job.clone().unwrap();
        assert_eq!(m.pipeline().run_job(&job).unwrap(), JobState::Done);
        let outcome = job_outcome(&m.pipeline().job(&job).unwrap()).unwrap();
        assert!(matches!(outcome, ServerMessage::Result { question_count: 5, .. }), "{outcome:?}");
    }

    #[test]
    fn binary_frames_and_resume() {
        let (m, _) = manager(crate::upload::MIN_CHUNK_SIZE);
        let m = Arc::new(m);
        let bytes: Vec<u8> = (0..150_000u32).map(|i| (i % 7) as u8).collect();
        let mut conn = UploadConnection::new(m.clone(), true);
        let session = init(&mut conn, &bytes);
        let size = crate::upload::MIN_CHUNK_SIZE as usize;
        let c1 = &bytes[size..2 * size];
        let header = json!({"type": "upload.chunk", "session_id": session, "index": 1, "sha256": sha256_hex(c1)}).to_string();
        assert_eq!(conn.on_text(&header), Reply::default());
        assert_eq!(error_code(&conn.on_binary(&binary_frame(2, c1))), Some("invalid-request"));
        assert_eq!(error_code(&conn.on_binary(&binary_frame(1, c1))), Some("invalid-request"));
        conn.on_text(&header);
        let reply = conn.on_binary(&binary_frame(1, c1));
        assert_eq!(acks(&reply)[0].status, Some(ChunkAck::Accepted));

        // a new connection picks up where the old one stopped
        let mut conn = UploadConnection::new(m.clone(), true);
        let reply = conn.on_text(&json!({"type": "upload.resume", "session_id": session}).to_string());
        assert_eq!(acks(&reply)[0].missing, Some(vec![0, 2]));
        let reply = conn.on_text(&json!({"type": "upload.complete", "session_id": session}).to_string());
        assert_eq!(error_code(&reply), Some("incomplete"));
        let reply = conn.on_text(&json!({"type": "upload.resume", "session_id": "gone"}).to_string());
        assert_eq!(error_code(&reply), Some("unknown-session"));
        assert_eq!(error_code(&conn.on_text("{not json")), Some("invalid-request"));
    }
}
