#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use base64::Engine;
use futures_util::{SinkExt, StreamExt};
use juvenotes_core::domain::{CourseId, PaperMeta, SessionId};
use juvenotes_core::store::SeedFile;
use juvenotes_core::upload::protocol::{binary_frame, parse_server_message, ClientMessage, ServerMessage};
use juvenotes_core::upload::sha256_hex;
use juvenotes_server::{AppState, Settings};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn paper_a_meta() -> PaperMeta {
    PaperMeta { title: "Pharmacology and Therapeutics".into(), year: 2021 }
}

pub struct TestServer {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    pub http: reqwest::Client,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<tokio::task::JoinHandle<()>>,
}

impl TestServer {
    pub async fn start() -> Self {
        Self::start_with(&[]).await
    }

    pub async fn start_with(extra: &[(&str, &str)]) -> Self {
        let root = fixtures();
        let mut vars: BTreeMap<String, String> = [
            ("DATABASE_URL", ":memory:".to_string()),
            ("AUTH_TOKENS_FILE", root.join("tokens.json").display().to_string()),
            ("OCR_FIXTURES_DIR", root.join("layouts").display().to_string()),
            ("PROMPT_PATH", root.join("../prompts/system.txt").display().to_string()),
            ("UPLOAD_CHUNK_SIZE", "65536".to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for (k, v) in extra {
            vars.insert(k.to_string(), v.to_string());
        }
        let settings = Settings::from_vars(vars).unwrap();
        let state = AppState::from_settings(&settings).unwrap();
        state.store.seed(&SeedFile::load(root.join("seed.json")).unwrap()).unwrap();
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel();
        let serve_state = Arc::clone(&state);
        let handle = tokio::spawn(async move {
            juvenotes_server::serve(listener, serve_state, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
        Self { addr, state, http: reqwest::Client::new(), shutdown: Some(tx), handle: Some(handle) }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn ws_url(&self, token: &str, binary: bool) -> String {
        format!("ws://{}/ws?token={token}{}", self.addr, if binary { "&binary=1" } else { "" })
    }

    pub async fn get(&self, path: &str, token: &str) -> reqwest::Response {
        self.http.get(self.url(path)).bearer_auth(token).send().await.unwrap()
    }

    pub async fn post(&self, path: &str, token: &str, body: serde_json::Value) -> reqwest::Response {
        self.http.post(self.url(path)).bearer_auth(token).json(&body).send().await.unwrap()
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.handle.take() {
            h.await.unwrap();
        }
    }
}

pub type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

pub async fn connect(url: &str) -> Ws {
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

pub async fn send(ws: &mut Ws, msg: &ClientMessage) {
    ws.send(Message::Text(serde_json::to_string(msg).unwrap().into())).await.unwrap();
}

pub async fn recv(ws: &mut Ws) -> ServerMessage {
    loop {
        let frame = tokio::time::timeout(std::time::Duration::from_secs(60), ws.next())
            .await
            .expect("server message within a minute")
            .expect("stream open")
            .unwrap();
        if let Message::Text(t) = frame {
            return parse_server_message(t.as_str()).unwrap();
        }
    }
}

/// Receives until an ack for `of` arrives, collecting everything seen.
pub async fn recv_ack(ws: &mut Ws, of: &str, seen: &mut Vec<ServerMessage>) -> juvenotes_core::upload::protocol::Ack {
    loop {
        let m = recv(ws).await;
        seen.push(m.clone());
        match m {
            ServerMessage::Ack(a) if a.of == of => return a,
            ServerMessage::Error { code, message, .. } => panic!("unexpected error {code}: {message}"),
            _ => {}
        }
    }
}

pub async fn send_chunk(ws: &mut Ws, session: &SessionId, index: u64, payload: &[u8], binary: bool) {
    let sha256 = sha256_hex(payload);
    if binary {
        send(ws, &ClientMessage::Chunk { session_id: session.clone(), index: index as i64, sha256, data: None }).await;
        ws.send(Message::Binary(binary_frame(index as u32, payload).into())).await.unwrap();
    } else {
        let data = Some(base64::engine::general_purpose::STANDARD.encode(payload));
        send(ws, &ClientMessage::Chunk { session_id: session.clone(), index: index as i64, sha256, data }).await;
    }
}

/// Uploads a whole file over one connection and returns every server
/// message up to and including the job's result or error.
pub async fn upload(url: &str, bytes: &[u8], filename: &str, course: &str, paper: PaperMeta, binary: bool) -> Vec<ServerMessage> {
    let mut ws = connect(url).await;
    let mut seen = Vec::new();
    send(
        &mut ws,
        &ClientMessage::Init {
            filename: filename.into(),
            size: bytes.len() as u64,
            sha256: sha256_hex(bytes),
            course_id: CourseId::from(course),
            paper,
        },
    )
    .await;
    let init = recv_ack(&mut ws, "upload.init", &mut seen).await;
    let chunk = init.chunk_size.unwrap() as usize;
    for (i, payload) in bytes.chunks(chunk).enumerate() {
        send_chunk(&mut ws, &init.session_id, i as u64, payload, binary).await;
        recv_ack(&mut ws, "upload.chunk", &mut seen).await;
    }
    send(&mut ws, &ClientMessage::Complete { session_id: init.session_id.clone() }).await;
    recv_ack(&mut ws, "upload.complete", &mut seen).await;
    loop {
        let m = recv(&mut ws).await;
        let last = matches!(m, ServerMessage::Result { .. } | ServerMessage::Error { .. });
        seen.push(m);
        if last {
            break;
        }
    }
    let _ = ws.close(None).await;
    seen
}
