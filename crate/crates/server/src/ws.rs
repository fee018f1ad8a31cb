//! The upload and progress channel.

use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use futures_util::{SinkExt, StreamExt};
use serde::Deserialize;
use tokio::sync::mpsc;

use juvenotes_core::domain::JobId;
use juvenotes_core::upload::protocol::{job_outcome, Reply, ServerMessage, UploadConnection};

use crate::auth::Principal;
use crate::error::ApiQuery;
use crate::AppState;

#[derive(Debug, Deserialize)]
pub struct WsQuery {
    #[serde(default)]
    binary: Option<String>,
}

pub async fn upgrade(
    State(state): State<Arc<AppState>>,
    principal: Principal,
    ApiQuery(q): ApiQuery<WsQuery>,
    ws: WebSocketUpgrade,
) -> Response {
    let binary = matches!(q.binary.as_deref(), Some("1") | Some("true"));
    tracing::debug!(user = %principal.user_id, binary, "channel opened");
    ws.on_upgrade(move |socket| session(socket, state, binary))
}

async fn session(socket: WebSocket, state: Arc<AppState>, binary: bool) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<ServerMessage>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if sink.send(Message::Text(msg.to_json().into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let conn = Arc::new(Mutex::new(UploadConnection::new(Arc::clone(&state.uploads), binary)));
    while let Some(Ok(frame)) = stream.next().await {
        let conn = Arc::clone(&conn);
        let reply = match frame {
            Message::Text(text) => {
                tokio::task::spawn_blocking(move || conn.lock().unwrap().on_text(text.as_str())).await
            }
            Message::Binary(bytes) => tokio::task::spawn_blocking(move || conn.lock().unwrap().on_binary(&bytes)).await,
            Message::Close(_) => break,
            _ => continue,
        };
        let Ok(Reply { messages, watch_job }) = reply else { break };
        for m in messages {
            let _ = tx.send(m);
        }
        if let Some(job) = watch_job {
            tokio::spawn(forward_progress(Arc::clone(&state), job, tx.clone()));
        }
    }
    drop(tx);
    // progress forwarders hold their own senders; the writer ends with them
    let _ = writer.await;
}

/// Streams a job's progress to the client, then its result or failure.
async fn forward_progress(state: Arc<AppState>, job: JobId, tx: mpsc::UnboundedSender<ServerMessage>) {
    let mut watch = match state.pipeline.watch(&job) {
        Ok(w) => w,
        Err(e) => {
            let _ = tx.send(ServerMessage::error(&e));
            return;
        }
    };
    while let Some(event) = watch.next().await {
        if tx.send((&event).into()).is_err() {
            return;
        }
    }
    let pipeline = Arc::clone(&state.pipeline);
    let outcome = tokio::task::spawn_blocking(move || pipeline.job(&job)).await;
    match outcome {
        Ok(Ok(job)) => {
            if let Some(m) = job_outcome(&job) {
                let _ = tx.send(m);
            }
        }
        Ok(Err(e)) => {
            let _ = tx.send(ServerMessage::error(&e));
        }
        Err(_) => {}
    }
}
