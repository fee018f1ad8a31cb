//! Progress events for uploads and pipeline jobs, fanned out to any number
//! of live subscribers.

use std::collections::HashMap;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::domain::wire_enum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Uploading,
    Ocr,
    Generating,
    Inserting,
    Done,
    Failed,
}

wire_enum!(Stage {
    Uploading => "uploading",
    Ocr => "ocr",
    Generating => "generating",
    Inserting => "inserting",
    Done => "done",
    Failed => "failed",
});

impl Stage {
    pub fn is_terminal(self) -> bool {
        matches!(self, Stage::Done | Stage::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressEvent {
    /// Upload session id or job id.
    pub id: String,
    pub stage: Stage,
    pub percent: u8,
    pub log: String,
    pub at: DateTime<Utc>,
}

#[derive(Default)]
struct Track {
    last: Option<(Stage, u8)>,
    sender: Option<broadcast::Sender<ProgressEvent>>,
}

/// Routes events by id. Within one id, percent never decreases for a
/// stage and nothing follows a terminal event.
#[derive(Default)]
pub struct ProgressHub {
    tracks: Mutex<HashMap<String, Track>>,
}

const CHANNEL_CAPACITY: usize = 256;

impl ProgressHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&self, id: &str) -> broadcast::Receiver<ProgressEvent> {
        let mut tracks = self.tracks.lock().unwrap();
        let track = tracks.entry(id.to_string()).or_default();
        track
            .sender
            .get_or_insert_with(|| broadcast::channel(CHANNEL_CAPACITY).0)
            .subscribe()
    }

    /// Normalizes the event against what was already emitted for its id and
    /// broadcasts it. Returns the event as sent, or `None` when the id has
    /// already reached a terminal stage.
    pub fn publish(&self, mut event: ProgressEvent) -> Option<ProgressEvent> {
        let mut tracks = self.tracks.lock().unwrap();
        let track = tracks.entry(event.id.clone()).or_default();
        if let Some((stage, percent)) = track.last {
            if stage.is_terminal() {
                return None;
            }
            if stage == event.stage && event.percent < percent {
                event.percent = percent;
            }
        }
        event.percent = event.percent.min(100);
        track.last = Some((event.stage, event.percent));
        if let Some(sender) = &track.sender {
            // No receivers is fine: nobody is watching this id right now.
            let _ = sender.send(event.clone());
        }
        Some(event)
    }

    /// Drops bookkeeping for an id once nobody needs it.
    pub fn forget(&self, id: &str) {
        self.tracks.lock().unwrap().remove(id);
    }
}
