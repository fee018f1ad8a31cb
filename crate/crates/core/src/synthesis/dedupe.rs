use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::domain::{DraftQuestion, Fingerprint};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum DropReason {
    Invalid { violations: Vec<String> },
    DuplicateExisting,
    DuplicateBatch,
}

impl DropReason {
    pub fn code(&self) -> &'static str {
        match self {
            DropReason::Invalid { .. } => "invalid",
            DropReason::DuplicateExisting => "duplicate-existing",
            DropReason::DuplicateBatch => "duplicate-batch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedDraft {
    pub draft: DraftQuestion,
    #[serde(flatten)]
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DedupeOutcome {
    pub accepted: Vec<DraftQuestion>,
    pub dropped: Vec<DroppedDraft>,
}

impl DedupeOutcome {
    pub fn drop_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for d in &self.dropped {
            *counts.entry(d.reason.code()).or_default() += 1;
        }
        counts
    }
}

/// Keeps drafts that validate and whose fingerprint is neither in
/// `existing` nor held by an earlier draft of the batch. Order is kept.
pub fn validate_and_dedupe(drafts: Vec<DraftQuestion>, existing: &HashSet<Fingerprint>) -> DedupeOutcome {
    let mut seen = HashSet::new();
    let mut out = DedupeOutcome::default();
    for draft in drafts {
        let report = draft.validate();
        let reason = if !report.is_ok() {
            Some(DropReason::Invalid { violations: report.codes().into_iter().map(str::to_string).collect() })
        } else {
            let fp = draft.fingerprint();
            if existing.contains(&fp) {
                Some(DropReason::DuplicateExisting)
            } else if !seen.insert(fp) {
                Some(DropReason::DuplicateBatch)
            } else {
                None
            }
        };
        match reason {
            Some(reason) => out.dropped.push(DroppedDraft { draft, reason }),
            None => out.accepted.push(draft),
        }
    }
    out
}
