//! Turning extracted text into draft questions.
//!
//! Text is cut into prompt-sized windows, each window goes to a
//! [`SynthesisProvider`], and the provider's raw output is parsed into
//! drafts by [`parse_model_output`]. The rule-based extractor is both the
//! offline provider and the reference the pipeline is tested against.

mod dedupe;
mod parse;
mod provider;
mod rule_based;

use serde::{Deserialize, Serialize};

use crate::domain::DraftQuestion;
use crate::{Error, Result};

pub use dedupe::{validate_and_dedupe, DedupeOutcome, DropReason, DroppedDraft};
pub use parse::{parse_model_output, ParseContext, DEFAULT_MODEL_CONFIDENCE};
pub use provider::{
    generate_with_model, merge_windows, LocalSynthesisProvider, RawModelOutput, RemoteLlmConfig,
    RemoteSynthesisProvider, SynthesisProvider, WindowResult, DEFAULT_MODEL, DEFAULT_REMOTE_WINDOW_CHARS,
    WINDOWS_IN_FLIGHT,
};
pub use rule_based::{
    extract_questions_rule_based, extract_rule_based_items, ExtractedItem, RULE_BASED_PROVIDER, RULE_BASED_VERSION,
};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTags {
    pub institution: Option<String>,
    pub course_code: String,
    pub locale_note: Option<String>,
}

impl ContextTags {
    /// One line a model can read as context ahead of the document text.
    pub fn render(&self) -> String {
        let mut out = format!("Course: {}", self.course_code);
        if let Some(inst) = &self.institution {
            out.push_str(&format!("; Institution: {inst}"));
        }
        if let Some(note) = &self.locale_note {
            out.push_str(&format!("; Local context: {note}"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_instructions: String,
    pub user_content: String,
    pub context: ContextTags,
    pub window_index: usize,
    pub window_count: usize,
    /// Byte offset of `user_content` within the full ordered text.
    pub text_offset: usize,
}

/// Everything a bundle carries besides its slice of text.
#[derive(Debug, Clone, Default)]
pub struct PromptTemplate {
    pub system_instructions: String,
    pub context: ContextTags,
}

pub const MIN_WINDOW_CHARS: usize = 2_000;
const PARAGRAPH_BREAK: &str = "\n\n";

/// Packs paragraphs greedily into windows of at most `max_window_chars`
/// characters, splitting only at paragraph breaks. A paragraph longer than
/// the limit gets a window of its own. Concatenating the windows yields the
/// input exactly.
pub fn window_text(text: &str, max_window_chars: usize, template: &PromptTemplate) -> Result<Vec<PromptBundle>> {
    if max_window_chars < MIN_WINDOW_CHARS {
        return Err(Error::InvalidRequest(format!(
            "window size {max_window_chars} is below the minimum of {MIN_WINDOW_CHARS}"
        )));
    }
    let mut windows: Vec<(usize, String)> = Vec::new();
    let mut current = String::new();
    let mut current_chars = 0;
    let mut current_offset = 0;
    let mut offset = 0;
    for segment in text.split_inclusive(PARAGRAPH_BREAK) {
        let chars = segment.chars().count();
        if !current.is_empty() && current_chars + chars > max_window_chars {
            windows.push((current_offset, std::mem::take(&mut current)));
            current_chars = 0;
        }
        if current.is_empty() {
            current_offset = offset;
        }
        current.push_str(segment);
        current_chars += chars;
        offset += segment.len();
    }
    if !current.is_empty() {
        windows.push((current_offset, current));
    }
    Ok(into_bundles(windows, template))
}

/// The whole text as a single bundle (providers without a context limit).
pub fn single_window(text: &str, template: &PromptTemplate) -> Vec<PromptBundle> {
    if text.is_empty() {
        return Vec::new();
    }
    into_bundles(vec![(0, text.to_string())], template)
}

fn into_bundles(windows: Vec<(usize, String)>, template: &PromptTemplate) -> Vec<PromptBundle> {
    let count = windows.len();
    windows
        .into_iter()
        .enumerate()
        .map(|(i, (text_offset, user_content))| PromptBundle {
            system_instructions: template.system_instructions.clone(),
            user_content,
            context: template.context.clone(),
            window_index: i,
            window_count: count,
            text_offset,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedFragment {
    pub raw_fragment: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOutput {
    pub drafts: Vec<DraftQuestion>,
    pub rejected: Vec<RejectedFragment>,
    pub provider_name: String,
    pub model_version: String,
    pub latency_ms: u64,
}
