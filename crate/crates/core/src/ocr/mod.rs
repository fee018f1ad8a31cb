//! Document analysis: raw document bytes in, normalized layout out.
//!
//! Two providers ship: [`FixtureOcrProvider`] resolves documents by content
//! hash against a directory of hand-authored layouts, and
//! [`RemoteOcrProvider`] calls an HTTPS analysis endpoint.

mod fixture;
mod remote;

use std::ops::Range;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{DocumentId, SourceLocation};
use crate::{Error, Result};

pub use fixture::FixtureOcrProvider;
pub use remote::{RemoteOcrConfig, RemoteOcrProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub words: Vec<Word>,
}

impl Line {
    pub fn text(&self) -> String {
        self.words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paragraph {
    pub lines: Vec<Line>,
}

impl Paragraph {
    pub fn text(&self) -> String {
        self.lines.iter().map(Line::text).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub number: u32,
    pub paragraphs: Vec<Paragraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub page: u32,
    pub rows: Vec<Vec<String>>,
}

/// Normalized OCR output. Reading order is paragraph order within a page,
/// page order overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutResult {
    pub pages: Vec<Page>,
    #[serde(default)]
    pub tables: Vec<Table>,
    pub source_document_id: Option<DocumentId>,
    pub provider_name: String,
    pub produced_at: DateTime<Utc>,
}

impl LayoutResult {
    pub fn check_invariants(&self) -> Result<()> {
        check_page_numbers(self.pages.iter().map(|p| p.number))?;
        for page in &self.pages {
            for word in page.paragraphs.iter().flat_map(|p| &p.lines).flat_map(|l| &l.words) {
                check_confidence(word.confidence)?;
            }
        }
        for table in &self.tables {
            if table.page == 0 || table.page as usize > self.pages.len() {
                return Err(Error::ProviderBadResponse(format!(
                    "table references missing page {}",
                    table.page
                )));
            }
        }
        Ok(())
    }

    pub fn paragraph_count(&self) -> usize {
        self.pages.iter().map(|p| p.paragraphs.len()).sum()
    }
}

pub(crate) fn check_page_numbers(numbers: impl Iterator<Item = u32>) -> Result<()> {
    for (pos, number) in numbers.enumerate() {
        if number as usize != pos + 1 {
            return Err(Error::ProviderBadResponse(format!(
                "page numbers must run 1..n without gaps; found {number} at position {}",
                pos + 1
            )));
        }
    }
    Ok(())
}

pub(crate) fn check_confidence(c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(Error::ProviderBadResponse(format!("word confidence {c} outside [0, 1]")))
    }
}

/// What a provider returns: the verbatim payload for the audit store and
/// its normalized form.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub raw_payload: String,
    pub layout: LayoutResult,
}

pub trait OcrProvider: Send + Sync {
    fn name(&self) -> &str;

    fn accepts(&self, content_type: &str) -> bool {
        ACCEPTED_CONTENT_TYPES.contains(&content_type)
    }

    fn analyze(&self, document: &[u8], content_type: &str) -> Result<Analysis>;
}

pub const ACCEPTED_CONTENT_TYPES: &[&str] =
    &["application/pdf", "image/png", "image/jpeg", "image/tiff"];

/// Best-effort content type from a filename extension.
pub fn content_type_for(filename: &str) -> &'static str {
    let ext = filename.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase()).unwrap_or_default();
    match ext.as_str() {
        "pdf" => "application/pdf",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "tif" | "tiff" => "image/tiff",
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParagraphOffset {
    #[serde(flatten)]
    pub location: SourceLocation,
    pub start: usize,
    pub end: usize,
}

/// Reading-order text with the byte range each paragraph occupies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderedText {
    pub text: String,
    pub offsets: Vec<ParagraphOffset>,
}

impl OrderedText {
    pub fn range_of(&self, location: SourceLocation) -> Option<Range<usize>> {
        self.offsets.iter().find(|o| o.location == location).map(|o| o.start..o.end)
    }

    /// Paragraph containing (or nearest before) a byte offset.
    pub fn locate(&self, byte: usize) -> Option<SourceLocation> {
        self.offsets.iter().take_while(|o| o.start <= byte).last().map(|o| o.location)
    }
}

pub const TABLE_CELL_SEPARATOR: &str = " | ";
const BLOCK_SEPARATOR: &str = "\n\n";

/// Concatenates paragraphs in reading order separated by blank lines. Each
/// page's tables follow its paragraphs, one row per line.
pub fn layout_to_text(layout: &LayoutResult) -> OrderedText {
    let mut out = OrderedText::default();
    let push_block = |out: &mut OrderedText, block: &str| -> Range<usize> {
        if !out.text.is_empty() {
            out.text.push_str(BLOCK_SEPARATOR);
        }
        let start = out.text.len();
        out.text.push_str(block);
        start..out.text.len()
    };

    for page in &layout.pages {
        for (idx, paragraph) in page.paragraphs.iter().enumerate() {
            let range = push_block(&mut out, &paragraph.text());
            out.offsets.push(ParagraphOffset {
                location: SourceLocation { page: page.number, paragraph: idx as u32 },
                start: range.start,
                end: range.end,
            });
        }
        for table in layout.tables.iter().filter(|t| t.page == page.number) {
            let rendered = table
                .rows
                .iter()
                .map(|row| row.join(TABLE_CELL_SEPARATOR))
                .collect::<Vec<_>>()
                .join("\n");
            push_block(&mut out, &rendered);
        }
    }
    out
}
