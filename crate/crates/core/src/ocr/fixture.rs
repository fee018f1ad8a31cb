use std::path::PathBuf;
use std::sync::Arc;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{check_confidence, check_page_numbers, Analysis, LayoutResult, Line, OcrProvider, Page, Paragraph, Table, Word};
use crate::clock::Clock;
use crate::{Error, Result};

#[derive(Deserialize)]
struct RawWord {
    text: String,
    confidence: Option<f64>,
}

#[derive(Deserialize)]
struct RawLine {
    words: Vec<RawWord>,
}

#[derive(Deserialize)]
struct RawParagraph {
    lines: Vec<RawLine>,
}

#[derive(Deserialize)]
struct RawPage {
    number: u32,
    #[serde(default)]
    paragraphs: Vec<RawParagraph>,
}

#[derive(Deserialize)]
struct RawTable {
    page: u32,
    rows: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct RawLayout {
    pages: Vec<RawPage>,
    #[serde(default)]
    tables: Vec<RawTable>,
}

/// Deterministic provider: a document's layout is the file
/// `<sha256>.layout.json` in the fixtures directory.
pub struct FixtureOcrProvider {
    dir: PathBuf,
    clock: Arc<dyn Clock>,
}

pub const FIXTURE_PROVIDER_NAME: &str = "fixture";

impl FixtureOcrProvider {
    pub fn new(dir: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Self {
        Self { dir: dir.into(), clock }
    }

    pub fn layout_path(&self, document: &[u8]) -> PathBuf {
        let digest = hex::encode(Sha256::digest(document));
        self.dir.join(format!("{digest}.layout.json"))
    }

    /// Maps a fixture payload onto [`LayoutResult`]. Words without a
    /// confidence get 1.0.
    pub fn normalize_layout(&self, raw: &str) -> Result<LayoutResult> {
        let raw: RawLayout = serde_json::from_str(raw)
            .map_err(|e| Error::ProviderBadResponse(format!("fixture layout: {e}")))?;
        check_page_numbers(raw.pages.iter().map(|p| p.number))?;

        let mut pages = Vec::with_capacity(raw.pages.len());
        for page in raw.pages {
            let mut paragraphs = Vec::with_capacity(page.paragraphs.len());
            for paragraph in page.paragraphs {
                let mut lines = Vec::with_capacity(paragraph.lines.len());
                for line in paragraph.lines {
                    let mut words = Vec::with_capacity(line.words.len());
                    for word in line.words {
                        let confidence = word.confidence.unwrap_or(1.0);
                        check_confidence(confidence)?;
                        words.push(Word { text: word.text, confidence });
                    }
                    lines.push(Line { words });
                }
                paragraphs.push(Paragraph { lines });
            }
            pages.push(Page { number: page.number, paragraphs });
        }

        let layout = LayoutResult {
            pages,
            tables: raw.tables.into_iter().map(|t| Table { page: t.page, rows: t.rows }).collect(),
            source_document_id: None,
            provider_name: FIXTURE_PROVIDER_NAME.to_string(),
            produced_at: self.clock.now(),
        };
        layout.check_invariants()?;
        Ok(layout)
    }
}

impl OcrProvider for FixtureOcrProvider {
    fn name(&self) -> &str {
        FIXTURE_PROVIDER_NAME
    }

    fn analyze(&self, document: &[u8], content_type: &str) -> Result<Analysis> {
        if !self.accepts(content_type) {
            return Err(Error::UnsupportedFormat(content_type.to_string()));
        }
        if document.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let path = self.layout_path(document);
        let raw_payload = std::fs::read_to_string(&path).map_err(|e| {
            Error::ProviderBadResponse(format!("no fixture layout at {}: {e}", path.display()))
        })?;
        let layout = self.normalize_layout(&raw_payload)?;
        Ok(Analysis { raw_payload, layout })
    }
}
