use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use super::{check_confidence, check_page_numbers, Analysis, LayoutResult, Line, OcrProvider, Page, Paragraph, Table, Word};
use crate::clock::Clock;
use crate::net::{classify, read_capped, Limiter, RetryPolicy};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct RemoteOcrConfig {
    pub endpoint: String,
    pub api_key: String,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub max_response_bytes: u64,
}

impl RemoteOcrConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
            max_response_bytes: 64 * 1024 * 1024,
        }
    }

    /// Reads OCR_ENDPOINT and OCR_API_KEY.
    pub fn from_env() -> Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Like [`Self::from_env`] but reads settings through `get`.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let endpoint = get("OCR_ENDPOINT")
            .filter(|v| !v.trim().is_empty())
            .ok_or_else(|| Error::Config("OCR_ENDPOINT is not set".into()))?;
        Ok(Self::new(endpoint, get("OCR_API_KEY").unwrap_or_default()))
    }
}

// Payload shape returned by the analysis service (camelCase, `content`
// for text), optionally wrapped in `analyzeResult`.
#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RemoteWord {
    content: String,
    confidence: Option<f64>,
}

#[derive(Deserialize)]
struct RemoteLine {
    words: Vec<RemoteWord>,
}

#[derive(Deserialize)]
struct RemoteParagraph {
    lines: Vec<RemoteLine>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RemotePage {
    page_number: u32,
    #[serde(default)]
    paragraphs: Vec<RemoteParagraph>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RemoteCell {
    row_index: usize,
    column_index: usize,
    content: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RemoteTable {
    page_number: u32,
    row_count: usize,
    column_count: usize,
    cells: Vec<RemoteCell>,
}

#[derive(Deserialize)]
struct RemotePayload {
    pages: Vec<RemotePage>,
    #[serde(default)]
    tables: Vec<RemoteTable>,
}

pub const REMOTE_PROVIDER_NAME: &str = "remote";

pub struct RemoteOcrProvider {
    config: RemoteOcrConfig,
    agent: ureq::Agent,
    limiter: Limiter,
    clock: Arc<dyn Clock>,
}

impl RemoteOcrProvider {
    pub fn new(config: RemoteOcrConfig, clock: Arc<dyn Clock>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        let limiter = Limiter::new(config.max_in_flight);
        Self { config, agent, limiter, clock }
    }

    fn call(&self, document: &[u8], content_type: &str) -> Result<String> {
        let _permit = self.limiter.acquire();
        let response = self
            .agent
            .post(&self.config.endpoint)
            .set("content-type", content_type)
            .set("api-key", &self.config.api_key)
            .send_bytes(document)
            .map_err(classify)?;
        read_capped(response, self.config.max_response_bytes)
    }

    /// Maps the service payload onto [`LayoutResult`], keeping provider
    /// confidences. Every word must carry one.
    pub fn normalize_layout(&self, raw: &str) -> Result<LayoutResult> {
        let value: serde_json::Value = serde_json::from_str(raw)
            .map_err(|e| Error::ProviderBadResponse(format!("invalid JSON: {e}")))?;
        let value = match value.get("analyzeResult") {
            Some(inner) => inner.clone(),
            None => value,
        };
        let payload: RemotePayload = serde_json::from_value(value)
            .map_err(|e| Error::ProviderBadResponse(format!("unexpected payload shape: {e}")))?;
        check_page_numbers(payload.pages.iter().map(|p| p.page_number))?;

        let mut pages = Vec::with_capacity(payload.pages.len());
        for page in payload.pages {
            let mut paragraphs = Vec::new();
            for paragraph in page.paragraphs {
                let mut lines = Vec::new();
                for line in paragraph.lines {
                    let mut words = Vec::new();
                    for word in line.words {
                        let confidence = word.confidence.ok_or_else(|| {
                            Error::ProviderBadResponse(format!("word {:?} has no confidence", word.content))
                        })?;
                        check_confidence(confidence)?;
                        words.push(Word { text: word.content, confidence });
                    }
                    lines.push(Line { words });
                }
                paragraphs.push(Paragraph { lines });
            }
            pages.push(Page { number: page.page_number, paragraphs });
        }

        let mut tables = Vec::with_capacity(payload.tables.len());
        for t in payload.tables {
            let mut rows = vec![vec![String::new(); t.column_count]; t.row_count];
            for cell in t.cells {
                let slot = rows
                    .get_mut(cell.row_index)
                    .and_then(|r| r.get_mut(cell.column_index))
                    .ok_or_else(|| Error::ProviderBadResponse("table cell outside its grid".into()))?;
                *slot = cell.content;
            }
            tables.push(Table { page: t.page_number, rows });
        }

        let layout = LayoutResult {
            pages,
            tables,
            source_document_id: None,
            provider_name: REMOTE_PROVIDER_NAME.to_string(),
            produced_at: self.clock.now(),
        };
        layout.check_invariants()?;
        Ok(layout)
    }
}

impl OcrProvider for RemoteOcrProvider {
    fn name(&self) -> &str {
        REMOTE_PROVIDER_NAME
    }

    fn analyze(&self, document: &[u8], content_type: &str) -> Result<Analysis> {
        if !self.accepts(content_type) {
            return Err(Error::UnsupportedFormat(content_type.to_string()));
        }
        if document.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let raw_payload = self.config.retry.run(|| self.call(document, content_type))?;
        let layout = self.normalize_layout(&raw_payload)?;
        Ok(Analysis { raw_payload, layout })
    }
}
