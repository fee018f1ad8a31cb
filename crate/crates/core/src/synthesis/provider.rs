use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::rule_based::{extract_rule_based_items, RULE_BASED_PROVIDER, RULE_BASED_VERSION};
use super::{parse_model_output, single_window, window_text, ParseContext, PromptBundle, PromptTemplate, SynthesisOutput};
use crate::domain::{Generator, QuestionBody};
use crate::net::{bounded_map, classify, read_capped, RetryPolicy};
use crate::{Error, Result};

/// What a provider said about one window, before parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawModelOutput {
    pub text: String,
    pub model_version: String,
    pub latency_ms: u64,
}

pub trait SynthesisProvider: Send + Sync {
    fn name(&self) -> &str;

    fn generator(&self) -> Generator;

    /// Largest window the provider takes, in characters; `None` means the
    /// whole text goes in one window.
    fn max_window_chars(&self) -> Option<usize>;

    fn generate(&self, bundle: &PromptBundle) -> Result<RawModelOutput>;
}

/// Offline provider backed by the fixed-grammar extractor. Emits the same
/// JSON shape a model is asked for, so both go through one parser.
#[derive(Debug, Default, Clone)]
pub struct LocalSynthesisProvider;

impl SynthesisProvider for LocalSynthesisProvider {
    fn name(&self) -> &str {
        RULE_BASED_PROVIDER
    }

    fn generator(&self) -> Generator {
        Generator::RuleBased
    }

    fn max_window_chars(&self) -> Option<usize> {
        None
    }

    fn generate(&self, bundle: &PromptBundle) -> Result<RawModelOutput> {
        let started = Instant::now();
        let (items, rejected) = extract_rule_based_items(&bundle.user_content);
        let items: Vec<Value> = items
            .into_iter()
            .map(|item| {
                let mut v = json!({
                    "stem": item.content.stem,
                    "confidence": 1.0,
                    "source_offsets": [item.range.start, item.range.end],
                });
                match item.content.body {
                    QuestionBody::Mcq { choices } => {
                        v["kind"] = json!("mcq");
                        v["choices"] = json!(choices
                            .iter()
                            .map(|c| json!({"text": c.text, "is_correct": c.is_correct}))
                            .collect::<Vec<_>>());
                    }
                    QuestionBody::Saq { parts } => {
                        v["kind"] = json!("saq");
                        v["parts"] = json!(parts
                            .iter()
                            .map(|p| json!({"prompt": p.prompt, "expected_answer": p.expected_answer, "marks": p.marks}))
                            .collect::<Vec<_>>());
                    }
                }
                v
            })
            .collect();
        let rejected: Vec<Value> = rejected
            .into_iter()
            .map(|r| json!({"fragment": r.raw_fragment, "reason": r.reason}))
            .collect();
        Ok(RawModelOutput {
            text: json!({"items": items, "rejected": rejected}).to_string(),
            model_version: RULE_BASED_VERSION.to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RemoteLlmConfig {
    pub endpoint: String,
    pub api_key: String,
    pub model: String,
    pub max_window_chars: usize,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub max_response_bytes: u64,
}

pub const DEFAULT_MODEL: &str = "o3-mini";
pub const DEFAULT_REMOTE_WINDOW_CHARS: usize = 24_000;

impl RemoteLlmConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            model: DEFAULT_MODEL.to_string(),
            max_window_chars: DEFAULT_REMOTE_WINDOW_CHARS,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
            max_response_bytes: 2 * 1024 * 1024,
        }
    }

    /// Reads LLM_ENDPOINT, LLM_API_KEY and LLM_MODEL.
    pub fn from_env() -> Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Like [`Self::from_env`] but reads settings through `get`.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let endpoint = get("LLM_ENDPOINT")
            .filter(|v| !v.trim().is_empty())
            .ok_or_else(|| Error::Config("LLM_ENDPOINT is not set".into()))?;
        let mut config = Self::new(endpoint, get("LLM_API_KEY").unwrap_or_default());
        if let Some(model) = get("LLM_MODEL").filter(|m| !m.trim().is_empty()) {
            config.model = model;
        }
        Ok(config)
    }
}

/// Chat-completions client. Sends the system instructions and the window
/// (prefixed by its context tags) at temperature 0.
pub struct RemoteSynthesisProvider {
    config: RemoteLlmConfig,
    agent: ureq::Agent,
}

impl RemoteSynthesisProvider {
    pub fn new(config: RemoteLlmConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self { config, agent }
    }

    fn request_body(&self, bundle: &PromptBundle) -> Value {
        let user = format!(
            "{}\nWindow {} of {}\n\n{}",
            bundle.context.render(),
            bundle.window_index + 1,
            bundle.window_count,
            bundle.user_content
        );
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": bundle.system_instructions},
                {"role": "user", "content": user},
            ],
        })
    }

    fn call(&self, body: &Value) -> Result<String> {
        let response = self
            .agent
            .post(&self.config.endpoint)
            .set("authorization", &format!("Bearer {}", self.config.api_key))
            .set("content-type", "application/json")
            .send_string(&body.to_string())
            .map_err(classify)?;
        read_capped(response, self.config.max_response_bytes)
    }
}

impl SynthesisProvider for RemoteSynthesisProvider {
    fn name(&self) -> &str {
        "remote-llm"
    }

    fn generator(&self) -> Generator {
        Generator::Model
    }

    fn max_window_chars(&self) -> Option<usize> {
        Some(self.config.max_window_chars)
    }

    fn generate(&self, bundle: &PromptBundle) -> Result<RawModelOutput> {
        let started = Instant::now();
        let body = self.request_body(bundle);
        let raw = self.config.retry.run(|| self.call(&body))?;
        let reply: Value = serde_json::from_str(&raw)
            .map_err(|e| Error::ProviderBadResponse(format!("invalid JSON: {e}")))?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::ProviderBadResponse("reply has no message content".into()))?;
        let model_version = reply
            .get("model")
            .and_then(Value::as_str)
            .unwrap_or(&self.config.model)
            .to_string();
        Ok(RawModelOutput {
            text: text.to_string(),
            model_version,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Outcome of one window.
#[derive(Debug, Clone)]
pub struct WindowResult {
    pub window_index: usize,
    pub raw: Option<RawModelOutput>,
    /// Error code of the provider failure when the window fell back to the
    /// rule-based extractor.
    pub fell_back: Option<String>,
    pub output: SynthesisOutput,
}

pub const WINDOWS_IN_FLIGHT: usize = 2;

/// Splits `text` to suit the provider, generates every window (two at a
/// time) and parses the replies. Source offsets come back relative to the
/// whole text. With `fallback` set a failed window is re-done by the
/// rule-based extractor; otherwise the first failure is returned.
pub fn generate_with_model(
    provider: &dyn SynthesisProvider,
    text: &str,
    template: &PromptTemplate,
    ctx: &ParseContext,
    fallback: bool,
) -> Result<Vec<WindowResult>> {
    let bundles = match provider.max_window_chars() {
        Some(max) => window_text(text, max, template)?,
        None => single_window(text, template),
    };
    let results = bounded_map(&bundles, WINDOWS_IN_FLIGHT, |bundle| {
        let window_ctx = ParseContext {
            provider_name: provider.name().to_string(),
            generator: provider.generator(),
            ..ctx.clone()
        };
        match provider.generate(bundle) {
            Ok(raw) => {
                let ctx = ParseContext {
                    model_version: raw.model_version.clone(),
                    latency_ms: raw.latency_ms,
                    ..window_ctx
                };
                let output = parse_model_output(&raw.text, &ctx);
                Ok(WindowResult { window_index: bundle.window_index, raw: Some(raw), fell_back: None, output })
            }
            Err(e) if fallback => {
                tracing::warn!(window = bundle.window_index, error = %e, "provider failed, using rule-based extractor");
                let raw = LocalSynthesisProvider.generate(bundle)?;
                let ctx = ParseContext {
                    provider_name: RULE_BASED_PROVIDER.to_string(),
                    model_version: raw.model_version.clone(),
                    generator: Generator::RuleBased,
                    latency_ms: raw.latency_ms,
                    ..ctx.clone()
                };
                let output = parse_model_output(&raw.text, &ctx);
                Ok(WindowResult {
                    window_index: bundle.window_index,
                    raw: Some(raw),
                    fell_back: Some(e.code().to_string()),
                    output,
                })
            }
            Err(e) => Err(e),
        }
    });

    let mut out = Vec::with_capacity(results.len());
    for (bundle, result) in bundles.iter().zip(results) {
        let mut window = result?;
        for d in &mut window.output.drafts {
            if let Some([s, e]) = d.source_offsets {
                d.source_offsets = Some([s + bundle.text_offset, e + bundle.text_offset]);
            }
        }
        out.push(window);
    }
    Ok(out)
}

/// Concatenates per-window outputs in window order.
pub fn merge_windows(windows: &[WindowResult]) -> SynthesisOutput {
    let mut merged = SynthesisOutput {
        drafts: Vec::new(),
        rejected: Vec::new(),
        provider_name: String::new(),
        model_version: String::new(),
        latency_ms: 0,
    };
    for w in windows {
        merged.drafts.extend(w.output.drafts.iter().cloned());
        merged.rejected.extend(w.output.rejected.iter().cloned());
        merged.latency_ms += w.output.latency_ms;
        if merged.provider_name.is_empty() {
            merged.provider_name = w.output.provider_name.clone();
            merged.model_version = w.output.model_version.clone();
        }
    }
    merged
}
