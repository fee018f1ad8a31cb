use chrono::{DateTime, Utc};
use serde_json::{Map, Value};

use super::{RejectedFragment, SynthesisOutput};
use crate::domain::{DocumentId, DraftQuestion, Generator, McqChoice, Provenance, QuestionBody, QuestionContent, SaqPart};

/// Confidence assigned to model items that do not report one.
pub const DEFAULT_MODEL_CONFIDENCE: f64 = 0.5;

const MAX_FRAGMENT_CHARS: usize = 2_000;

#[derive(Debug, Clone)]
pub struct ParseContext {
    pub provider_name: String,
    pub model_version: String,
    pub generator: Generator,
    pub document_id: Option<DocumentId>,
    pub created_at: DateTime<Utc>,
    pub latency_ms: u64,
}

impl Default for ParseContext {
    fn default() -> Self {
        Self {
            provider_name: "model".into(),
            model_version: String::new(),
            generator: Generator::Model,
            document_id: None,
            created_at: DateTime::<Utc>::UNIX_EPOCH,
            latency_ms: 0,
        }
    }
}

fn truncate(s: &str) -> String {
    match s.char_indices().nth(MAX_FRAGMENT_CHARS) {
        Some((cut, _)) => s[..cut].to_string(),
        None => s.to_string(),
    }
}

/// Strips a surrounding Markdown code fence (with or without a language
/// tag), if there is one.
fn unfence(raw: &str) -> &str {
    let trimmed = raw.trim();
    let Some(open) = trimmed.find("```") else { return trimmed };
    let after = &trimmed[open + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let body = &after[body_start..];
    match body.rfind("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

type ItemResult = Result<DraftQuestion, &'static str>;

fn text_field<'a>(obj: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| obj.get(*k)).and_then(Value::as_str)
}

fn parse_kind(obj: &Map<String, Value>) -> Option<bool> {
    let kind = text_field(obj, &["kind", "type"])?.trim().to_ascii_lowercase();
    match kind.as_str() {
        "mcq" | "multiple-choice" | "multiple_choice" => Some(true),
        "saq" | "short-answer" | "short_answer" => Some(false),
        _ => None,
    }
}

/// Index named by an item-level answer: a number or a letter.
fn answer_index(v: &Value) -> Option<usize> {
    match v {
        Value::Number(n) => n.as_u64().map(|n| n as usize),
        Value::String(s) => {
            let s = s.trim().trim_matches(|c| c == '(' || c == ')' || c == '.');
            let mut chars = s.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_alphabetic() => Some((c.to_ascii_uppercase() as u8 - b'A') as usize),
                _ => s.parse().ok(),
            }
        }
        _ => None,
    }
}

fn parse_choices(obj: &Map<String, Value>) -> Result<Vec<McqChoice>, &'static str> {
    let Some(Value::Array(raw)) = obj.get("choices").or_else(|| obj.get("options")) else {
        return Err("malformed-item");
    };
    let explicit = ["answer", "correct", "correct_index", "correct_answer"]
        .iter()
        .find_map(|k| obj.get(*k))
        .and_then(answer_index);

    let mut choices = Vec::with_capacity(raw.len());
    for (i, c) in raw.iter().enumerate() {
        let (text, flagged) = match c {
            Value::String(s) => (s.clone(), false),
            Value::Object(o) => {
                let text = text_field(o, &["text", "content", "label"]).ok_or("malformed-item")?;
                let flagged = ["is_correct", "correct", "isCorrect"]
                    .iter()
                    .find_map(|k| o.get(*k))
                    .and_then(Value::as_bool)
                    .unwrap_or(false);
                (text.to_string(), flagged)
            }
            _ => return Err("malformed-item"),
        };
        choices.push(McqChoice { index: i as u32, text, is_correct: flagged });
    }

    let any_flagged = choices.iter().any(|c| c.is_correct);
    if !any_flagged {
        if let Some(idx) = explicit {
            if let Some(c) = choices.get_mut(idx) {
                c.is_correct = true;
            }
        }
    }
    if choices.iter().filter(|c| c.is_correct).count() != 1 {
        return Err("missing-correct");
    }
    Ok(choices)
}

fn parse_marks(v: Option<&Value>) -> Result<u32, &'static str> {
    match v {
        None | Some(Value::Null) => Ok(1),
        Some(Value::Number(n)) => n.as_u64().and_then(|m| u32::try_from(m).ok()).ok_or("malformed-item"),
        Some(Value::String(s)) => s.trim().parse().map_err(|_| "malformed-item"),
        Some(_) => Err("malformed-item"),
    }
}

fn parse_parts(obj: &Map<String, Value>, stem: &str) -> Result<Vec<SaqPart>, &'static str> {
    match obj.get("parts") {
        None | Some(Value::Null) => Ok(vec![SaqPart {
            index: 0,
            prompt: stem.to_string(),
            expected_answer: text_field(obj, &["expected_answer", "answer"]).unwrap_or_default().to_string(),
            marks: parse_marks(obj.get("marks"))?,
        }]),
        Some(Value::Array(raw)) => raw
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let o = p.as_object().ok_or("malformed-item")?;
                Ok(SaqPart {
                    index: i as u32,
                    prompt: text_field(o, &["prompt", "text", "question"]).ok_or("malformed-item")?.to_string(),
                    expected_answer: text_field(o, &["expected_answer", "answer"]).unwrap_or_default().to_string(),
                    marks: parse_marks(o.get("marks"))?,
                })
            })
            .collect(),
        Some(_) => Err("malformed-item"),
    }
}

fn parse_item(item: &Value, ctx: &ParseContext) -> ItemResult {
    let obj = item.as_object().ok_or("malformed-item")?;
    let is_mcq = parse_kind(obj).ok_or("bad-kind")?;
    let stem = text_field(obj, &["stem", "question"]).map(str::trim).unwrap_or_default();
    if stem.is_empty() {
        return Err("missing-stem");
    }

    let body = if is_mcq {
        QuestionBody::Mcq { choices: parse_choices(obj)? }
    } else {
        QuestionBody::Saq { parts: parse_parts(obj, stem)? }
    };

    let explanation = match obj.get("explanation") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if s.trim().is_empty() => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err("malformed-item"),
    };
    let concept_names = match obj.get("concepts") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(names)) => names.iter().filter_map(Value::as_str).map(str::to_string).collect(),
        Some(_) => return Err("malformed-item"),
    };
    let confidence = match obj.get("confidence") {
        None | Some(Value::Null) => DEFAULT_MODEL_CONFIDENCE,
        Some(v) => v.as_f64().ok_or("malformed-item")?,
    };
    let source_offsets = obj.get("source_offsets").and_then(|v| {
        let arr = v.as_array()?;
        match arr.as_slice() {
            [s, e] => Some([s.as_u64()? as usize, e.as_u64()? as usize]),
            _ => None,
        }
    });

    Ok(DraftQuestion {
        content: QuestionContent { stem: stem.to_string(), explanation, body },
        concept_ids: Default::default(),
        concept_names,
        provenance: Provenance {
            source_document_id: ctx.document_id.clone(),
            generator: ctx.generator,
            confidence,
            created_at: ctx.created_at,
        },
        source_span: None,
        source_offsets,
    })
}

/// Parses a provider reply into drafts and rejected fragments. Accepts a
/// bare array of items, an object holding `items` or `questions`, or a
/// single item object, optionally wrapped in a code fence. Never fails:
/// unusable input becomes a single `malformed-item` rejection.
pub fn parse_model_output(raw: &str, ctx: &ParseContext) -> SynthesisOutput {
    let mut out = SynthesisOutput {
        drafts: Vec::new(),
        rejected: Vec::new(),
        provider_name: ctx.provider_name.clone(),
        model_version: ctx.model_version.clone(),
        latency_ms: ctx.latency_ms,
    };
    let malformed = |fragment: &str| RejectedFragment {
        raw_fragment: truncate(fragment),
        reason: "malformed-item".to_string(),
    };

    let body = unfence(raw);
    let Ok(value) = serde_json::from_str::<Value>(body) else {
        out.rejected.push(malformed(raw));
        return out;
    };

    let items: Vec<Value> = match value {
        Value::Array(items) => items,
        Value::Object(mut obj) => {
            if let Some(Value::Array(passed)) = obj.remove("rejected") {
                for r in passed {
                    let fragment = r.get("fragment").or_else(|| r.get("raw_fragment")).and_then(Value::as_str);
                    let reason = r.get("reason").and_then(Value::as_str);
                    match (fragment, reason) {
                        (Some(f), Some(reason)) => out.rejected.push(RejectedFragment {
                            raw_fragment: truncate(f),
                            reason: reason.to_string(),
                        }),
                        _ => out.rejected.push(malformed(&r.to_string())),
                    }
                }
            }
            match obj.remove("items").or_else(|| obj.remove("questions")) {
                Some(Value::Array(items)) => items,
                Some(other) => {
                    out.rejected.push(malformed(&other.to_string()));
                    return out;
                }
                None if obj.contains_key("stem") || obj.contains_key("question") => vec![Value::Object(obj)],
                None => {
                    out.rejected.push(malformed(raw));
                    return out;
                }
            }
        }
        _ => {
            out.rejected.push(malformed(raw));
            return out;
        }
    };

    for item in items {
        match parse_item(&item, ctx) {
            Ok(draft) => out.drafts.push(draft),
            Err(reason) => out.rejected.push(RejectedFragment {
                raw_fragment: truncate(&item.to_string()),
                reason: reason.to_string(),
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::QuestionKind;
    use proptest::prelude::*;

    fn parse(raw: &str) -> SynthesisOutput {
        parse_model_output(raw, &ParseContext::default())
    }

    fn reasons(out: &SynthesisOutput) -> Vec<&str> {
        out.rejected.iter().map(|r| r.reason.as_str()).collect()
    }

    const ONE_MCQ: &str = r#"[{"kind":"mcq","stem":"Which drug treats malaria?",
        "choices":[{"text":"Chloroquine","is_correct":false},{"text":"Artemether-lumefantrine","is_correct":true},
                   {"text":"Quinine","is_correct":false}],
        "explanation":"First-line per national guidelines.","concepts":["Antimalarials"],"confidence":0.87}]"#;

    #[test]
    fn well_formed_mcq() {
        let out = parse(ONE_MCQ);
        assert_eq!(out.drafts.len(), 1);
        assert!(out.rejected.is_empty());
        let d = &out.drafts[0];
        assert_eq!(d.content.kind(), QuestionKind::Mcq);
        assert_eq!(d.content.correct_index(), Some(1));
        assert_eq!(d.provenance.confidence, 0.87);
        assert_eq!(d.concept_names, vec!["Antimalarials"]);
        assert_eq!(d.content.explanation.as_deref(), Some("First-line per national guidelines."));
    }

    #[test]
    fn two_correct_choices_are_rejected() {
        let raw = r#"[{"kind":"mcq","stem":"Pick","choices":[{"text":"a","is_correct":true},{"text":"b","is_correct":true}]}]"#;
        let out = parse(raw);
        assert!(out.drafts.is_empty());
        assert_eq!(reasons(&out), vec!["missing-correct"]);
    }

    #[test]
    fn prose_reply_is_one_malformed_item() {
        let out = parse("I'm sorry, I could not find any questions in this document.");
        assert!(out.drafts.is_empty());
        assert_eq!(reasons(&out), vec!["malformed-item"]);
    }

    #[test]
    fn fenced_object_with_answer_letter() {
        let raw = "Here you go:\n```json\n{\"questions\":[{\"type\":\"MCQ\",\"question\":\"Q?\",\"options\":[\"x\",\"y\",\"z\"],\"answer\":\"C\"}]}\n```\n";
        let out = parse(raw);
        assert_eq!(out.drafts.len(), 1);
        assert_eq!(out.drafts[0].content.correct_index(), Some(2));
        assert_eq!(out.drafts[0].provenance.confidence, DEFAULT_MODEL_CONFIDENCE);
    }

    #[test]
    fn item_level_failures_are_isolated() {
        let raw = r#"[
            {"kind":"essay","stem":"x"},
            {"kind":"mcq","stem":"  ","choices":["a","b"],"answer":0},
            {"kind":"saq","stem":"Explain.","parts":[{"prompt":"why","marks":3}]},
            {"kind":"mcq","stem":"No answer","choices":["a","b"]},
            17
        ]"#;
        let out = parse(raw);
        assert_eq!(out.drafts.len(), 1);
        assert_eq!(out.drafts[0].content.parts()[0].marks, 3);
        assert_eq!(reasons(&out), vec!["bad-kind", "missing-stem", "missing-correct", "malformed-item"]);
    }

    #[test]
    fn saq_without_parts_uses_stem() {
        let out = parse(r#"{"kind":"saq","stem":"Define shock.","marks":5,"answer":"Inadequate perfusion"}"#);
        let part = &out.drafts[0].content.parts()[0];
        assert_eq!((part.prompt.as_str(), part.marks), ("Define shock.", 5));
        assert_eq!(part.expected_answer, "Inadequate perfusion");
    }

    #[test]
    fn provider_rejections_pass_through() {
        let raw = r#"{"items":[],"rejected":[{"fragment":"3. Gap?","reason":"non-contiguous-options"}]}"#;
        let out = parse(raw);
        assert_eq!(reasons(&out), vec!["non-contiguous-options"]);
    }

    #[test]
    fn context_fills_provenance() {
        let ctx = ParseContext {
            generator: Generator::RuleBased,
            document_id: Some("doc-1".into()),
            ..ParseContext::default()
        };
        let out = parse_model_output(ONE_MCQ, &ctx);
        assert_eq!(out.drafts[0].provenance.generator, Generator::RuleBased);
        assert_eq!(out.drafts[0].provenance.source_document_id, Some("doc-1".into()));
    }

    fn arb_json() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i32>().prop_map(|n| Value::from(n)),
            "[a-z ]{0,6}".prop_map(Value::from),
            prop_oneof![Just("mcq"), Just("saq"), Just("MCQ"), Just("x")].prop_map(Value::from),
        ];
        leaf.prop_recursive(3, 24, 5, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..5).prop_map(Value::Array),
                prop::collection::btree_map(
                    prop_oneof![
                        Just("kind".to_string()), Just("stem".to_string()), Just("choices".to_string()),
                        Just("parts".to_string()), Just("text".to_string()), Just("is_correct".to_string()),
                        Just("answer".to_string()), Just("marks".to_string()), Just("confidence".to_string()),
                        "[a-z]{1,4}",
                    ],
                    inner,
                    0..6,
                )
                .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn arbitrary_text_never_panics(raw in "\\PC{0,200}") {
            let out = parse(&raw);
            prop_assert!(out.drafts.len() + out.rejected.len() >= 1 || raw.trim().starts_with('['));
        }

        #[test]
        fn every_top_level_item_is_accounted_for(items in prop::collection::vec(arb_json(), 0..8)) {
            let raw = Value::Array(items.clone()).to_string();
            let out = parse(&raw);
            prop_assert_eq!(out.drafts.len() + out.rejected.len(), items.len());
        }
    }
}
