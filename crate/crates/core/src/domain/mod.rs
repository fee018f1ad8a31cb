//! Core entities shared by every other module.
//!
//! Everything here is a plain value type. Referential checks (does this
//! course exist?) live in the store; structural checks live in
//! [`validate`].

mod text;
mod validate;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use text::{normalize_text, question_fingerprint, Fingerprint};
pub use validate::{validate_question, ValidationReport, Violation, MAX_CHOICES, MIN_CHOICES};

macro_rules! opaque_id {
    ($($name:ident),* $(,)?) => {$(
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new() -> Self {
                Self(uuid::Uuid::new_v4().to_string())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl Default for $name {
            fn default() -> Self {
                Self::new()
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    )*};
}

opaque_id!(
    InstitutionId,
    CourseId,
    ConceptId,
    PastPaperId,
    QuestionId,
    UserId,
    DocumentId,
    JobId,
    SessionId,
    FlagId,
);

/// Implements `as_str`/`FromStr` for a fieldless enum with fixed wire names.
macro_rules! wire_enum {
    ($name:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text,)*
                }
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)*
                    other => Err(format!("unknown {} {other:?}", stringify!($name))),
                }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}
pub(crate) use wire_enum;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Institution {
    pub id: InstitutionId,
    pub name: String,
    pub country_code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Course {
    pub id: CourseId,
    pub code: String,
    pub title: String,
    #[serde(default)]
    pub institution_ids: BTreeSet<InstitutionId>,
    /// Concept assigned to questions that do not name their own.
    #[serde(default)]
    pub default_concept_id: Option<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub name: String,
    #[serde(default)]
    pub parent_id: Option<ConceptId>,
}

/// True when following parent links from any concept revisits a concept.
pub fn concepts_have_cycle(concepts: &[Concept]) -> bool {
    let parents: HashMap<&ConceptId, Option<&ConceptId>> =
        concepts.iter().map(|c| (&c.id, c.parent_id.as_ref())).collect();
    for start in concepts {
        let mut seen = BTreeSet::new();
        let mut cur = Some(&start.id);
        while let Some(id) = cur {
            if !seen.insert(id) {
                return true;
            }
            cur = parents.get(id).copied().flatten();
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PastPaper {
    pub id: PastPaperId,
    pub course_id: CourseId,
    pub year: i32,
    pub title: String,
    pub source_document_id: Option<DocumentId>,
}

/// Title and year identifying a past paper within a course.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PaperMeta {
    pub title: String,
    pub year: i32,
}

pub const MIN_PAPER_YEAR: i32 = 1900;

impl PaperMeta {
    pub fn year_is_valid(&self, current_year: i32) -> bool {
        (MIN_PAPER_YEAR..=current_year + 1).contains(&self.year)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Faculty,
    Admin,
}

wire_enum!(Role { Student => "student", Faculty => "faculty", Admin => "admin" });

impl Role {
    /// Faculty and admins review content; students only consume it.
    pub fn can_review(self) -> bool {
        matches!(self, Role::Faculty | Role::Admin)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub id: UserId,
    pub role: Role,
    pub institution_id: InstitutionId,
    pub display_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Mcq,
    Saq,
}

wire_enum!(QuestionKind { Mcq => "mcq", Saq => "saq" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionState {
    Draft,
    Published,
    Flagged,
    Retired,
}

wire_enum!(QuestionState {
    Draft => "draft",
    Published => "published",
    Flagged => "flagged",
    Retired => "retired",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    RuleBased,
    Model,
    Manual,
}

wire_enum!(Generator { RuleBased => "rule-based", Model => "model", Manual => "manual" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_document_id: Option<DocumentId>,
    pub generator: Generator,
    pub confidence: f64,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqChoice {
    pub index: u32,
    pub text: String,
    pub is_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaqPart {
    pub index: u32,
    pub prompt: String,
    #[serde(default)]
    pub expected_answer: String,
    pub marks: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QuestionBody {
    Mcq { choices: Vec<McqChoice> },
    Saq { parts: Vec<SaqPart> },
}

/// The content-bearing part of a question: what the fingerprint covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionContent {
    pub stem: String,
    #[serde(default)]
    pub explanation: Option<String>,
    #[serde(flatten)]
    pub body: QuestionBody,
}

impl QuestionContent {
    pub fn mcq(stem: impl Into<String>, choices: &[&str], correct: usize) -> Self {
        Self {
            stem: stem.into(),
            explanation: None,
            body: QuestionBody::Mcq {
                choices: choices
                    .iter()
                    .enumerate()
                    .map(|(i, t)| McqChoice {
                        index: i as u32,
                        text: t.to_string(),
                        is_correct: i == correct,
                    })
                    .collect(),
            },
        }
    }

    pub fn saq(stem: impl Into<String>, parts: &[(&str, u32)]) -> Self {
        Self {
            stem: stem.into(),
            explanation: None,
            body: QuestionBody::Saq {
                parts: parts
                    .iter()
                    .enumerate()
                    .map(|(i, (prompt, marks))| SaqPart {
                        index: i as u32,
                        prompt: prompt.to_string(),
                        expected_answer: String::new(),
                        marks: *marks,
                    })
                    .collect(),
            },
        }
    }

    pub fn kind(&self) -> QuestionKind {
        match self.body {
            QuestionBody::Mcq { .. } => QuestionKind::Mcq,
            QuestionBody::Saq { .. } => QuestionKind::Saq,
        }
    }

    pub fn choices(&self) -> &[McqChoice] {
        match &self.body {
            QuestionBody::Mcq { choices } => choices,
            QuestionBody::Saq { .. } => &[],
        }
    }

    pub fn parts(&self) -> &[SaqPart] {
        match &self.body {
            QuestionBody::Saq { parts } => parts,
            QuestionBody::Mcq { .. } => &[],
        }
    }

    pub fn correct_index(&self) -> Option<u32> {
        self.choices().iter().find(|c| c.is_correct).map(|c| c.index)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        question_fingerprint(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: QuestionId,
    pub past_paper_id: PastPaperId,
    pub course_id: CourseId,
    pub concept_ids: BTreeSet<ConceptId>,
    pub state: QuestionState,
    pub provenance: Provenance,
    pub fingerprint: Fingerprint,
    #[serde(flatten)]
    pub content: QuestionContent,
}

impl Question {
    /// Structural validation plus the fingerprint-matches-content invariant.
    pub fn validate(&self) -> ValidationReport {
        let mut report =
            validate_question(&self.content, &self.concept_ids, self.provenance.confidence);
        if self.fingerprint != self.content.fingerprint() {
            report.violations.push(Violation::FingerprintMismatch);
        }
        report
    }
}

/// Where a draft came from: 1-based page, 0-based paragraph within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceLocation {
    pub page: u32,
    pub paragraph: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    pub start: SourceLocation,
    pub end: SourceLocation,
}

/// A generated question not yet accepted into the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftQuestion {
    #[serde(flatten)]
    pub content: QuestionContent,
    /// Concepts resolved to ids; filled before validation.
    #[serde(default)]
    pub concept_ids: BTreeSet<ConceptId>,
    /// Concept names as the generator reported them.
    #[serde(default)]
    pub concept_names: Vec<String>,
    pub provenance: Provenance,
    #[serde(default)]
    pub source_span: Option<SourceSpan>,
    /// Byte range of the source text within the window it was generated
    /// from, when the generator reports one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_offsets: Option<[usize; 2]>,
}

impl DraftQuestion {
    pub fn validate(&self) -> ValidationReport {
        validate_question(&self.content, &self.concept_ids, self.provenance.confidence)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.content.fingerprint()
    }
}
