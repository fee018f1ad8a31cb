use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Serialize, Serializer};

use super::{normalize_text, ConceptId, QuestionBody, QuestionContent};

pub const MIN_CHOICES: usize = 2;
pub const MAX_CHOICES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyStem,
    NoConcepts,
    ConfidenceOutOfRange,
    TooFewChoices(usize),
    TooManyChoices(usize),
    NonContiguousChoices,
    NoCorrectChoice,
    MultipleCorrectChoices(usize),
    DuplicateChoiceText,
    SaqNoParts,
    NonContiguousParts,
    ZeroMarks,
    FingerprintMismatch,
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::EmptyStem => "empty-stem",
            Violation::NoConcepts => "no-concepts",
            Violation::ConfidenceOutOfRange => "confidence-out-of-range",
            Violation::TooFewChoices(_) => "too-few-choices",
            Violation::TooManyChoices(_) => "too-many-choices",
            Violation::NonContiguousChoices => "non-contiguous-choices",
            Violation::NoCorrectChoice => "no-correct-choice",
            Violation::MultipleCorrectChoices(_) => "multiple-correct-choices",
            Violation::DuplicateChoiceText => "duplicate-choice-text",
            Violation::SaqNoParts => "saq-no-parts",
            Violation::NonContiguousParts => "non-contiguous-parts",
            Violation::ZeroMarks => "zero-marks",
            Violation::FingerprintMismatch => "fingerprint-mismatch",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl Serialize for Violation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn codes(&self) -> Vec<&'static str> {
        self.violations.iter().map(Violation::code).collect()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.violations.iter().any(|v| v.code() == code)
    }
}

fn indices_contiguous(indices: impl Iterator<Item = u32>) -> bool {
    indices.enumerate().all(|(pos, idx)| pos as u32 == idx)
}

/// Collects every structural invariant a question violates. Referential
/// checks (paper, course and concepts exist) are the store's job.
pub fn validate_question(
    content: &QuestionContent,
    concept_ids: &BTreeSet<ConceptId>,
    confidence: f64,
) -> ValidationReport {
    let mut violations = Vec::new();

    if content.stem.trim().is_empty() {
        violations.push(Violation::EmptyStem);
    }
    if concept_ids.is_empty() {
        violations.push(Violation::NoConcepts);
    }
    if !(0.0..=1.0).contains(&confidence) {
        violations.push(Violation::ConfidenceOutOfRange);
    }

    match &content.body {
        QuestionBody::Mcq { choices } => {
            if choices.len() < MIN_CHOICES {
                violations.push(Violation::TooFewChoices(choices.len()));
            }
            if choices.len() > MAX_CHOICES {
                violations.push(Violation::TooManyChoices(choices.len()));
            }
            if !indices_contiguous(choices.iter().map(|c| c.index)) {
                violations.push(Violation::NonContiguousChoices);
            }
            match choices.iter().filter(|c| c.is_correct).count() {
                0 => violations.push(Violation::NoCorrectChoice),
                1 => {}
                n => violations.push(Violation::MultipleCorrectChoices(n)),
            }
            let mut seen = HashSet::new();
            if !choices.iter().all(|c| seen.insert(normalize_text(&c.text))) {
                violations.push(Violation::DuplicateChoiceText);
            }
        }
        QuestionBody::Saq { parts } => {
            if parts.is_empty() {
                violations.push(Violation::SaqNoParts);
            }
            if !indices_contiguous(parts.iter().map(|p| p.index)) {
                violations.push(Violation::NonContiguousParts);
            }
            if parts.iter().any(|p| p.marks == 0) {
                violations.push(Violation::ZeroMarks);
            }
        }
    }

    ValidationReport { violations }
}
