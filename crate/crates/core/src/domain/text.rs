use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use super::{QuestionBody, QuestionContent};

fn is_edge_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '¡' | '¿' | '«' | '»' | '\u{2010}'..='\u{2027}' | '\u{3000}'..='\u{303F}')
}

/// Canonical form used for comparison and dedupe: NFC, lowercase, single
/// spaces, no whitespace or punctuation at either end.
pub fn normalize_text(s: &str) -> String {
    let lowered: String = s.nfc().collect::<String>().to_lowercase().nfc().collect();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_whitespace() || is_edge_punctuation(c))
        .to_string()
}

/// SHA-256 content hash of a question.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.to_hex())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Fingerprint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|e| format!("bad fingerprint hex: {e}"))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| "fingerprint must be 32 bytes".to_string())?;
        Ok(Fingerprint(arr))
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

const FIELD_SEPARATOR: &str = "\u{1f}";

/// Hash of the normalized stem followed by the sorted normalized choice
/// texts (MCQ) or part prompts (SAQ), joined with the unit separator.
/// Ids, timestamps, confidence and correctness flags do not participate.
pub fn question_fingerprint(q: &QuestionContent) -> Fingerprint {
    let mut children: Vec<String> = match &q.body {
        QuestionBody::Mcq { choices } => choices.iter().map(|c| normalize_text(&c.text)).collect(),
        QuestionBody::Saq { parts } => parts.iter().map(|p| normalize_text(&p.prompt)).collect(),
    };
    children.sort();

    let mut hasher = Sha256::new();
    hasher.update(normalize_text(&q.stem).as_bytes());
    for child in &children {
        hasher.update(FIELD_SEPARATOR.as_bytes());
        hasher.update(child.as_bytes());
    }
    Fingerprint(hasher.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("What  is   X?"), "what is x");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("  Amoxicillin.  "), "amoxicillin");
        assert_eq!(normalize_text("«Quoted»"), "quoted");
        assert_eq!(normalize_text("a - b"), "a - b");
    }

    #[test]
    fn normalize_composes_unicode() {
        // "é" as e + combining acute vs precomposed.
        assert_eq!(normalize_text("Cafe\u{301}"), normalize_text("Café"));
    }

    // Reference value computed once with an independent implementation of
    // the hash recipe (sha256 over normalized stem and sorted normalized
    // children joined by U+001F).
    #[test]
    fn fixture_f1_reference_hash() {
        let f1 = QuestionContent::mcq(
            "Which drug is the first-line treatment for uncomplicated falciparum malaria in Kenya?",
            &["Chloroquine", "Artemether-lumefantrine", "Quinine", "Primaquine"],
            1,
        );
        assert_eq!(
            f1.fingerprint().to_hex(),
            "3ef6fc07578ccbc9ea9ff53ff3bcc1c5fd826338b281e8a3a747d5c5517ee6f4"
        );

        let saq = QuestionContent::saq("Define shock.", &[("Define shock.", 5)]);
        assert_eq!(
            saq.fingerprint().to_hex(),
            "2dfe05da8b07e57c1d1c1bbe3d0f13348b1a23bebc4ce4b56f6afe8fde011529"
        );
    }

    #[test]
    fn fingerprint_ignores_whitespace_and_case() {
        let a = QuestionContent::mcq("Which organism causes typhoid fever?", &["Salmonella Typhi", "E. coli"], 0);
        let b = QuestionContent::mcq("which  organism causes TYPHOID fever", &["salmonella   typhi", "e. coli"], 0);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn fingerprint_ignores_choice_order_and_correctness() {
        let a = QuestionContent::mcq("Q", &["x", "y", "z"], 0);
        let b = QuestionContent::mcq("Q", &["z", "x", "y"], 2);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = QuestionContent::mcq("Q", &["x", "y", "w"], 0);
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn fingerprint_hex_round_trips() {
        let fp = QuestionContent::saq("S", &[("p", 1)]).fingerprint();
        let parsed: Fingerprint = fp.to_hex().parse().unwrap();
        assert_eq!(parsed, fp);
        assert!("zz".parse::<Fingerprint>().is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC*") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn normalize_is_idempotent_on_mixed_input(s in "[ \t\n.,!?A-Za-zÀ-ÿ\u{300}-\u{36f}\u{2010}-\u{2027}]{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }
    }
}
