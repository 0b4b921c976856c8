//! Deterministic canonicalizers: numeric extraction, option matching, binary
//! pass/fail and verbatim text.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Numeric,
    Option,
    Binary,
    Verbatim,
    Invalid,
}

/// Normalized answer identity. Equality is on `(kind, key)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CanonicalClass {
    pub kind: ClassKind,
    pub key: String,
}

pub const INVALID_KEY: &str = "INVALID";

impl CanonicalClass {
    pub fn new(kind: ClassKind, key: impl Into<String>) -> Self {
        CanonicalClass {
            kind,
            key: key.into(),
        }
    }

    pub fn invalid() -> Self {
        CanonicalClass::new(ClassKind::Invalid, INVALID_KEY)
    }

    pub fn is_invalid(&self) -> bool {
        self.kind == ClassKind::Invalid
    }
}

impl fmt::Display for CanonicalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ClassKind::Numeric => "numeric",
            ClassKind::Option => "option",
            ClassKind::Binary => "binary",
            ClassKind::Verbatim => "verbatim",
            ClassKind::Invalid => "invalid",
        };
        write!(f, "{kind}:{}", self.key)
    }
}

/// Maps raw answer text to a canonical class.
///
/// Implementations must be deterministic per call. `canonicalize_batch`
/// exists for canonicalizers whose output depends on the whole batch
/// (clustering); the default maps each answer independently.
pub trait Canonicalizer: Send + Sync {
    fn name(&self) -> &str;

    fn canonicalize(&self, text: &str) -> CanonicalClass;

    fn canonicalize_batch(&self, texts: &[&str]) -> Vec<CanonicalClass> {
        texts.iter().map(|t| self.canonicalize(t)).collect()
    }
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // grouped thousands first so "1,234" is one token, then plain digits,
        // then a bare fractional part like ".5"
        Regex::new(r"[+\-\u{2212}]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|[+\-\u{2212}]?\.\d+")
            .expect("static regex")
    })
}

/// Minimal decimal form: no sign for zero, no leading zeros, no trailing
/// fractional zeros, no thousands separators.
fn normalize_decimal(token: &str) -> String {
    let (negative, body) = match token.chars().next() {
        Some('-') | Some('\u{2212}') => (true, &token[token.chars().next().unwrap().len_utf8()..]),
        Some('+') => (false, &token[1..]),
        _ => (false, token),
    };
    let body: String = body.chars().filter(|c| *c != ',').collect();
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body.as_str(), ""),
    };
    let int_part = int_part.trim_start_matches('0');
    let frac_part = frac_part.trim_end_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    let mut out = String::with_capacity(body.len() + 1);
    let is_zero = int_part == "0" && frac_part.is_empty();
    if negative && !is_zero {
        out.push('-');
    }
    out.push_str(int_part);
    if !frac_part.is_empty() {
        out.push('.');
        out.push_str(frac_part);
    }
    out
}

/// Extract the answer number: the first number after the last `####`
/// delimiter when present, otherwise the last number in the text.
pub fn canonicalize_numeric(text: &str) -> CanonicalClass {
    let re = number_regex();
    let token = match text.rfind("####") {
        Some(pos) => re.find(&text[pos + 4..]).map(|m| m.as_str()),
        None => re.find_iter(text).last().map(|m| m.as_str()),
    };
    match token {
        Some(t) => CanonicalClass::new(ClassKind::Numeric, normalize_decimal(t)),
        None => CanonicalClass::invalid(),
    }
}

/// Case-fold, strip punctuation, collapse whitespace.
pub fn normalize_text(text: &str) -> String {
    let folded: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn leading_letter(text: &str) -> Option<char> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"^\s*\(?([A-Z])(?:[\).:]|\s*$)").expect("static regex")
    });
    re.captures(text)
        .and_then(|c| c.get(1))
        .and_then(|m| m.as_str().chars().next())
}

fn contains_phrase(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let h = format!(" {haystack} ");
    let n = format!(" {needle} ");
    h.contains(&n)
}

/// Multiple-choice canonicalizer. Keys are option indices.
#[derive(Debug, Clone)]
pub struct OptionCanonicalizer {
    options: Vec<String>,
    normalized: Vec<String>,
}

impl OptionCanonicalizer {
    pub fn new(options: &[String]) -> Result<Self> {
        if options.is_empty() {
            return Err(Error::input("option canonicalizer needs at least one option"));
        }
        if options.len() > 26 {
            return Err(Error::input("at most 26 options (A-Z) are supported"));
        }
        let normalized: Vec<String> = options.iter().map(|o| normalize_text(o)).collect();
        let mut seen = HashMap::new();
        for (i, n) in normalized.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::input(format!("option {i} is empty after normalization")));
            }
            if let Some(j) = seen.insert(n.clone(), i) {
                return Err(Error::input(format!(
                    "options {j} and {i} coincide after normalization"
                )));
            }
        }
        Ok(OptionCanonicalizer {
            options: options.to_vec(),
            normalized,
        })
    }

    pub fn options(&self) -> &[String] {
        &self.options
    }

    fn class(index: usize) -> CanonicalClass {
        CanonicalClass::new(ClassKind::Option, index.to_string())
    }
}

impl Canonicalizer for OptionCanonicalizer {
    fn name(&self) -> &str {
        "option"
    }

    fn canonicalize(&self, text: &str) -> CanonicalClass {
        if let Some(letter) = leading_letter(text) {
            let idx = (letter as u8 - b'A') as usize;
            return if idx < self.options.len() {
                Self::class(idx)
            } else {
                CanonicalClass::invalid()
            };
        }
        let norm = normalize_text(text);
        if let Some(i) = self.normalized.iter().position(|o| *o == norm) {
            return Self::class(i);
        }
        let matched: Vec<usize> = (0..self.normalized.len())
            .filter(|&i| contains_phrase(&norm, &self.normalized[i]))
            .collect();
        // an option nested inside a longer matched option is not a separate hit
        let maximal: Vec<usize> = matched
            .iter()
            .copied()
            .filter(|&i| {
                !matched.iter().any(|&j| {
                    j != i && contains_phrase(&self.normalized[j], &self.normalized[i])
                })
            })
            .collect();
        match maximal.as_slice() {
            [only] => Self::class(*only),
            _ => CanonicalClass::invalid(),
        }
    }
}

pub fn canonicalize_binary(label: bool) -> CanonicalClass {
    CanonicalClass::new(ClassKind::Binary, if label { "pass" } else { "fail" })
}

/// Pass/fail labels arriving as text (e.g. from a test runner).
#[derive(Debug, Clone, Copy, Default)]
pub struct BinaryCanonicalizer;

impl Canonicalizer for BinaryCanonicalizer {
    fn name(&self) -> &str {
        "binary"
    }

    fn canonicalize(&self, text: &str) -> CanonicalClass {
        match normalize_text(text).as_str() {
            "pass" | "passed" | "true" | "1" | "yes" | "correct" => canonicalize_binary(true),
            "fail" | "failed" | "false" | "0" | "no" | "incorrect" => canonicalize_binary(false),
            _ => CanonicalClass::invalid(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NumericCanonicalizer;

impl Canonicalizer for NumericCanonicalizer {
    fn name(&self) -> &str {
        "numeric"
    }

    fn canonicalize(&self, text: &str) -> CanonicalClass {
        canonicalize_numeric(text)
    }
}

/// Trimmed text with collapsed internal whitespace; empty text is invalid.
#[derive(Debug, Clone, Copy, Default)]
pub struct VerbatimCanonicalizer;

impl Canonicalizer for VerbatimCanonicalizer {
    fn name(&self) -> &str {
        "verbatim"
    }

    fn canonicalize(&self, text: &str) -> CanonicalClass {
        let key = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if key.is_empty() {
            CanonicalClass::invalid()
        } else {
            CanonicalClass::new(ClassKind::Verbatim, key)
        }
    }
}

/// Canonicalizer selected by name in dataset files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanonicalizerKind {
    Numeric,
    Option,
    Binary,
    Verbatim,
}

impl CanonicalizerKind {
    pub fn build(self, options: Option<&[String]>) -> Result<Box<dyn Canonicalizer>> {
        Ok(match self {
            CanonicalizerKind::Numeric => Box::new(NumericCanonicalizer),
            CanonicalizerKind::Binary => Box::new(BinaryCanonicalizer),
            CanonicalizerKind::Verbatim => Box::new(VerbatimCanonicalizer),
            CanonicalizerKind::Option => {
                let options =
                    options.ok_or_else(|| Error::input("option canonicalizer requires options"))?;
                Box::new(OptionCanonicalizer::new(options)?)
            }
        })
    }

    /// Kind of the classes this canonicalizer emits for valid answers.
    pub fn class_kind(self) -> ClassKind {
        match self {
            CanonicalizerKind::Numeric => ClassKind::Numeric,
            CanonicalizerKind::Option => ClassKind::Option,
            CanonicalizerKind::Binary => ClassKind::Binary,
            CanonicalizerKind::Verbatim => ClassKind::Verbatim,
        }
    }
}

impl std::str::FromStr for CanonicalizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "numeric" => Ok(CanonicalizerKind::Numeric),
            "option" => Ok(CanonicalizerKind::Option),
            "binary" => Ok(CanonicalizerKind::Binary),
            "verbatim" => Ok(CanonicalizerKind::Verbatim),
            other => Err(Error::input(format!(
                "unknown canonicalizer {other:?} (expected numeric|option|binary|verbatim)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> Vec<String> {
        ["alpha", "beta", "gamma", "delta"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn numeric_examples() {
        assert_eq!(canonicalize_numeric("The answer is 42."), CanonicalClass::new(ClassKind::Numeric, "42"));
        assert_eq!(canonicalize_numeric("#### 1,234.0"), CanonicalClass::new(ClassKind::Numeric, "1234"));
        assert!(canonicalize_numeric("no idea").is_invalid());
    }

    #[test]
    fn numeric_normalization_edge_cases() {
        let key = |s: &str| canonicalize_numeric(s).key;
        assert_eq!(key("-0"), "0");
        assert_eq!(key("-0.000"), "0");
        assert_eq!(key("+7"), "7");
        assert_eq!(key("\u{2212}12"), "-12");
        assert_eq!(key("007.50"), "7.5");
        assert_eq!(key(".5"), "0.5");
        assert_eq!(key("first 3 then 9"), "9");
        assert_eq!(key("steps 3, 4 #### 18 dollars, or 20"), "18");
        assert_eq!(key("$12,000,000"), "12000000");
    }

    #[test]
    fn option_examples() {
        let c = OptionCanonicalizer::new(&opts()).unwrap();
        assert_eq!(c.canonicalize("B"), CanonicalClass::new(ClassKind::Option, "1"));
        assert_eq!(c.canonicalize("The answer is gamma."), CanonicalClass::new(ClassKind::Option, "2"));
        assert!(c.canonicalize("E").is_invalid());
        assert_eq!(c.canonicalize("(D) delta").key, "3");
        assert!(c.canonicalize("alpha or beta").is_invalid());
        assert!(c.canonicalize("none of these").is_invalid());
        // a capitalised article is not an option letter
        assert_eq!(c.canonicalize("A delta, surely").key, "3");
    }

    #[test]
    fn option_nested_texts_are_not_ambiguous() {
        let options: Vec<String> = ["beta", "beta blocker"].iter().map(|s| s.to_string()).collect();
        let c = OptionCanonicalizer::new(&options).unwrap();
        assert_eq!(c.canonicalize("it is a beta blocker").key, "1");
        assert_eq!(c.canonicalize("plain beta here").key, "0");
    }

    #[test]
    fn option_rejects_bad_option_lists() {
        assert!(OptionCanonicalizer::new(&[]).is_err());
        let dup: Vec<String> = ["Alpha!", "alpha"].iter().map(|s| s.to_string()).collect();
        assert!(OptionCanonicalizer::new(&dup).is_err());
    }

    #[test]
    fn binary_examples_and_round_trip() {
        assert_eq!(canonicalize_binary(true).key, "pass");
        assert_eq!(canonicalize_binary(false).key, "fail");
        let b = BinaryCanonicalizer;
        for label in [true, false] {
            let c = canonicalize_binary(label);
            assert_eq!(b.canonicalize(&c.key), c);
        }
        assert!(b.canonicalize("maybe").is_invalid());
    }

    #[test]
    fn verbatim_collapses_whitespace() {
        let v = VerbatimCanonicalizer;
        assert_eq!(v.canonicalize("  Paris \n France ").key, "Paris France");
        assert!(v.canonicalize("   ").is_invalid());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("numeric".parse::<CanonicalizerKind>().unwrap(), CanonicalizerKind::Numeric);
        assert!("fuzzy".parse::<CanonicalizerKind>().is_err());
        assert!(CanonicalizerKind::Option.build(None).is_err());
    }
}
