//! Citation-tag and numeric extraction from generated text.
//!
//! Numbers are canonicalized to exact decimals: thousands separators are
//! dropped, `%` divides by 100, a leading sign or accounting parentheses
//! make the value negative, currency symbols are ignored, and scale
//! suffixes (`K`, `M`, `B`, `T` and the words thousand/million/billion/
//! trillion) multiply by the matching power of ten.

use std::collections::BTreeSet;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CitationSet {
    pub tags: BTreeSet<String>,
}

impl CitationSet {
    pub fn new<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            tags: tags.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tags.iter().map(String::as_str)
    }
}

fn citation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // '[' , one lowercase letter, then two or more of [a-z0-9_], ']'
    RE.get_or_init(|| Regex::new(r"\[([a-z][a-z0-9_]{2,})\]").unwrap())
}

pub fn extract_citations(text: &str) -> CitationSet {
    CitationSet::new(citation_re().captures_iter(text).map(|c| c[1].to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalNumber {
    pub value: Decimal,
    /// Byte offsets of the matched text.
    pub source_span: (usize, usize),
    pub original_text: String,
}

const SCALE_WORDS: [(&str, u32); 4] = [("thousand", 3), ("million", 6), ("billion", 9), ("trillion", 12)];
const SCALE_SUFFIXES: [(&str, u32); 9] = [
    ("MM", 6),
    ("bn", 9),
    ("K", 3),
    ("k", 3),
    ("M", 6),
    ("m", 6),
    ("B", 9),
    ("b", 9),
    ("T", 12),
];

fn is_currency(c: char) -> bool {
    matches!(c, '$' | '€' | '£' | '¥')
}

fn is_sign(c: char) -> bool {
    matches!(c, '-' | '+' | '\u{2212}')
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

struct Scanner<'a> {
    text: &'a str,
    chars: Vec<(usize, char)>,
}

impl Scanner<'_> {
    fn at(&self, i: usize) -> Option<char> {
        self.chars.get(i).map(|&(_, c)| c)
    }

    fn byte(&self, i: usize) -> usize {
        self.chars.get(i).map_or(self.text.len(), |&(b, _)| b)
    }

    fn digits_from(&self, mut j: usize) -> usize {
        while self.at(j).is_some_and(|c| c.is_ascii_digit()) {
            j += 1;
        }
        j
    }

    /// Tries to read one number starting at char `i`. Returns the value and
    /// the char range it covers.
    fn parse_at(&self, i: usize) -> Option<(Decimal, usize, usize)> {
        if i > 0 {
            let prev = self.at(i - 1)?;
            if is_word_char(prev) {
                return None;
            }
            // "3.5.8": a fraction tail is not a fresh number
            if prev == '.' && i >= 2 && self.at(i - 2).is_some_and(|c| c.is_ascii_digit()) {
                return None;
            }
        }

        let mut j = i;
        let paren = self.at(j) == Some('(');
        if paren {
            j += 1;
        }
        let mut negative = false;
        let mut signed = false;
        let mut take_sign = |j: &mut usize, negative: &mut bool| {
            if let Some(c) = self.at(*j) {
                if is_sign(c) && !signed {
                    *negative = c != '+';
                    signed = true;
                    *j += 1;
                }
            }
        };
        take_sign(&mut j, &mut negative);
        if self.at(j).is_some_and(is_currency) {
            j += 1;
            take_sign(&mut j, &mut negative);
        }
        if !self.at(j).is_some_and(|c| c.is_ascii_digit()) {
            return None;
        }

        let mut digits = String::new();
        let int_end = self.digits_from(j);
        digits.extend(self.chars[j..int_end].iter().map(|&(_, c)| c));
        j = int_end;
        // thousands groups: ",ddd" not followed by another digit
        while self.at(j) == Some(',') {
            let group_end = self.digits_from(j + 1);
            if group_end - (j + 1) != 3 {
                break;
            }
            digits.extend(self.chars[j + 1..group_end].iter().map(|&(_, c)| c));
            j = group_end;
        }
        if self.at(j) == Some('.') && self.at(j + 1).is_some_and(|c| c.is_ascii_digit()) {
            let frac_end = self.digits_from(j + 1);
            digits.push('.');
            digits.extend(self.chars[j + 1..frac_end].iter().map(|&(_, c)| c));
            j = frac_end;
        }
        let mut value = Decimal::from_str(&digits).ok()?;

        let mut exponent = 0u32;
        if let Some((len, exp)) = self.scale_suffix(j) {
            exponent = exp;
            j += len;
        }
        if self.at(j) == Some('%') {
            value /= Decimal::ONE_HUNDRED;
            j += 1;
        }
        if exponent > 0 {
            value = value.checked_mul(Decimal::from(10u64.pow(exponent)))?;
        }

        let mut start = i;
        if paren {
            if self.at(j) == Some(')') {
                negative = true;
                j += 1;
            } else {
                start += 1;
            }
        }
        if negative {
            value = -value;
        }
        Some((value.normalize(), start, j))
    }

    /// Length in chars and power of ten of a scale marker at `j`.
    fn scale_suffix(&self, j: usize) -> Option<(usize, u32)> {
        let boundary = |k: usize| !self.at(k).is_some_and(is_word_char);
        let rest = &self.text[self.byte(j)..];
        for (suffix, exp) in SCALE_SUFFIXES {
            let len = suffix.chars().count();
            if rest.starts_with(suffix) && boundary(j + len) {
                return Some((len, exp));
            }
        }
        if self.at(j) == Some(' ') {
            let rest = &self.text[self.byte(j + 1)..];
            for (word, exp) in SCALE_WORDS {
                let len = word.len();
                if rest.len() >= len && rest[..len].eq_ignore_ascii_case(word) && boundary(j + 1 + len) {
                    return Some((len + 1, exp));
                }
            }
        }
        None
    }
}

/// Left-to-right extraction of every number in `text`. Spans that cannot
/// be read as a number are skipped.
pub fn canonicalize_numbers(text: &str) -> Vec<CanonicalNumber> {
    let scanner = Scanner {
        text,
        chars: text.char_indices().collect(),
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < scanner.chars.len() {
        match scanner.parse_at(i) {
            Some((value, start, end)) => {
                let span = (scanner.byte(start), scanner.byte(end));
                out.push(CanonicalNumber {
                    value,
                    source_span: span,
                    original_text: text[span.0..span.1].to_string(),
                });
                i = end;
            }
            None => {
                // skip the rest of a digit run so "12345" never yields "2345"
                let c = scanner.chars[i].1;
                i = if c.is_ascii_digit() { scanner.digits_from(i) } else { i + 1 };
            }
        }
    }
    out
}
