//! Source documents, snippet chunking and deterministic retrieval.
//!
//! Retrieval results are ordered by a total multi-key order:
//! score descending, then section priority ascending, then snippet id
//! ascending (bytewise), then chunk index ascending. Scores are exact
//! rationals so ties are decided without floating point.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::digest::sha256_hex;

/// Rank given to headings the priority table does not know.
pub const UNMAPPED_SECTION_RANK: u32 = 99;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("document {0} has an empty body")]
    EmptyDocument(String),
    #[error("invalid chunking: overlap {overlap} must be smaller than chunk size {chunk}")]
    InvalidChunking { chunk: usize, overlap: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("invalid doc_id {0:?}: expected nonempty lowercase alphanumeric/underscore")]
    InvalidDocId(String),
    #[error("content hash mismatch for {doc_id}: manifest {expected}, computed {actual}")]
    HashMismatch {
        doc_id: String,
        expected: String,
        actual: String,
    },
    #[error("duplicate snippet id {0}")]
    DuplicateSnippetId(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed corpus manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

fn valid_doc_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub title: String,
    pub fiscal_year: i32,
    pub body: String,
    pub content_hash: String,
    pub version_id: String,
}

impl SourceDocument {
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        fiscal_year: i32,
        body: impl Into<String>,
        version_id: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let doc_id = doc_id.into();
        if !valid_doc_id(&doc_id) {
            return Err(CorpusError::InvalidDocId(doc_id));
        }
        let body = body.into();
        Ok(Self {
            content_hash: sha256_hex(&body),
            doc_id,
            title: title.into(),
            fiscal_year,
            body,
            version_id: version_id.into(),
        })
    }

    /// Recomputes the body digest and compares it with the stored one.
    pub fn verify(&self) -> Result<(), CorpusError> {
        let actual = sha256_hex(&self.body);
        if actual != self.content_hash {
            return Err(CorpusError::HashMismatch {
                doc_id: self.doc_id.clone(),
                expected: self.content_hash.clone(),
                actual,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Snippet {
    pub snippet_id: String,
    pub doc_id: String,
    pub section_priority: u32,
    pub chunk_idx: u32,
    pub text: String,
    /// Half-open range of character (Unicode scalar) offsets into the body.
    pub char_span: (usize, usize),
}

/// Token-overlap score kept as an exact fraction `matched / total`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Score {
    pub matched: u32,
    pub total: u32,
}

impl Score {
    pub fn new(matched: u32, total: u32) -> Self {
        if total == 0 {
            return Self { matched: 0, total: 1 };
        }
        assert!(matched <= total, "score numerator exceeds denominator");
        Self { matched, total }
    }

    pub fn as_f64(&self) -> f64 {
        self.matched as f64 / self.total as f64
    }
}

impl PartialEq for Score {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Score {}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = self.matched as u64 * other.total as u64;
        let rhs = other.matched as u64 * self.total as u64;
        lhs.cmp(&rhs)
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.matched, self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredSnippet {
    pub snippet: Snippet,
    pub score: Score,
}

/// The retrieval order: score desc, section_priority asc, snippet_id asc
/// (bytewise), chunk_idx asc.
pub fn retrieval_order(a: &ScoredSnippet, b: &ScoredSnippet) -> Ordering {
    snippet_order(&a.score, &a.snippet, &b.score, &b.snippet)
}

fn snippet_order(sa: &Score, a: &Snippet, sb: &Score, b: &Snippet) -> Ordering {
    sb.cmp(sa)
        .then_with(|| a.section_priority.cmp(&b.section_priority))
        .then_with(|| a.snippet_id.as_bytes().cmp(b.snippet_id.as_bytes()))
        .then_with(|| a.chunk_idx.cmp(&b.chunk_idx))
}

pub fn order_snippets(mut candidates: Vec<ScoredSnippet>) -> Vec<ScoredSnippet> {
    candidates.sort_by(retrieval_order);
    candidates
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionRule {
    /// Item code such as `1A` or `7`, compared case-insensitively.
    pub item: String,
    /// Heading text matched when no item code is present.
    pub keywords: Vec<String>,
    pub rank: u32,
}

/// Maps 10-K headings to precedence ranks (lower = higher precedence).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionPriorityTable {
    pub rules: Vec<SectionRule>,
    pub default_rank: u32,
}

impl Default for SectionPriorityTable {
    fn default() -> Self {
        let rule = |item: &str, kw: &str, rank| SectionRule {
            item: item.to_string(),
            keywords: vec![kw.to_string()],
            rank,
        };
        Self {
            rules: vec![
                rule("1A", "risk factors", 1),
                rule("7", "management's discussion and analysis", 2),
                rule("8", "financial statements", 3),
                rule("1", "business", 4),
                rule("3", "legal proceedings", 5),
            ],
            default_rank: UNMAPPED_SECTION_RANK,
        }
    }
}

fn item_code_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*item\s+(\d+[a-z]?)\b").unwrap())
}

impl SectionPriorityTable {
    pub fn rank(&self, heading: &str) -> u32 {
        if let Some(caps) = item_code_re().captures(heading) {
            let code = &caps[1];
            return self
                .rules
                .iter()
                .find(|r| r.item.eq_ignore_ascii_case(code))
                .map_or(self.default_rank, |r| r.rank);
        }
        let normalized = heading.trim().trim_end_matches(['.', ':']).to_lowercase();
        if normalized.is_empty() {
            return self.default_rank;
        }
        self.rules
            .iter()
            .find(|r| r.keywords.iter().any(|k| normalized == k.to_lowercase()))
            .map_or(self.default_rank, |r| r.rank)
    }
}

/// Rank of a heading under the default precedence table.
pub fn assign_section_priority(heading: &str) -> u32 {
    SectionPriorityTable::default().rank(heading)
}

/// A heading is an `Item N.` line, or a short line that starts with an
/// uppercase letter and has no terminal punctuation.
fn is_heading_line(line: &str) -> bool {
    let t = line.trim();
    if t.is_empty() {
        return false;
    }
    if item_code_re().is_match(t) {
        return true;
    }
    t.chars().count() <= 60
        && t.chars().next().is_some_and(char::is_uppercase)
        && !t.ends_with(['.', ':', ';', ',', '?', '!'])
}

fn citation_tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[[a-z][a-z0-9_]{2,}\]").unwrap())
}

pub fn chunk_document(
    doc: &SourceDocument,
    chunk_chars: usize,
    overlap_chars: usize,
) -> Result<Vec<Snippet>, CorpusError> {
    chunk_document_with(doc, chunk_chars, overlap_chars, &SectionPriorityTable::default())
}

/// Fixed character windows with overlap. A window boundary never falls
/// strictly inside a citation tag: the window end is extended past the
/// closing bracket and the next window start is moved after it.
pub fn chunk_document_with(
    doc: &SourceDocument,
    chunk_chars: usize,
    overlap_chars: usize,
    table: &SectionPriorityTable,
) -> Result<Vec<Snippet>, CorpusError> {
    if doc.body.is_empty() {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }
    if chunk_chars == 0 || overlap_chars >= chunk_chars {
        return Err(CorpusError::InvalidChunking {
            chunk: chunk_chars,
            overlap: overlap_chars,
        });
    }

    let body = &doc.body;
    // byte offset of every char, plus one past the end
    let mut byte_at: Vec<usize> = body.char_indices().map(|(b, _)| b).collect();
    let n = byte_at.len();
    byte_at.push(body.len());
    let char_of = |byte: usize| byte_at.partition_point(|&b| b < byte);

    let tags: Vec<(usize, usize)> = citation_tag_re()
        .find_iter(body)
        .map(|m| (char_of(m.start()), char_of(m.end())))
        .collect();
    let enclosing_tag_end = |pos: usize| {
        tags.iter()
            .find(|&&(open, close)| open < pos && pos < close)
            .map(|&(_, close)| close)
    };

    // (char offset of heading line start, rank); rank applies from there on
    let mut headings: Vec<(usize, u32)> = Vec::new();
    let mut line_byte = 0usize;
    for line in body.split_inclusive('\n') {
        if is_heading_line(line) {
            headings.push((char_of(line_byte), table.rank(line.trim())));
        }
        line_byte += line.len();
    }
    let priority_at = |pos: usize| {
        let i = headings.partition_point(|&(start, _)| start <= pos);
        if i == 0 {
            table.default_rank
        } else {
            headings[i - 1].1
        }
    };

    let mut snippets = Vec::new();
    let mut start = 0usize;
    loop {
        let mut end = (start + chunk_chars).min(n);
        if let Some(close) = enclosing_tag_end(end) {
            end = close;
        }
        let idx = snippets.len() as u32;
        snippets.push(Snippet {
            snippet_id: format!("{}#{:05}", doc.doc_id, idx),
            doc_id: doc.doc_id.clone(),
            section_priority: priority_at(start),
            chunk_idx: idx,
            text: body[byte_at[start]..byte_at[end]].to_string(),
            char_span: (start, end),
        });
        if end == n {
            break;
        }
        let mut next = end.saturating_sub(overlap_chars).max(start + 1);
        if let Some(close) = enclosing_tag_end(next) {
            next = close;
        }
        start = next;
    }
    Ok(snippets)
}

/// Rebuilds a body from ordered snippets by dropping each overlap.
pub fn reconstruct(snippets: &[Snippet]) -> String {
    let mut out = String::new();
    let mut covered = 0usize;
    for s in snippets {
        let (start, end) = s.char_span;
        if end <= covered {
            continue;
        }
        let skip = covered.saturating_sub(start);
        out.extend(s.text.chars().skip(skip));
        covered = end;
    }
    out
}

/// Case-folded tokens split on non-alphanumeric characters.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A snippet with its token set computed once.
#[derive(Debug, Clone)]
pub struct IndexedSnippet {
    pub snippet: Snippet,
    tokens: BTreeSet<String>,
}

impl IndexedSnippet {
    pub fn new(snippet: Snippet) -> Self {
        let tokens = tokenize(&snippet.text);
        Self { snippet, tokens }
    }
}

pub fn index_snippets(snippets: &[Snippet]) -> Vec<IndexedSnippet> {
    snippets.iter().cloned().map(IndexedSnippet::new).collect()
}

fn score_tokens(query: &BTreeSet<String>, tokens: &BTreeSet<String>) -> Score {
    let matched = query.iter().filter(|t| tokens.contains(*t)).count();
    Score::new(matched as u32, query.len() as u32)
}

pub fn retrieve(query: &str, corpus: &[Snippet], k: usize) -> Result<Vec<ScoredSnippet>, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    if k == 0 {
        return Err(CorpusError::InvalidK);
    }
    let q = tokenize(query);
    let scored = corpus
        .iter()
        .map(|s| ScoredSnippet {
            score: score_tokens(&q, &tokenize(&s.text)),
            snippet: s.clone(),
        })
        .collect();
    let mut ordered = order_snippets(scored);
    ordered.truncate(k);
    Ok(ordered)
}

/// Same contract as [`retrieve`] over pre-tokenized snippets; only the
/// top `k` are cloned.
pub fn retrieve_indexed<'a, I>(query: &str, corpus: I, k: usize) -> Result<Vec<ScoredSnippet>, CorpusError>
where
    I: IntoIterator<Item = &'a IndexedSnippet>,
{
    if k == 0 {
        return Err(CorpusError::InvalidK);
    }
    let q = tokenize(query);
    let mut scored: Vec<(Score, &Snippet)> = corpus
        .into_iter()
        .map(|s| (score_tokens(&q, &s.tokens), &s.snippet))
        .collect();
    if scored.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    scored.sort_by(|(sa, a), (sb, b)| snippet_order(sa, a, sb, b));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(score, s)| ScoredSnippet {
            snippet: s.clone(),
            score,
        })
        .collect())
}

/// Returns the first snippet id that occurs more than once.
pub fn find_duplicate_id(snippets: &[Snippet]) -> Option<&str> {
    let mut seen = HashSet::new();
    snippets
        .iter()
        .map(|s| s.snippet_id.as_str())
        .find(|id| !seen.insert(*id))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub title: String,
    pub fiscal_year: i32,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version_id: String,
    pub documents: Vec<ManifestEntry>,
}

/// An immutable, versioned set of source documents.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub version_id: String,
    pub documents: Vec<SourceDocument>,
}

const BUNDLED_MANIFEST: &str = include_str!("../fixtures/corpus/manifest.json");
const BUNDLED_BODIES: [(&str, &str); 3] = [
    ("citi_2024_10k.txt", include_str!("../fixtures/corpus/citi_2024_10k.txt")),
    ("gs_2024_10k.txt", include_str!("../fixtures/corpus/gs_2024_10k.txt")),
    ("jpm_2024_10k.txt", include_str!("../fixtures/corpus/jpm_2024_10k.txt")),
];

/// Default window used when turning a corpus into retrieval snippets.
pub const DEFAULT_CHUNK_CHARS: usize = 800;
pub const DEFAULT_OVERLAP_CHARS: usize = 100;

impl Corpus {
    /// The excerpt corpus compiled into the library.
    pub fn bundled() -> Self {
        let manifest: CorpusManifest =
            serde_json::from_str(BUNDLED_MANIFEST).expect("bundled manifest is valid JSON");
        Self::from_manifest(manifest, |path| {
            BUNDLED_BODIES
                .iter()
                .find(|(name, _)| *name == path)
                .map(|(_, body)| body.to_string())
                .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, path.to_string()))
        })
        .expect("bundled corpus is consistent")
    }

    /// Loads a manifest file; document paths resolve relative to it.
    pub fn load(manifest_path: &Path) -> Result<Self, CorpusError> {
        let raw = std::fs::read_to_string(manifest_path).map_err(|source| CorpusError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let manifest: CorpusManifest = serde_json::from_str(&raw)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(manifest, |p| std::fs::read_to_string(base.join(p)))
            .map_err(|e| match e {
                CorpusError::Io { path, source } => CorpusError::Io {
                    path: base.join(path),
                    source,
                },
                other => other,
            })
    }

    fn from_manifest<F>(manifest: CorpusManifest, mut read: F) -> Result<Self, CorpusError>
    where
        F: FnMut(&str) -> std::io::Result<String>,
    {
        let mut documents = Vec::with_capacity(manifest.documents.len());
        for entry in manifest.documents {
            let body = read(&entry.path).map_err(|source| CorpusError::Io {
                path: PathBuf::from(&entry.path),
                source,
            })?;
            let doc = SourceDocument::new(
                entry.doc_id,
                entry.title,
                entry.fiscal_year,
                body,
                manifest.version_id.clone(),
            )?;
            if doc.content_hash != entry.sha256 {
                return Err(CorpusError::HashMismatch {
                    doc_id: doc.doc_id,
                    expected: entry.sha256,
                    actual: doc.content_hash,
                });
            }
            documents.push(doc);
        }
        Ok(Self {
            version_id: manifest.version_id,
            documents,
        })
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.documents.iter().map(|d| d.doc_id.as_str()).collect()
    }

    pub fn snippets(&self, chunk_chars: usize, overlap_chars: usize) -> Result<Vec<Snippet>, CorpusError> {
        let mut out = Vec::new();
        for doc in &self.documents {
            out.extend(chunk_document(doc, chunk_chars, overlap_chars)?);
        }
        if let Some(dup) = find_duplicate_id(&out) {
            return Err(CorpusError::DuplicateSnippetId(dup.to_string()));
        }
        Ok(out)
    }

    pub fn default_snippets(&self) -> Result<Vec<Snippet>, CorpusError> {
        self.snippets(DEFAULT_CHUNK_CHARS, DEFAULT_OVERLAP_CHARS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(body: &str) -> SourceDocument {
        SourceDocument::new("test_doc", "Test", 2024, body, "v1").unwrap()
    }

    fn scored(id: &str, prio: u32, idx: u32, m: u32, t: u32) -> ScoredSnippet {
        ScoredSnippet {
            snippet: Snippet {
                snippet_id: id.into(),
                doc_id: "d".into(),
                section_priority: prio,
                chunk_idx: idx,
                text: String::new(),
                char_span: (0, 1),
            },
            score: Score::new(m, t),
        }
    }

    #[test]
    fn single_chunk() {
        let s = chunk_document(&doc("0123456789"), 10, 0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].chunk_idx, 0);
        assert_eq!(s[0].char_span, (0, 10));
    }

    #[test]
    fn sliding_window_with_overlap() {
        let s = chunk_document(&doc("abcdefghij"), 4, 1).unwrap();
        let spans: Vec<_> = s.iter().map(|s| s.char_span).collect();
        assert_eq!(spans, vec![(0, 4), (3, 7), (6, 10)]);
        let idx: Vec<_> = s.iter().map(|s| s.chunk_idx).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(s[1].text, "defg");
        assert_eq!(reconstruct(&s), "abcdefghij");
    }

    #[test]
    fn chunking_is_deterministic() {
        let d = doc("Item 1A. Risk Factors\nSome risk text here.\nItem 7. MD&A\nMore.");
        assert_eq!(chunk_document(&d, 7, 2).unwrap(), chunk_document(&d, 7, 2).unwrap());
    }

    #[test]
    fn chunking_errors() {
        assert!(matches!(
            chunk_document(&doc(""), 4, 0),
            Err(CorpusError::EmptyDocument(_))
        ));
        assert!(matches!(
            chunk_document(&doc("abc"), 4, 4),
            Err(CorpusError::InvalidChunking { .. })
        ));
        assert!(matches!(
            chunk_document(&doc("abc"), 0, 0),
            Err(CorpusError::InvalidChunking { .. })
        ));
    }

    #[test]
    fn never_splits_citation_tags() {
        let body = "net losses [jpm_2024_10k] rose and [citi_2024_10k] fell";
        let d = doc(body);
        for chunk in 3..20 {
            for overlap in 0..chunk.min(5) {
                let s = chunk_document(&d, chunk, overlap).unwrap();
                assert_eq!(reconstruct(&s), body);
                for sn in &s {
                    let opens = sn.text.matches('[').count();
                    let closes = sn.text.matches(']').count();
                    // A chunk may start right after a tag but never holds half of one.
                    assert!(opens == closes, "chunk {:?} splits a tag", sn.text);
                }
            }
        }
    }

    #[test]
    fn unicode_spans_are_chars() {
        let d = doc("€€€€€€");
        let s = chunk_document(&d, 4, 1).unwrap();
        assert_eq!(s[0].text, "€€€€");
        assert_eq!(s[1].char_span, (3, 6));
        assert_eq!(reconstruct(&s), "€€€€€€");
    }

    #[test]
    fn section_priorities() {
        assert_eq!(assign_section_priority("Item 1A. Risk Factors"), 1);
        assert_eq!(assign_section_priority("Item 7. Management's Discussion and Analysis"), 2);
        assert_eq!(assign_section_priority("Item 8. Financial Statements"), 3);
        assert_eq!(assign_section_priority("Item 1. Business"), 4);
        assert_eq!(assign_section_priority("ITEM 3. LEGAL PROCEEDINGS"), 5);
        assert_eq!(assign_section_priority("Exhibit Index"), 99);
        assert_eq!(assign_section_priority(""), 99);
        assert_eq!(assign_section_priority("Risk Factors"), 1);
        assert_eq!(assign_section_priority("Item 9B. Other Information"), 99);
    }

    #[test]
    fn chunks_inherit_heading_priority() {
        let body = "Item 1. Business\naaaaaaaaaa\nItem 1A. Risk Factors\nbbbbbbbbbb\nExhibit Index\ncccc\n";
        let s = chunk_document(&doc(body), 12, 0).unwrap();
        assert_eq!(s[0].section_priority, 4);
        let risk = s.iter().find(|x| x.text.contains("bbbb")).unwrap();
        assert_eq!(risk.section_priority, 1);
        assert_eq!(s.last().unwrap().section_priority, 99);
    }

    #[test]
    fn ordering_keys() {
        let out = order_snippets(vec![scored("b", 1, 0, 8, 10), scored("a", 1, 0, 9, 10)]);
        assert_eq!(out[0].snippet.snippet_id, "a");

        let out = order_snippets(vec![scored("a", 2, 0, 1, 2), scored("b", 1, 0, 1, 2)]);
        assert_eq!(out[0].snippet.snippet_id, "b");

        let out = order_snippets(vec![scored("a9", 1, 0, 1, 2), scored("a10", 1, 0, 1, 2)]);
        assert_eq!(out[0].snippet.snippet_id, "a10");

        let out = order_snippets(vec![scored("a", 1, 3, 1, 2), scored("a", 1, 2, 1, 2)]);
        assert_eq!(out[0].snippet.chunk_idx, 2);
    }

    #[test]
    fn rational_scores_tie_exactly() {
        assert_eq!(Score::new(1, 3), Score::new(2, 6));
        assert!(Score::new(2, 3) > Score::new(3, 5));
        assert_eq!(Score::new(0, 0), Score::new(0, 5));
    }

    #[test]
    fn retrieve_self_match_and_clamp() {
        let d = doc("alpha beta gamma. delta epsilon zeta. eta theta iota.");
        let snippets = chunk_document(&d, 18, 0).unwrap();
        let target = snippets[1].clone();
        let got = retrieve(&target.text, &snippets, 1).unwrap();
        assert_eq!(got[0].snippet, target);
        assert_eq!(got[0].score, Score::new(1, 1));

        let all = retrieve("alpha", &snippets, 100).unwrap();
        assert_eq!(all.len(), snippets.len());
        assert!(all.windows(2).all(|w| retrieval_order(&w[0], &w[1]) == Ordering::Less));
    }

    #[test]
    fn retrieve_errors() {
        assert!(matches!(retrieve("q", &[], 1), Err(CorpusError::EmptyCorpus)));
        let s = chunk_document(&doc("abc"), 3, 0).unwrap();
        assert!(matches!(retrieve("q", &s, 0), Err(CorpusError::InvalidK)));
    }

    #[test]
    fn indexed_matches_plain() {
        let corpus = Corpus::bundled();
        let snippets = corpus.default_snippets().unwrap();
        let indexed = index_snippets(&snippets);
        let q = "What were JPMorgan's net credit losses in 2023?";
        assert_eq!(retrieve(q, &snippets, 5).unwrap(), retrieve_indexed(q, &indexed, 5).unwrap());
    }

    #[test]
    fn bundled_corpus_loads() {
        let corpus = Corpus::bundled();
        assert_eq!(corpus.doc_ids(), vec!["citi_2024_10k", "gs_2024_10k", "jpm_2024_10k"]);
        for d in &corpus.documents {
            d.verify().unwrap();
            assert!(d.body.len() > 40_000);
        }
        let snippets = corpus.default_snippets().unwrap();
        assert!(find_duplicate_id(&snippets).is_none());
    }

    #[test]
    fn tampered_body_fails_verification() {
        let mut d = doc("hello");
        d.body.push('!');
        assert!(matches!(d.verify(), Err(CorpusError::HashMismatch { .. })));
    }

    #[test]
    fn doc_id_validation() {
        assert!(SourceDocument::new("Bad-Id", "t", 2024, "x", "v").is_err());
        assert!(SourceDocument::new("", "t", 2024, "x", "v").is_err());
    }
}
