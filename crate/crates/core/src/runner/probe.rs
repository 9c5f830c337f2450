//! Retrieval ordering probe: shuffles candidate presentation order and
//! checks that the ranked result never changes.

use serde::{Deserialize, Serialize};

use crate::corpus::{find_duplicate_id, index_snippets, retrieve_indexed, IndexedSnippet, Snippet};
use crate::rng::XorShift64Star;
use crate::tasks::{TaskCatalog, TaskId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryProbe {
    pub query: String,
    pub permutations: u32,
    pub violations: u32,
    /// Snippet ids of the reference ranking.
    pub reference: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Set when the corpus itself breaks the unique-id invariant; no
    /// queries are probed then.
    pub corpus_violation: Option<String>,
    pub queries: Vec<QueryProbe>,
    pub total_violations: u32,
    pub passed: bool,
}

/// Queries used when none are given: the bundled rag questions plus a few
/// section-oriented lookups.
pub fn default_probe_queries() -> Vec<String> {
    let mut q: Vec<String> = TaskCatalog::bundled()
        .cases(TaskId::Rag)
        .iter()
        .filter_map(|c| c.question().map(str::to_string))
        .collect();
    q.extend(
        [
            "net credit losses",
            "risk factors",
            "liquidity coverage ratio",
            "legal proceedings",
            "common equity tier 1 capital",
        ]
        .map(String::from),
    );
    q
}

fn ids(hits: &[crate::corpus::ScoredSnippet]) -> Vec<(String, u32, u32)> {
    hits.iter()
        .map(|h| (h.snippet.snippet_id.clone(), h.score.matched, h.score.total))
        .collect()
}

pub fn ordering_probe(snippets: &[Snippet], queries: &[String], permutations: u32, k: usize, seed: u64) -> ProbeReport {
    if let Some(dup) = find_duplicate_id(snippets) {
        return ProbeReport {
            corpus_violation: Some(format!("duplicate snippet_id {dup}")),
            queries: Vec::new(),
            total_violations: 1,
            passed: false,
        };
    }
    let index = index_snippets(snippets);
    let mut rng = XorShift64Star::new(seed);
    let mut queries_out = Vec::new();
    for query in queries {
        let reference = match retrieve_indexed(query, &index, k) {
            Ok(r) => r,
            Err(e) => {
                queries_out.push(QueryProbe {
                    query: query.clone(),
                    permutations: 0,
                    violations: 1,
                    reference: vec![e.to_string()],
                    passed: false,
                });
                continue;
            }
        };
        let expected = ids(&reference);
        let mut order: Vec<&IndexedSnippet> = index.iter().collect();
        let mut violations = 0;
        for _ in 0..permutations {
            rng.shuffle(&mut order);
            let got = retrieve_indexed(query, order.iter().copied(), k).map(|r| ids(&r));
            if got.ok().as_ref() != Some(&expected) {
                violations += 1;
            }
        }
        queries_out.push(QueryProbe {
            query: query.clone(),
            permutations,
            violations,
            reference: expected.into_iter().map(|(id, _, _)| id).collect(),
            passed: violations == 0,
        });
    }
    let total_violations = queries_out.iter().map(|q| q.violations).sum();
    ProbeReport {
        corpus_violation: None,
        passed: total_violations == 0,
        queries: queries_out,
        total_violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;

    #[test]
    fn bundled_corpus_is_stable() {
        let snippets = Corpus::bundled().default_snippets().unwrap();
        let r = ordering_probe(&snippets, &default_probe_queries(), 50, 4, 7);
        assert!(r.passed, "{r:?}");
        assert!(r.queries.iter().all(|q| q.reference.len() == 4));
    }

    #[test]
    fn single_permutation() {
        let snippets = Corpus::bundled().default_snippets().unwrap();
        assert!(ordering_probe(&snippets, &["risk".to_string()], 1, 3, 1).passed);
    }

    #[test]
    fn duplicate_ids_reported() {
        let mut snippets = Corpus::bundled().default_snippets().unwrap();
        let dup = snippets[0].clone();
        snippets.push(dup);
        let r = ordering_probe(&snippets, &["risk".to_string()], 10, 3, 1);
        assert!(!r.passed);
        assert!(r.corpus_violation.unwrap().contains(&snippets[0].snippet_id));
    }
}
