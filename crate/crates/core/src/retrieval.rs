//! Lexical document retrieval and the retrieve-then-decode pipeline.
//!
//! Two retrievers share one index: tf-idf vectors compared by cosine
//! similarity, and BM25. Both rank by score, ties broken by document id.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{flatten_context, DocumentCollection, GroundedExample, Turn};
use crate::decode::{decode, Decoded, DecoderConfig};
use crate::error::{Error, Result};
use crate::scorer::{Condition, ScorerSet};
use crate::seed::rng_for;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexedDoc {
    id: String,
    tokens: Vec<TokenId>,
    tf: BTreeMap<TokenId, u32>,
    tfidf_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    docs: Vec<IndexedDoc>,
    df: BTreeMap<TokenId, u32>,
    avg_len: f64,
    pub vocab_hash: Option<String>,
    pub bm25: Bm25Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    /// Non-increasing score; ties by ascending document id.
    pub ranked: Vec<Ranked>,
}

impl RetrievalResult {
    pub fn top(&self) -> Option<&str> {
        self.ranked.first().map(|r| r.doc_id.as_str())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("retrieval result serializes")
    }
}

fn term_counts(tokens: &[TokenId]) -> BTreeMap<TokenId, u32> {
    let mut tf = BTreeMap::new();
    for &t in tokens {
        *tf.entry(t).or_insert(0) += 1;
    }
    tf
}

impl RetrievalIndex {
    pub fn build(collection: &DocumentCollection) -> Self {
        let mut df: BTreeMap<TokenId, u32> = BTreeMap::new();
        let docs: Vec<IndexedDoc> = collection
            .documents
            .iter()
            .map(|(id, tokens)| {
                let tf = term_counts(tokens);
                for &t in tf.keys() {
                    *df.entry(t).or_insert(0) += 1;
                }
                IndexedDoc {
                    id: id.clone(),
                    tokens: tokens.clone(),
                    tf,
                    tfidf_norm: 0.0,
                }
            })
            .collect();
        let total: usize = docs.iter().map(|d| d.tokens.len()).sum();
        let mut index = Self {
            avg_len: total as f64 / docs.len().max(1) as f64,
            docs: Vec::new(),
            df,
            vocab_hash: None,
            bm25: Bm25Params::default(),
        };
        index.docs = docs;
        let norms: Vec<f64> = index
            .docs
            .iter()
            .map(|d| {
                d.tf.iter()
                    .map(|(&t, &c)| (c as f64 * index.idf(t)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        for (d, n) in index.docs.iter_mut().zip(norms) {
            d.tfidf_norm = n;
        }
        index
    }

    pub fn with_vocab_hash(mut self, hash: impl Into<String>) -> Self {
        self.vocab_hash = Some(hash.into());
        self
    }

    pub fn with_bm25(mut self, params: Bm25Params) -> Self {
        self.bm25 = params;
        self
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn document_frequency(&self, term: TokenId) -> u32 {
        self.df.get(&term).copied().unwrap_or(0)
    }

    /// `ln((N+1)/(df+1)) + 1`.
    pub fn idf(&self, term: TokenId) -> f64 {
        let n = self.docs.len() as f64;
        ((n + 1.0) / (self.document_frequency(term) as f64 + 1.0)).ln() + 1.0
    }

    pub fn document(&self, id: &str) -> Option<&[TokenId]> {
        self.docs.iter().find(|d| d.id == id).map(|d| d.tokens.as_slice())
    }

    fn cosine(&self, query: &BTreeMap<TokenId, u32>, doc: &IndexedDoc) -> f64 {
        let q_norm = query
            .iter()
            .map(|(&t, &c)| (c as f64 * self.idf(t)).powi(2))
            .sum::<f64>()
            .sqrt();
        if q_norm == 0.0 || doc.tfidf_norm == 0.0 {
            return 0.0;
        }
        let dot: f64 = query
            .iter()
            .filter_map(|(&t, &qc)| doc.tf.get(&t).map(|&dc| qc as f64 * dc as f64 * self.idf(t).powi(2)))
            .sum();
        dot / (q_norm * doc.tfidf_norm)
    }

    fn bm25_score(&self, query: &BTreeMap<TokenId, u32>, doc: &IndexedDoc) -> f64 {
        let Bm25Params { k1, b } = self.bm25;
        let norm = if self.avg_len > 0.0 {
            1.0 - b + b * doc.tokens.len() as f64 / self.avg_len
        } else {
            1.0
        };
        query
            .keys()
            .filter_map(|&t| {
                doc.tf.get(&t).map(|&c| {
                    let c = c as f64;
                    self.idf(t) * c * (k1 + 1.0) / (c + k1 * norm)
                })
            })
            .sum()
    }

    fn rank(
        &self,
        query_id: &str,
        k: usize,
        candidates: Option<&RetrievalResult>,
        score: impl Fn(&IndexedDoc) -> f64,
    ) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Config("retrieval depth k must be at least 1".into()));
        }
        let pool: Vec<&IndexedDoc> = match candidates {
            None => self.docs.iter().collect(),
            Some(c) => c
                .ranked
                .iter()
                .map(|r| {
                    self.docs
                        .iter()
                        .find(|d| d.id == r.doc_id)
                        .ok_or_else(|| Error::Invalid(format!("candidate {} is not indexed", r.doc_id)))
                })
                .collect::<Result<_>>()?,
        };
        let mut ranked: Vec<Ranked> = pool
            .into_iter()
            .map(|d| Ranked {
                doc_id: d.id.clone(),
                score: score(d),
            })
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
        ranked.truncate(k);
        Ok(RetrievalResult {
            query_id: query_id.to_string(),
            ranked,
        })
    }

    /// tf-idf cosine similarity between the flattened context and each document.
    pub fn retrieve_bi(&self, query_id: &str, context: &[Turn], k: usize) -> Result<RetrievalResult> {
        let q = term_counts(&flatten_context(context));
        self.rank(query_id, k, None, |d| self.cosine(&q, d))
    }

    /// BM25 over the whole collection, or over `candidates` only.
    pub fn retrieve_cross(
        &self,
        query_id: &str,
        context: &[Turn],
        k: usize,
        candidates: Option<&RetrievalResult>,
    ) -> Result<RetrievalResult> {
        let q = term_counts(&flatten_context(context));
        self.rank(query_id, k, candidates, |d| self.bm25_score(&q, d))
    }

    pub fn retrieve(&self, kind: RetrieverKind, query_id: &str, context: &[Turn], k: usize) -> Result<RetrievalResult> {
        match kind {
            RetrieverKind::Bi => self.retrieve_bi(query_id, context, k),
            RetrieverKind::Cross => self.retrieve_cross(query_id, context, k, None),
            RetrieverKind::BiThenCross { candidates } => {
                let first = self.retrieve_bi(query_id, context, candidates)?;
                self.retrieve_cross(query_id, context, k, Some(&first))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RetrieverKind {
    Bi,
    Cross,
    /// BM25 rescoring of the top `candidates` cosine results.
    BiThenCross {
        candidates: usize,
    },
}

/// Adds one distractor per document: its leading half (rounded down) followed
/// by tokens from `tokens` that the document lacks. A distractor never has
/// the same token set as any other entry of the result.
pub fn with_distractors(base: &DocumentCollection, tokens: &[TokenId], seed: u64) -> Result<DocumentCollection> {
    let mut rng = rng_for(seed, "distractors");
    let mut docs = base.documents.clone();
    let key = |t: &[TokenId]| {
        let mut k = t.to_vec();
        k.sort_unstable();
        k.dedup();
        k
    };
    let mut seen: BTreeSet<Vec<TokenId>> = docs.values().map(|d| key(d)).collect();
    for (i, (id, doc)) in base.documents.iter().enumerate() {
        let keep = doc.len() / 2;
        let others: Vec<TokenId> = tokens.iter().copied().filter(|t| !doc.contains(t)).collect();
        let mut made = None;
        for _ in 0..1000 {
            let mut d = doc[..keep].to_vec();
            d.extend((keep..doc.len()).filter_map(|_| others.choose(&mut rng).copied()));
            if d.len() == doc.len() && seen.insert(key(&d)) {
                made = Some(d);
                break;
            }
        }
        let d = made.ok_or_else(|| Error::Config(format!("cannot build a distinct distractor for {id}")))?;
        docs.insert(format!("distractor{i:04}"), d);
    }
    DocumentCollection::new(docs)
}

/// Fraction of queries whose rank-1 document is the gold one.
pub fn recall_at_1(results: &[RetrievalResult], gold: &BTreeMap<String, String>) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Invalid("recall over zero queries".into()));
    }
    let mut hits = 0usize;
    for r in results {
        let g = gold
            .get(&r.query_id)
            .ok_or_else(|| Error::Invalid(format!("no gold document for query {}", r.query_id)))?;
        if r.top() == Some(g.as_str()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

pub fn write_retrieval_dump(path: &Path, results: &[RetrievalResult]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in results {
        writeln!(f, "{}", r.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub retrieval: RetrievalResult,
    pub document_id: String,
    pub decoded: Decoded,
}

/// Decodes `example` grounded on the given document tokens.
pub fn decode_with_document(
    config: &DecoderConfig,
    scorers: &ScorerSet,
    example: &GroundedExample,
    document: &[TokenId],
    vocab: &Vocabulary,
) -> Result<Decoded> {
    let condition = Condition::direct(example.context.clone(), document.to_vec(), example.control.clone());
    decode(config, scorers, &condition, vocab)
}

/// Retrieves the rank-1 document for the example's context, then decodes
/// grounded on it in place of the example's own document.
pub fn pipeline_decode(
    index: &RetrievalIndex,
    retriever: RetrieverKind,
    config: &DecoderConfig,
    scorers: &ScorerSet,
    example: &GroundedExample,
    vocab: &Vocabulary,
) -> Result<PipelineOutput> {
    let retrieval = index.retrieve(retriever, &example.id, &example.context, 1)?;
    let document_id = retrieval
        .top()
        .ok_or_else(|| Error::Invalid(format!("retrieval returned nothing for {}", example.id)))?
        .to_string();
    let document = index.document(&document_id).expect("retrieved from this index");
    let decoded = decode_with_document(config, scorers, example, document, vocab)?;
    Ok(PipelineOutput {
        retrieval,
        document_id,
        decoded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collection(docs: &[(&str, &[TokenId])]) -> DocumentCollection {
        DocumentCollection::new(docs.iter().map(|(id, t)| (id.to_string(), t.to_vec())).collect()).unwrap()
    }

    fn ctx(tokens: &[TokenId]) -> Vec<Turn> {
        vec![Turn::user(tokens.to_vec())]
    }

    #[test]
    fn idf_formula() {
        let idx = RetrievalIndex::build(&collection(&[("a", &[4, 5]), ("b", &[5, 6])]));
        assert!((idx.idf(5) - ((3.0f64 / 3.0).ln() + 1.0)).abs() < 1e-12);
        assert!((idx.idf(4) - ((3.0f64 / 2.0).ln() + 1.0)).abs() < 1e-12);
        assert!((idx.idf(99) - (3.0f64.ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn self_similarity_is_one() {
        let idx = RetrievalIndex::build(&collection(&[("a", &[4, 5, 5]), ("b", &[6, 7])]));
        let r = idx.retrieve_bi("q", &ctx(&[4, 5, 5]), 2).unwrap();
        assert_eq!(r.top(), Some("a"));
        assert!((r.ranked[0].score - 1.0).abs() < 1e-9);
        assert_eq!(r.ranked[1].score, 0.0);
    }

    #[test]
    fn empty_context_ranks_by_id() {
        let idx = RetrievalIndex::build(&collection(&[("b", &[4]), ("a", &[5])]));
        for r in [
            idx.retrieve_bi("q", &[], 2).unwrap(),
            idx.retrieve_cross("q", &[], 2, None).unwrap(),
        ] {
            assert_eq!(
                r.ranked.iter().map(|x| x.doc_id.as_str()).collect::<Vec<_>>(),
                ["a", "b"]
            );
            assert!(r.ranked.iter().all(|x| x.score == 0.0));
        }
    }

    #[test]
    fn bm25_prefers_matching_document() {
        let idx = RetrievalIndex::build(&collection(&[("hit", &[4, 4, 5, 5]), ("miss", &[6, 7, 8, 9])]));
        let r = idx.retrieve_cross("q", &ctx(&[4, 5]), 2, None).unwrap();
        assert_eq!(r.top(), Some("hit"));
        assert!(r.ranked[0].score > r.ranked[1].score);
        assert_eq!(r.ranked[1].score, 0.0);
    }

    #[test]
    fn candidate_restriction() {
        let idx = RetrievalIndex::build(&collection(&[("a", &[4]), ("b", &[5]), ("c", &[4, 4])]));
        let cands = RetrievalResult {
            query_id: "q".into(),
            ranked: vec![Ranked {
                doc_id: "b".into(),
                score: 0.0,
            }],
        };
        let r = idx.retrieve_cross("q", &ctx(&[4]), 3, Some(&cands)).unwrap();
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.top(), Some("b"));
        assert!(idx.retrieve_bi("q", &ctx(&[4]), 0).is_err());
    }

    #[test]
    fn distractors_share_half_and_stay_distinct() {
        let base = collection(&[("a", &[4, 5, 6, 7]), ("b", &[4, 5, 8, 9])]);
        let tokens: Vec<TokenId> = (4..12).collect();
        let c = with_distractors(&base, &tokens, 3).unwrap();
        assert_eq!(c.len(), 4);
        let da = c.get("distractor0000").unwrap();
        assert_eq!(&da[..2], &[4, 5]);
        assert!(da[2..].iter().all(|t| ![4, 5, 6, 7].contains(t)));
        let sets: BTreeSet<Vec<TokenId>> = c
            .documents
            .values()
            .map(|d| {
                let mut k = d.clone();
                k.sort_unstable();
                k
            })
            .collect();
        assert_eq!(sets.len(), 4);
        assert_eq!(with_distractors(&base, &tokens, 3).unwrap(), c);
    }

    #[test]
    fn recall_counts() {
        let res = |q: &str, d: &str| RetrievalResult {
            query_id: q.into(),
            ranked: vec![Ranked {
                doc_id: d.into(),
                score: 1.0,
            }],
        };
        let gold: BTreeMap<String, String> = [("1", "a"), ("2", "b"), ("3", "c"), ("4", "d")]
            .map(|(q, d)| (q.to_string(), d.to_string()))
            .into();
        let results = vec![res("1", "a"), res("2", "b"), res("3", "c"), res("4", "x")];
        assert_eq!(recall_at_1(&results, &gold).unwrap(), 0.75);
        assert_eq!(recall_at_1(&results[..3], &gold).unwrap(), 1.0);
        assert_eq!(recall_at_1(&results[3..], &gold).unwrap(), 0.0);
        let err = recall_at_1(&[res("9", "a")], &gold).unwrap_err();
        assert!(err.to_string().contains('9'));
    }
}
