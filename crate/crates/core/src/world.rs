//! Synthetic grounded-dialog worlds with an explicit joint distribution.
//!
//! A world fixes a pool of contexts `c`, a set of documents `d` and a finite
//! response space (every string over the world's tokens with length
//! `1..=max_response_len`). The joint factorizes as
//! `p(c) · p(d | c) · p(u | c, d)` where the response factor mixes a
//! document-copying process (weight `grounding_strength`) with a
//! context-only babbling process:
//!
//! * copy: a start offset `s` is drawn per document, then position `i`
//!   repeats `d[(s + i) mod |d|]` with probability `1 - COPY_NOISE` or emits
//!   a uniform token otherwise;
//! * babble: each token mixes a context-specific unigram with a transition
//!   table shared by all contexts.
//!
//! Both processes draw their length from their own length distribution.
//! Everything is small enough to enumerate, so every conditional the
//! decoders need is available exactly.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{flatten_context, DocumentCollection, GroundedExample, Turn};
use crate::error::{Error, Result, ScoreError};
use crate::scorer::{check_prefix, Condition, Role, Scorer, ScorerDescriptor, ScorerKind, ScorerSet};
use crate::seed::{rng_for, sha256_hex};
use crate::vocab::{TokenId, Vocabulary, EOS, RESERVED};

/// Upper bound on `vocab_size ^ max_response_len`.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;
/// Probability that a copy step emits a uniform token instead of the document's.
pub const COPY_NOISE: f64 = 0.1;
const FIRST_WORLD_TOKEN: TokenId = RESERVED.len() as TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    /// Number of generated tokens (excluding reserved symbols).
    pub vocab_size: usize,
    pub num_documents: usize,
    /// Size of the context pool; ignored when `identifying_contexts` is set.
    pub num_contexts: usize,
    pub max_context_len: usize,
    pub max_doc_len: usize,
    pub max_response_len: usize,
    pub grounding_strength: f64,
    /// One context per document whose text is the document itself, with
    /// `p(d | c)` a point mass on that document.
    pub identifying_contexts: bool,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            vocab_size: 6,
            num_documents: 4,
            num_contexts: 8,
            max_context_len: 2,
            max_doc_len: 3,
            max_response_len: 4,
            grounding_strength: 0.7,
            identifying_contexts: false,
            seed: 0,
        }
    }
}

fn count_strings(alphabet: usize, max_len: usize) -> u64 {
    (1..=max_len as u32)
        .map(|l| (alphabet as u64).saturating_pow(l))
        .fold(0u64, u64::saturating_add)
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.max_context_len == 0 || self.max_doc_len == 0 || self.max_response_len == 0 {
            return bad("sequence lengths must be at least 1".into());
        }
        if self.num_documents == 0 || (!self.identifying_contexts && self.num_contexts == 0) {
            return bad("need at least one document and one context".into());
        }
        if !(0.0..=1.0).contains(&self.grounding_strength) {
            return bad(format!("grounding_strength {} outside [0, 1]", self.grounding_strength));
        }
        let strings = (self.vocab_size as u64).checked_pow(self.max_response_len as u32);
        if strings.is_none_or(|n| n > ENUMERATION_LIMIT) {
            return bad(format!(
                "enumerability guard: {}^{} response strings exceed {ENUMERATION_LIMIT}",
                self.vocab_size, self.max_response_len
            ));
        }
        if count_strings(self.vocab_size, self.max_doc_len) < self.num_documents as u64 {
            return bad("too few distinct documents for num_documents".into());
        }
        if !self.identifying_contexts && count_strings(self.vocab_size, self.max_context_len) < self.num_contexts as u64
        {
            return bad("too few distinct contexts for num_contexts".into());
        }
        Ok(())
    }
}

/// Indexing of all strings up to `max_len` over `alphabet` tokens.
///
/// Slot 0 is the empty string; strings of length `l` occupy
/// `offset[l] .. offset[l] + alphabet^l` in base-`alphabet` order with the
/// first token most significant, so the parent of a slot is `n / alphabet`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSpace {
    alphabet: usize,
    max_len: usize,
    offsets: Vec<usize>,
}

impl ResponseSpace {
    pub fn new(alphabet: usize, max_len: usize) -> Self {
        let mut offsets = vec![0usize];
        let mut width = 1usize;
        for _ in 0..=max_len {
            let last = *offsets.last().unwrap();
            offsets.push(last + width);
            width *= alphabet;
        }
        Self {
            alphabet,
            max_len,
            offsets,
        }
    }

    /// Number of slots, empty string included.
    pub fn len(&self) -> usize {
        self.offsets[self.max_len + 1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Slot of a string of world-token indices.
    pub fn slot(&self, symbols: &[usize]) -> Option<usize> {
        if symbols.len() > self.max_len || symbols.iter().any(|&s| s >= self.alphabet) {
            return None;
        }
        let n = symbols.iter().fold(0usize, |acc, &s| acc * self.alphabet + s);
        Some(self.offsets[symbols.len()] + n)
    }

    pub fn slot_len(&self, slot: usize) -> usize {
        self.offsets.partition_point(|&o| o <= slot) - 1
    }

    pub fn symbols(&self, slot: usize) -> Vec<usize> {
        let len = self.slot_len(slot);
        let mut n = slot - self.offsets[len];
        let mut out = vec![0; len];
        for i in (0..len).rev() {
            out[i] = n % self.alphabet;
            n /= self.alphabet;
        }
        out
    }

    fn parent(&self, slot: usize) -> usize {
        let len = self.slot_len(slot);
        let n = slot - self.offsets[len];
        self.offsets[len - 1] + n / self.alphabet
    }

    fn child(&self, slot: usize, symbol: usize) -> Option<usize> {
        let len = self.slot_len(slot);
        (len < self.max_len).then(|| self.offsets[len + 1] + (slot - self.offsets[len]) * self.alphabet + symbol)
    }

    /// Strings of length `1..=max_len`.
    pub fn response_slots(&self) -> std::ops::Range<usize> {
        1..self.len()
    }
}

/// Exact string and prefix masses of one response distribution.
#[derive(Debug)]
struct PrefixTable {
    exact: Vec<f64>,
    mass: Vec<f64>,
}

impl PrefixTable {
    fn new(space: &ResponseSpace, exact: Vec<f64>) -> Self {
        let mut mass = exact.clone();
        for slot in (1..space.len()).rev() {
            let p = space.parent(slot);
            mass[p] += mass[slot];
        }
        Self { exact, mass }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct WorldTables {
    spec: WorldSpec,
    contexts: Vec<Vec<TokenId>>,
    documents: Vec<Vec<TokenId>>,
    context_prior: Vec<f64>,
    doc_given_context: Vec<Vec<f64>>,
    copy_length: Vec<f64>,
    copy_start: Vec<Vec<f64>>,
    babble_length: Vec<f64>,
    babble_unigram: Vec<Vec<f64>>,
    babble_transition: Vec<Vec<f64>>,
    /// `[document][slot]` copy-process string probabilities.
    copy: Vec<Vec<f64>>,
    /// `[context][slot]` babble-process string probabilities.
    babble: Vec<Vec<f64>>,
}

pub struct WorldModel {
    tables: WorldTables,
    space: ResponseSpace,
    vocab: Vocabulary,
    context_index: HashMap<Vec<TokenId>, usize>,
    document_index: HashMap<Vec<TokenId>, usize>,
    direct_tables: Vec<OnceLock<Arc<PrefixTable>>>,
    lm_tables: Vec<OnceLock<Arc<PrefixTable>>>,
}

impl std::fmt::Debug for WorldModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorldModel")
            .field("spec", &self.tables.spec)
            .field("responses", &self.space.len())
            .finish()
    }
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-12).ln() + floor).collect();
    normalize(w)
}

fn peaked_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n)
        .map(|_| (-rng.gen::<f64>().max(1e-12).ln()).powi(2) + 1e-3)
        .collect();
    normalize(w)
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn distinct_sequences(
    rng: &mut ChaCha8Rng,
    count: usize,
    alphabet: usize,
    min_len: usize,
    max_len: usize,
    distinct_tokens: bool,
) -> Vec<Vec<TokenId>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        let relax = attempts > 10_000;
        let len = rng.gen_range(if relax { 1 } else { min_len }..=max_len);
        let seq: Vec<TokenId> = if distinct_tokens && len <= alphabet && !relax {
            let mut pool: Vec<usize> = (0..alphabet).collect();
            pool.shuffle(rng);
            pool[..len].iter().map(|&s| FIRST_WORLD_TOKEN + s as TokenId).collect()
        } else {
            (0..len)
                .map(|_| FIRST_WORLD_TOKEN + rng.gen_range(0..alphabet) as TokenId)
                .collect()
        };
        let mut key = seq.clone();
        if distinct_tokens {
            key.sort_unstable();
        }
        if seen.insert(key) {
            out.push(seq);
        }
    }
    out
}

impl WorldModel {
    pub fn build(spec: &WorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(spec.seed, "world");
        let g = spec.vocab_size;
        let space = ResponseSpace::new(g, spec.max_response_len);

        let min_doc = spec.max_doc_len.div_ceil(2);
        let documents = distinct_sequences(
            &mut rng,
            spec.num_documents,
            g,
            min_doc,
            spec.max_doc_len,
            spec.identifying_contexts,
        );
        let contexts = if spec.identifying_contexts {
            documents.clone()
        } else {
            distinct_sequences(&mut rng, spec.num_contexts, g, 1, spec.max_context_len, false)
        };
        let nc = contexts.len();
        let nd = documents.len();
        let context_prior = random_weights(&mut rng, nc, 0.5);
        let doc_given_context: Vec<Vec<f64>> = (0..nc)
            .map(|c| {
                if spec.identifying_contexts {
                    (0..nd).map(|d| if d == c { 1.0 } else { 0.0 }).collect()
                } else {
                    random_weights(&mut rng, nd, 0.05)
                }
            })
            .collect();
        let copy_length = random_weights(&mut rng, spec.max_response_len, 0.2);
        let babble_length = random_weights(&mut rng, spec.max_response_len, 0.2);
        let copy_start: Vec<Vec<f64>> = documents
            .iter()
            .map(|d| random_weights(&mut rng, d.len(), 0.2))
            .collect();
        let babble_unigram: Vec<Vec<f64>> = (0..nc).map(|_| peaked_weights(&mut rng, g)).collect();
        let babble_transition: Vec<Vec<f64>> = (0..g).map(|_| peaked_weights(&mut rng, g)).collect();

        let mut tables = WorldTables {
            spec: spec.clone(),
            contexts,
            documents,
            context_prior,
            doc_given_context,
            copy_length,
            copy_start,
            babble_length,
            babble_unigram,
            babble_transition,
            copy: Vec::new(),
            babble: Vec::new(),
        };
        tables.copy = (0..nd).map(|d| copy_row(&tables, &space, d)).collect();
        tables.babble = (0..nc).map(|c| babble_row(&tables, &space, c)).collect();
        Self::from_tables(tables)
    }

    fn from_tables(tables: WorldTables) -> Result<Self> {
        tables.spec.validate()?;
        let space = ResponseSpace::new(tables.spec.vocab_size, tables.spec.max_response_len);
        let rows = tables.copy.iter().chain(&tables.babble);
        for row in rows {
            if row.len() != space.len() {
                return Err(Error::Invalid("world table has the wrong number of slots".into()));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("response factor row sums to {s}")));
            }
        }
        for row in tables
            .doc_given_context
            .iter()
            .chain(std::iter::once(&tables.context_prior))
        {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("factor row sums to {s}")));
            }
        }
        let tokens = (0..tables.spec.vocab_size).map(|i| format!("t{i}"));
        let vocab = Vocabulary::from_tokens(tokens)?.with_control_tokens();
        let context_index = tables
            .contexts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        let document_index = tables
            .documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), i))
            .collect();
        let nc = tables.contexts.len();
        let nd = tables.documents.len();
        Ok(Self {
            direct_tables: (0..nc * nd).map(|_| OnceLock::new()).collect(),
            lm_tables: (0..nc).map(|_| OnceLock::new()).collect(),
            tables,
            space,
            vocab,
            context_index,
            document_index,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.tables.spec
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn space(&self) -> &ResponseSpace {
        &self.space
    }

    pub fn contexts(&self) -> &[Vec<TokenId>] {
        &self.tables.contexts
    }

    pub fn documents(&self) -> &[Vec<TokenId>] {
        &self.tables.documents
    }

    pub fn context_prior(&self) -> &[f64] {
        &self.tables.context_prior
    }

    /// `p(d | c)`, the exact retrieval posterior.
    pub fn retrieval_posterior(&self) -> &[Vec<f64>] {
        &self.tables.doc_given_context
    }

    pub fn document_id(d: usize) -> String {
        format!("doc{d}")
    }

    pub fn context_of(&self, turns: &[Turn]) -> Option<usize> {
        self.context_index.get(&flatten_context(turns)).copied()
    }

    pub fn document_of(&self, tokens: &[TokenId]) -> Option<usize> {
        self.document_index.get(tokens).copied()
    }

    pub fn collection(&self) -> DocumentCollection {
        let docs: BTreeMap<_, _> = self
            .tables
            .documents
            .iter()
            .enumerate()
            .map(|(i, d)| (Self::document_id(i), d.clone()))
            .collect();
        DocumentCollection::new(docs).expect("worlds have documents")
    }

    /// Vocabulary ids of a response slot.
    pub fn slot_tokens(&self, slot: usize) -> Vec<TokenId> {
        self.space
            .symbols(slot)
            .into_iter()
            .map(|s| FIRST_WORLD_TOKEN + s as TokenId)
            .collect()
    }

    /// Slot of a token sequence, if it lies in the response space.
    pub fn slot_of(&self, tokens: &[TokenId]) -> Option<usize> {
        let symbols: Option<Vec<usize>> = tokens
            .iter()
            .map(|&t| {
                let s = t.checked_sub(FIRST_WORLD_TOKEN)? as usize;
                (s < self.tables.spec.vocab_size).then_some(s)
            })
            .collect();
        self.space.slot(&symbols?)
    }

    /// `p(u | c, d)` for a response slot.
    pub fn response_prob(&self, c: usize, d: usize, slot: usize) -> f64 {
        let g = self.tables.spec.grounding_strength;
        g * self.tables.copy[d][slot] + (1.0 - g) * self.tables.babble[c][slot]
    }

    pub fn response_row(&self, c: usize, d: usize) -> Vec<f64> {
        (0..self.space.len()).map(|s| self.response_prob(c, d, s)).collect()
    }

    /// `p(c, d, u)`.
    pub fn joint(&self, c: usize, d: usize, slot: usize) -> f64 {
        self.tables.context_prior[c] * self.tables.doc_given_context[c][d] * self.response_prob(c, d, slot)
    }

    fn direct_table(&self, c: usize, d: usize) -> &PrefixTable {
        let nd = self.tables.documents.len();
        self.direct_tables[c * nd + d].get_or_init(|| Arc::new(PrefixTable::new(&self.space, self.response_row(c, d))))
    }

    fn lm_table(&self, c: usize) -> &PrefixTable {
        self.lm_tables[c].get_or_init(|| {
            let prior = &self.tables.doc_given_context[c];
            let mut row = vec![0.0; self.space.len()];
            for (d, &pd) in prior.iter().enumerate() {
                if pd > 0.0 {
                    for (slot, r) in row.iter_mut().enumerate() {
                        *r += pd * self.response_prob(c, d, slot);
                    }
                }
            }
            Arc::new(PrefixTable::new(&self.space, row))
        })
    }

    /// `p(d | u, c)` over documents for a complete response slot, or for a
    /// response prefix when `partial` (summing over all completions).
    pub fn document_posterior(&self, c: usize, slot: Option<usize>, partial: bool) -> Vec<f64> {
        let prior = &self.tables.doc_given_context[c];
        let Some(slot) = slot else {
            return vec![0.0; prior.len()];
        };
        let w: Vec<f64> = prior
            .iter()
            .enumerate()
            .map(|(d, &pd)| {
                if pd == 0.0 {
                    return 0.0;
                }
                let t = self.direct_table(c, d);
                pd * if partial { t.mass[slot] } else { t.exact[slot] }
            })
            .collect();
        let s: f64 = w.iter().sum();
        if s > 0.0 {
            w.into_iter().map(|x| x / s).collect()
        } else {
            w
        }
    }

    /// Samples `n` examples i.i.d. from the joint.
    pub fn sample_dataset(&self, n: usize, seed: u64) -> Result<Vec<GroundedExample>> {
        if n == 0 {
            return Err(Error::Config("sample size must be at least 1".into()));
        }
        let mut rng = rng_for(seed, "sample");
        let mut cdfs: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let c = draw(&mut rng, &self.tables.context_prior);
            let d = draw(&mut rng, &self.tables.doc_given_context[c]);
            let cdf = cdfs.entry((c, d)).or_insert_with(|| {
                let mut acc = 0.0;
                self.response_row(c, d)
                    .into_iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            });
            let x = rng.gen::<f64>() * cdf.last().copied().unwrap_or(1.0);
            let slot = cdf.partition_point(|&v| v <= x).clamp(1, cdf.len() - 1);
            out.push(GroundedExample {
                id: format!("s{seed}-{i:06}"),
                context: vec![Turn::user(self.tables.contexts[c].clone())],
                document: self.tables.documents[d].clone(),
                response: Some(self.slot_tokens(slot)),
                control: None,
            });
        }
        Ok(out)
    }

    pub fn exact_scorer(self: &Arc<Self>, role: ExactRole) -> TabularScorer {
        TabularScorer {
            world: Arc::clone(self),
            role,
        }
    }

    /// Exact direct, channel and response-LM scorers; `partial_channel`
    /// selects the prefix-marginalizing channel used by online decoding.
    pub fn exact_scorer_set(self: &Arc<Self>, partial_channel: bool) -> ScorerSet {
        let channel = if partial_channel {
            ExactRole::ChannelPartial
        } else {
            ExactRole::Channel
        };
        ScorerSet {
            direct: Arc::new(self.exact_scorer(ExactRole::Direct)),
            channel: Arc::new(self.exact_scorer(channel)),
            lm: Arc::new(self.exact_scorer(ExactRole::ResponseLm)),
        }
    }

    pub fn to_dump_string(&self) -> String {
        let mut s = serde_json::to_string(&self.tables).expect("world tables serialize");
        s.push('\n');
        s
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_dump_string().as_bytes())
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        Self::from_tables(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_dump_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_dump(&text).map_err(|e| Error::data(path, e.to_string()))
    }
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let x = rng.gen::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn copy_row(t: &WorldTables, space: &ResponseSpace, d: usize) -> Vec<f64> {
    let doc: Vec<usize> = t.documents[d]
        .iter()
        .map(|&x| (x - FIRST_WORLD_TOKEN) as usize)
        .collect();
    let g = t.spec.vocab_size as f64;
    let mut row = vec![0.0; space.len()];
    for slot in space.response_slots() {
        let u = space.symbols(slot);
        let mut p = 0.0;
        for (s, &ps) in t.copy_start[d].iter().enumerate() {
            let mut q = ps;
            for (i, &tok) in u.iter().enumerate() {
                let hit = if doc[(s + i) % doc.len()] == tok {
                    1.0 - COPY_NOISE
                } else {
                    0.0
                };
                q *= hit + COPY_NOISE / g;
            }
            p += q;
        }
        row[slot] = t.copy_length[u.len() - 1] * p;
    }
    renormalize(row)
}

fn babble_row(t: &WorldTables, space: &ResponseSpace, c: usize) -> Vec<f64> {
    let mut row = vec![0.0; space.len()];
    for slot in space.response_slots() {
        let u = space.symbols(slot);
        let mut p = t.babble_length[u.len() - 1];
        for (i, &tok) in u.iter().enumerate() {
            let uni = t.babble_unigram[c][tok];
            p *= if i == 0 {
                uni
            } else {
                0.5 * uni + 0.5 * t.babble_transition[u[i - 1]][tok]
            };
        }
        row[slot] = p;
    }
    renormalize(row)
}

fn renormalize(row: Vec<f64>) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    assert!((s - 1.0).abs() < 1e-9, "factor drifted to {s}");
    normalize(row)
}

/// Which exact conditional a [`TabularScorer`] answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactRole {
    /// `p(u | c, d)`
    Direct,
    /// `p(d | u, c)`, the response taken as complete.
    Channel,
    /// `p(d | u-prefix, c)`, summing over completions; a response ending in
    /// `<eos>` is complete.
    ChannelPartial,
    /// `p(u | c)`
    ResponseLm,
}

impl ExactRole {
    pub fn role(self) -> Role {
        match self {
            ExactRole::Direct => Role::Direct,
            ExactRole::Channel | ExactRole::ChannelPartial => Role::Channel,
            ExactRole::ResponseLm => Role::ResponseLm,
        }
    }
}

/// The exact conditional tables of a world, or its retrieval posterior.
pub enum ExactConditional {
    Scorer(TabularScorer),
    Retrieval(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionalKind {
    Scorer(ExactRole),
    RetrievalPosterior,
}

pub fn exact_conditional(world: &Arc<WorldModel>, kind: ConditionalKind) -> ExactConditional {
    match kind {
        ConditionalKind::Scorer(role) => ExactConditional::Scorer(world.exact_scorer(role)),
        ConditionalKind::RetrievalPosterior => ExactConditional::Retrieval(world.retrieval_posterior().to_vec()),
    }
}

/// Scorer answering from a world's exact tables.
#[derive(Debug, Clone)]
pub struct TabularScorer {
    world: Arc<WorldModel>,
    role: ExactRole,
}

impl TabularScorer {
    pub fn world(&self) -> &Arc<WorldModel> {
        &self.world
    }

    fn context(&self, condition: &Condition) -> Result<usize, ScoreError> {
        self.world
            .context_of(&condition.context)
            .ok_or_else(|| ScoreError::UnknownCondition("context is not in the world's pool".into()))
    }

    /// Response-side distribution from a prefix table.
    fn response_step(&self, table: &PrefixTable, generated: &[TokenId]) -> Vec<f64> {
        let v = self.world.vocab.len();
        let mut out = vec![f64::NEG_INFINITY; v];
        let slot = self.world.slot_of(generated);
        let mass = slot.map_or(0.0, |s| table.mass[s]);
        let Some(slot) = slot.filter(|_| mass > 0.0) else {
            out[EOS as usize] = 0.0;
            return out;
        };
        out[EOS as usize] = (table.exact[slot] / mass).ln();
        for sym in 0..self.world.tables.spec.vocab_size {
            if let Some(child) = self.world.space.child(slot, sym) {
                out[(FIRST_WORLD_TOKEN as usize) + sym] = (table.mass[child] / mass).ln();
            }
        }
        out
    }

    /// Document-side distribution given a posterior over documents.
    fn document_step(&self, posterior: &[f64], doc_prefix: &[TokenId]) -> Vec<f64> {
        let v = self.world.vocab.len();
        let mut next = vec![0.0; v];
        let mut total = 0.0;
        for (d, &p) in posterior.iter().enumerate() {
            let doc = &self.world.tables.documents[d];
            if p == 0.0 || !doc.starts_with(doc_prefix) {
                continue;
            }
            total += p;
            let tok = doc.get(doc_prefix.len()).copied().unwrap_or(EOS);
            next[tok as usize] += p;
        }
        if total == 0.0 {
            let mut out = vec![f64::NEG_INFINITY; v];
            out[EOS as usize] = 0.0;
            return out;
        }
        next.into_iter().map(|p| (p / total).ln()).collect()
    }
}

impl Scorer for TabularScorer {
    fn vocab_size(&self) -> usize {
        self.world.vocab.len()
    }

    fn descriptor(&self) -> ScorerDescriptor {
        ScorerDescriptor {
            kind: ScorerKind::Tabular,
            role: Some(self.role.role()),
        }
    }

    fn next_token_logprobs(&self, condition: &Condition, prefix: &[TokenId]) -> Result<Vec<f64>, ScoreError> {
        check_prefix(prefix, self.vocab_size())?;
        if condition.role != self.role.role() {
            return Err(ScoreError::InvalidInput(format!(
                "{} condition given to a {:?} table",
                condition.role, self.role
            )));
        }
        condition.validate()?;
        let c = self.context(condition)?;
        let generated = &prefix[1..];
        match self.role {
            ExactRole::Direct => {
                let doc = condition.document.as_deref().unwrap_or_default();
                let d = self
                    .world
                    .document_of(doc)
                    .ok_or_else(|| ScoreError::UnknownCondition("document is not in the world".into()))?;
                Ok(self.response_step(self.world.direct_table(c, d), generated))
            }
            ExactRole::ResponseLm => Ok(self.response_step(self.world.lm_table(c), generated)),
            ExactRole::Channel | ExactRole::ChannelPartial => {
                let response = condition.response.as_deref().unwrap_or_default();
                let (body, complete) = match response.strip_suffix(&[EOS]) {
                    Some(body) => (body, true),
                    None => (response, self.role == ExactRole::Channel),
                };
                let slot = self.world.slot_of(body);
                let posterior = self.world.document_posterior(c, slot, !complete);
                Ok(self.document_step(&posterior, generated))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{frame, total_mass};

    fn tiny(seed: u64, g: f64) -> Arc<WorldModel> {
        Arc::new(
            WorldModel::build(&WorldSpec {
                vocab_size: 3,
                num_documents: 2,
                num_contexts: 3,
                max_response_len: 3,
                grounding_strength: g,
                seed,
                ..WorldSpec::default()
            })
            .unwrap(),
        )
    }

    #[test]
    fn response_space_indexing() {
        let s = ResponseSpace::new(3, 2);
        assert_eq!(s.len(), 1 + 3 + 9);
        for slot in 0..s.len() {
            assert_eq!(s.slot(&s.symbols(slot)), Some(slot));
        }
        assert_eq!(s.slot(&[]), Some(0));
        assert_eq!(s.slot(&[2, 1]), Some(4 + 7));
        assert_eq!(s.parent(s.slot(&[2, 1]).unwrap()), s.slot(&[2]).unwrap());
        assert_eq!(s.child(s.slot(&[2]).unwrap(), 1), s.slot(&[2, 1]));
        assert_eq!(s.child(s.slot(&[2, 1]).unwrap(), 0), None);
        assert_eq!(s.slot(&[0, 0, 0]), None);
    }

    #[test]
    fn guard_rejects_oversize_spaces() {
        let spec = WorldSpec {
            vocab_size: 11,
            max_response_len: 6,
            ..WorldSpec::default()
        };
        assert!(matches!(WorldModel::build(&spec), Err(Error::Config(m)) if m.contains("enumerability")));
        let spec = WorldSpec {
            vocab_size: 1,
            ..WorldSpec::default()
        };
        assert!(WorldModel::build(&spec).is_err());
    }

    #[test]
    fn rows_normalized_and_deterministic() {
        let a = tiny(5, 0.7);
        let b = tiny(5, 0.7);
        assert_eq!(a.to_dump_string(), b.to_dump_string());
        assert_ne!(a.to_dump_string(), tiny(6, 0.7).to_dump_string());
        for c in 0..a.contexts().len() {
            for d in 0..a.documents().len() {
                let s: f64 = a.response_row(c, d).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dump_round_trips() {
        let w = tiny(9, 0.4);
        let back = WorldModel::parse_dump(&w.to_dump_string()).unwrap();
        assert_eq!(back.to_dump_string(), w.to_dump_string());
        assert_eq!(back.vocab(), w.vocab());
    }

    #[test]
    fn ungrounded_world_ignores_document() {
        let w = tiny(3, 0.0);
        for c in 0..w.contexts().len() {
            assert_eq!(w.response_row(c, 0), w.response_row(c, 1));
        }
    }

    #[test]
    fn fully_grounded_mode_copies_document() {
        for seed in 0..10 {
            let w = tiny(seed, 1.0);
            for c in 0..w.contexts().len() {
                for d in 0..w.documents().len() {
                    let row = w.response_row(c, d);
                    let best = (1..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                    let doc = &w.documents()[d];
                    assert!(w.slot_tokens(best).iter().all(|t| doc.contains(t)));
                }
            }
        }
    }

    #[test]
    fn exact_scorers_are_normalized() {
        let w = tiny(1, 0.7);
        let ctx = vec![Turn::user(w.contexts()[0].clone())];
        let doc = w.documents()[1].clone();
        let direct = w.exact_scorer(ExactRole::Direct);
        let cond = Condition::direct(ctx.clone(), doc.clone(), None);
        for slot in 0..w.space().len() {
            let mut prefix = vec![crate::vocab::SOS];
            prefix.extend(w.slot_tokens(slot));
            let dist = direct.next_token_logprobs(&cond, &prefix).unwrap();
            assert!((total_mass(&dist) - 1.0).abs() < 1e-12);
        }
        let ch = w.exact_scorer(ExactRole::ChannelPartial);
        let cc = Condition::channel(ctx, w.slot_tokens(5));
        let dist = ch.next_token_logprobs(&cc, &[crate::vocab::SOS]).unwrap();
        assert!((total_mass(&dist) - 1.0).abs() < 1e-12);
        let lp = ch.sequence_logprob(&cc, &frame(&doc)).unwrap();
        assert!(lp < 0.0);
    }

    #[test]
    fn unknown_context_is_reported() {
        let w = tiny(1, 0.7);
        let s = w.exact_scorer(ExactRole::ResponseLm);
        let cond = Condition::response_lm(vec![Turn::user(vec![4, 4, 4, 4, 4])]);
        assert!(matches!(
            s.next_token_logprobs(&cond, &[crate::vocab::SOS]),
            Err(ScoreError::UnknownCondition(_))
        ));
    }

    #[test]
    fn sampling_is_reproducible() {
        let w = tiny(2, 0.7);
        assert!(w.sample_dataset(0, 1).is_err());
        assert_eq!(w.sample_dataset(1, 1).unwrap().len(), 1);
        assert_eq!(w.sample_dataset(50, 4).unwrap(), w.sample_dataset(50, 4).unwrap());
        assert_ne!(w.sample_dataset(50, 4).unwrap(), w.sample_dataset(50, 5).unwrap());
    }

    #[test]
    fn identifying_contexts_name_their_document() {
        let w = WorldModel::build(&WorldSpec {
            vocab_size: 12,
            num_documents: 6,
            max_doc_len: 3,
            max_response_len: 3,
            identifying_contexts: true,
            ..WorldSpec::default()
        })
        .unwrap();
        assert_eq!(w.contexts(), w.documents());
        for (c, row) in w.retrieval_posterior().iter().enumerate() {
            assert_eq!(row[c], 1.0);
        }
    }
}
