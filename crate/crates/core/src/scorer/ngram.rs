//! Add-k smoothed n-gram scorer over linearized conditioning.
//!
//! The conditioning sequence of a [`Condition`] is flattened with
//! [`Condition::linearize`], `<sos>` is appended and the target follows. Only
//! target positions (including the closing `<eos>`) are counted, so the model
//! is conditional rather than a language model of the whole line.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_prefix, Condition, Role, Scorer, ScorerDescriptor, ScorerKind};
use crate::error::{Error, Result, ScoreError};
use crate::vocab::{TokenId, Vocabulary, EOS, SOS};

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_K: f64 = 0.1;
const MAX_ORDER: usize = 6;
const FORMAT: &str = "groundnc-ngram";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
struct HistoryCounts {
    total: u64,
    next: BTreeMap<TokenId, u64>,
}

/// Accumulates counts; history is the last `order - 1` tokens before the event.
#[derive(Debug, Clone)]
pub struct NgramBuilder {
    order: usize,
    vocab_size: usize,
    table: BTreeMap<Vec<TokenId>, HistoryCounts>,
}

impl NgramBuilder {
    pub fn new(order: usize, vocab_size: usize) -> Self {
        Self {
            order,
            vocab_size,
            table: BTreeMap::new(),
        }
    }

    fn history_of(&self, seq: &[TokenId]) -> Vec<TokenId> {
        let h = self.order - 1;
        seq[seq.len().saturating_sub(h)..].to_vec()
    }

    pub fn observe(&mut self, preceding: &[TokenId], next: TokenId) {
        let hist = self.history_of(preceding);
        let entry = self.table.entry(hist).or_default();
        entry.total += 1;
        *entry.next.entry(next).or_default() += 1;
    }

    /// Counts every token of `events`, each with history `lead ++ events[..i]`.
    pub fn observe_sequence(&mut self, lead: &[TokenId], events: &[TokenId]) {
        let mut seq = lead.to_vec();
        for &e in events {
            self.observe(&seq, e);
            seq.push(e);
        }
    }

    /// Unsmoothed relative frequency of `next` after `preceding`.
    pub fn ml_prob(&self, preceding: &[TokenId], next: TokenId) -> f64 {
        match self.table.get(&self.history_of(preceding)) {
            Some(c) if c.total > 0 => *c.next.get(&next).unwrap_or(&0) as f64 / c.total as f64,
            _ => 0.0,
        }
    }

    pub fn build(self, role: Role, k: f64, vocab_hash: String) -> NgramModel {
        NgramModel {
            role,
            order: self.order,
            k,
            vocab_size: self.vocab_size,
            vocab_hash,
            table: self.table.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    role: Role,
    order: usize,
    k: f64,
    vocab_size: usize,
    vocab_hash: String,
    table: HashMap<Vec<TokenId>, HistoryCounts>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    role: Role,
    order: usize,
    k: f64,
    vocab_size: usize,
    vocab_hash: String,
    entries: Vec<FileEntry>,
}

#[derive(Serialize, Deserialize)]
struct FileEntry {
    history: Vec<TokenId>,
    next: Vec<(TokenId, u64)>,
}

/// Fits an add-k n-gram scorer on `(condition, target)` pairs; targets are
/// unframed token sequences.
pub fn fit_ngram(
    role: Role,
    corpus: &[(Condition, Vec<TokenId>)],
    order: usize,
    k: f64,
    vocab: &Vocabulary,
) -> Result<NgramModel> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot fit an n-gram model on an empty corpus".into()));
    }
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::Config(format!(
            "n-gram order must be in 1..={MAX_ORDER}, got {order}"
        )));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Config(format!("smoothing constant must be positive, got {k}")));
    }
    let mut builder = NgramBuilder::new(order, vocab.len());
    for (cond, target) in corpus {
        if cond.role != role {
            return Err(Error::Config(format!("{} pair in a {role} corpus", cond.role)));
        }
        cond.validate().map_err(|e| Error::Config(e.to_string()))?;
        let mut lead = cond.linearize();
        lead.push(SOS);
        let mut events = target.clone();
        events.push(EOS);
        builder.observe_sequence(&lead, &events);
    }
    Ok(builder.build(role, k, vocab.hash()))
}

impl NgramModel {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    fn history(&self, condition: &Condition, prefix: &[TokenId]) -> Vec<TokenId> {
        let h = self.order - 1;
        if h == 0 {
            return Vec::new();
        }
        let mut seq = if prefix.len() >= h {
            Vec::new()
        } else {
            condition.linearize()
        };
        seq.extend_from_slice(prefix);
        seq[seq.len().saturating_sub(h)..].to_vec()
    }

    pub fn to_file_string(&self) -> String {
        let mut entries: Vec<FileEntry> = self
            .table
            .iter()
            .map(|(h, c)| FileEntry {
                history: h.clone(),
                next: c.next.iter().map(|(&t, &n)| (t, n)).collect(),
            })
            .collect();
        entries.sort_by(|a, b| a.history.cmp(&b.history));
        let file = ModelFile {
            format: FORMAT.into(),
            version: VERSION,
            role: self.role,
            order: self.order,
            k: self.k,
            vocab_size: self.vocab_size,
            vocab_hash: self.vocab_hash.clone(),
            entries,
        };
        let mut s = serde_json::to_string(&file).expect("model file serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::Invalid(format!(
                "unsupported model format {} v{}",
                file.format, file.version
            )));
        }
        if file.vocab_hash != vocab.hash() || file.vocab_size != vocab.len() {
            return Err(Error::Invalid(format!(
                "model was trained with vocabulary {} but {} was supplied",
                file.vocab_hash,
                vocab.hash()
            )));
        }
        let table = file
            .entries
            .into_iter()
            .map(|e| {
                let next: BTreeMap<_, _> = e.next.into_iter().collect();
                let total = next.values().sum();
                (e.history, HistoryCounts { total, next })
            })
            .collect();
        Ok(Self {
            role: file.role,
            order: file.order,
            k: file.k,
            vocab_size: file.vocab_size,
            vocab_hash: file.vocab_hash,
            table,
        })
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, vocab).map_err(|e| Error::data(path, e.to_string()))
    }
}

impl Scorer for NgramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn descriptor(&self) -> ScorerDescriptor {
        ScorerDescriptor {
            kind: ScorerKind::Ngram {
                order: self.order,
                k: self.k,
            },
            role: Some(self.role),
        }
    }

    fn next_token_logprobs(&self, condition: &Condition, prefix: &[TokenId]) -> Result<Vec<f64>, ScoreError> {
        check_prefix(prefix, self.vocab_size)?;
        let v = self.vocab_size as f64;
        let hist = self.history(condition, prefix);
        let (total, counts) = match self.table.get(&hist) {
            Some(c) => (c.total as f64, Some(&c.next)),
            None => (0.0, None),
        };
        let denom = (total + self.k * v).ln();
        let floor = self.k.ln() - denom;
        let mut out = vec![floor; self.vocab_size];
        if let Some(counts) = counts {
            for (&tok, &n) in counts {
                out[tok as usize] = (n as f64 + self.k).ln() - denom;
            }
        }
        Ok(out)
    }
}
