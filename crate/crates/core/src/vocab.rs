//! Closed token inventory with reserved markers.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::seed::sha256_hex;

pub type TokenId = u32;

pub const SOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;
pub const SEP: TokenId = 3;

/// Surface forms of the reserved symbols, in id order.
pub const RESERVED: [&str; 4] = ["<sos>", "<eos>", "<unk>", "<sep>"];

/// Control tokens encoding the lexical-overlap bucket of a response.
pub const CTRL_HIGH: &str = "<ctrl-high>";
pub const CTRL_MID: &str = "<ctrl-mid>";
pub const CTRL_LOW: &str = "<ctrl-low>";
pub const CONTROL_TOKENS: [&str; 3] = [CTRL_HIGH, CTRL_MID, CTRL_LOW];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from the reserved symbols followed by `tokens`.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into));
        Self::from_lines(all)
    }

    fn from_lines(lines: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (i, tok) in lines.into_iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("token {i} is empty or contains whitespace")));
            }
            if i < RESERVED.len() && tok != RESERVED[i] {
                return Err(Error::Invalid(format!(
                    "line {} must be reserved symbol {}, found {tok}",
                    i + 1,
                    RESERVED[i]
                )));
            }
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Invalid(format!("duplicate token {tok}")));
            }
            tokens.push(tok);
        }
        if tokens.len() < RESERVED.len() {
            return Err(Error::Invalid("vocabulary lacks reserved symbols".into()));
        }
        Ok(Self { tokens, index })
    }

    /// Counts whitespace tokens (lowercased) and keeps those seen at least
    /// `min_count` times, ordered by descending frequency then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for tok in line.as_ref().split_whitespace() {
                *counts.entry(tok.to_lowercase()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_count && !RESERVED.contains(&tok.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    /// Returns a copy with the control tokens appended (those not yet present).
    pub fn with_control_tokens(&self) -> Self {
        let mut lines = self.tokens.clone();
        for ctrl in CONTROL_TOKENS {
            if !self.index.contains_key(ctrl) {
                lines.push(ctrl.to_string());
            }
        }
        Self::from_lines(lines).expect("appending fresh tokens keeps the vocabulary valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_valid(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    pub fn is_control(&self, id: TokenId) -> bool {
        self.token(id).is_some_and(|t| CONTROL_TOKENS.contains(&t))
    }

    /// Ids a decoder may emit besides `<eos>`.
    pub fn generable_ids(&self) -> Vec<TokenId> {
        (0..self.tokens.len() as TokenId)
            .filter(|&id| !Self::is_reserved(id) && !self.is_control(id))
            .collect()
    }

    /// Lowercase whitespace tokenization with `<unk>` fallback.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|t| self.id_or_unk(&t.to_lowercase()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number is the token id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_lines(text.lines().map(str::to_string))
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_file_string().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::data(path, e.to_string()))
    }
}
