//! Dialog data model and JSONL dataset/collection files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub tokens: Vec<TokenId>,
}

impl Turn {
    pub fn user(tokens: Vec<TokenId>) -> Self {
        Self {
            speaker: Speaker::User,
            tokens,
        }
    }
}

/// Concatenates the tokens of all turns, oldest first.
pub fn flatten_context(turns: &[Turn]) -> Vec<TokenId> {
    turns.iter().flat_map(|t| t.tokens.iter().copied()).collect()
}

/// One dialog with its grounding. Sequences never store reserved markers.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedExample {
    pub id: String,
    pub context: Vec<Turn>,
    pub document: Vec<TokenId>,
    pub response: Option<Vec<TokenId>>,
    pub control: Option<Vec<TokenId>>,
}

/// Which end of an over-long dialog history is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationSide {
    /// Drop the oldest tokens.
    #[default]
    KeepRecent,
    KeepOldest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLimits {
    pub max_history_tokens: usize,
    pub max_document_tokens: usize,
    pub side: TruncationSide,
}

impl Default for InputLimits {
    fn default() -> Self {
        Self {
            max_history_tokens: 384,
            max_document_tokens: 128,
            side: TruncationSide::KeepRecent,
        }
    }
}

impl GroundedExample {
    /// Cuts the history to `max_history_tokens` (whole turns are trimmed token
    /// by token from the dropped side) and the document to its first
    /// `max_document_tokens` tokens.
    pub fn truncated(&self, limits: &InputLimits) -> GroundedExample {
        let mut out = self.clone();
        out.document.truncate(limits.max_document_tokens);
        let total: usize = out.context.iter().map(|t| t.tokens.len()).sum();
        let mut excess = total.saturating_sub(limits.max_history_tokens);
        match limits.side {
            TruncationSide::KeepRecent => {
                for turn in out.context.iter_mut() {
                    let cut = excess.min(turn.tokens.len());
                    turn.tokens.drain(..cut);
                    excess -= cut;
                }
            }
            TruncationSide::KeepOldest => {
                for turn in out.context.iter_mut().rev() {
                    let cut = excess.min(turn.tokens.len());
                    let keep = turn.tokens.len() - cut;
                    turn.tokens.truncate(keep);
                    excess -= cut;
                }
            }
        }
        out.context.retain(|t| !t.tokens.is_empty());
        out
    }
}

/// The document base, keyed by document id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DocumentCollection {
    pub documents: BTreeMap<String, Vec<TokenId>>,
}

impl DocumentCollection {
    pub fn new(documents: BTreeMap<String, Vec<TokenId>>) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::Invalid("document collection is empty".into()));
        }
        Ok(Self { documents })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[TokenId]> {
        self.documents.get(id).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct RawTurn {
    speaker: Speaker,
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct RawExample {
    id: String,
    context: Vec<RawTurn>,
    document: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    control: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawDocument {
    doc_id: String,
    text: String,
}

fn check_no_reserved(text: &str, field: &str, line: usize) -> std::result::Result<(), String> {
    for tok in text.split_whitespace() {
        let lower = tok.to_lowercase();
        if RESERVED.contains(&lower.as_str()) {
            return Err(format!("reserved symbol {lower} in {field} at line {line}"));
        }
    }
    Ok(())
}

fn field<'a>(
    obj: &'a serde_json::Map<String, Value>,
    name: &str,
    line: usize,
) -> std::result::Result<&'a Value, String> {
    match obj.get(name) {
        Some(Value::Null) | None => Err(format!("{name} missing at line {line}")),
        Some(v) => Ok(v),
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, name: &str, line: usize) -> std::result::Result<String, String> {
    field(obj, name, line)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| format!("{name} is not a string at line {line}"))
}

fn optional_string(
    obj: &serde_json::Map<String, Value>,
    name: &str,
    line: usize,
) -> std::result::Result<Option<String>, String> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(format!("{name} is not a string at line {line}")),
    }
}

/// Parses one dataset record. `line` is 1-based and only used in messages.
pub fn parse_example(text: &str, line: usize, vocab: &Vocabulary) -> std::result::Result<GroundedExample, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON at line {line}: {e}"))?;
    let obj = value
        .as_object()
        .ok_or_else(|| format!("record at line {line} is not an object"))?;
    let id = string_field(obj, "id", line)?;
    let turns = field(obj, "context", line)?
        .as_array()
        .ok_or_else(|| format!("context is not an array at line {line}"))?;
    let mut context = Vec::with_capacity(turns.len());
    for turn in turns {
        let raw: RawTurn =
            serde_json::from_value(turn.clone()).map_err(|e| format!("bad context turn at line {line}: {e}"))?;
        check_no_reserved(&raw.text, "context", line)?;
        context.push(Turn {
            speaker: raw.speaker,
            tokens: vocab.tokenize(&raw.text),
        });
    }
    let document = string_field(obj, "document", line)?;
    check_no_reserved(&document, "document", line)?;
    let response = optional_string(obj, "response", line)?;
    let control = optional_string(obj, "control", line)?;
    for (name, text) in [("response", &response), ("control", &control)] {
        if let Some(text) = text {
            check_no_reserved(text, name, line)?;
        }
    }
    Ok(GroundedExample {
        id,
        context,
        document: vocab.tokenize(&document),
        response: response.map(|r| vocab.tokenize(&r)),
        control: control.map(|c| vocab.tokenize(&c)),
    })
}

pub fn load_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<GroundedExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_example(&line, i + 1, vocab).map_err(|m| Error::data(path, m))?);
    }
    Ok(out)
}

/// Renders an example back into its JSONL record (single-space joined text).
pub fn example_to_json(example: &GroundedExample, vocab: &Vocabulary) -> String {
    let raw = RawExample {
        id: example.id.clone(),
        context: example
            .context
            .iter()
            .map(|t| RawTurn {
                speaker: t.speaker,
                text: vocab.detokenize(&t.tokens),
            })
            .collect(),
        document: vocab.detokenize(&example.document),
        response: example.response.as_ref().map(|r| vocab.detokenize(r)),
        control: example.control.as_ref().map(|c| vocab.detokenize(c)),
    };
    serde_json::to_string(&raw).expect("plain record serializes")
}

pub fn write_dataset(path: &Path, examples: &[GroundedExample], vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&example_to_json(ex, vocab));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_collection(path: &Path, vocab: &Vocabulary) -> Result<DocumentCollection> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut documents = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(line)
            .map_err(|e| Error::data(path, format!("malformed document at line {}: {e}", i + 1)))?;
        if documents
            .insert(raw.doc_id.clone(), vocab.tokenize(&raw.text))
            .is_some()
        {
            return Err(Error::data(
                path,
                format!("duplicate doc_id {} at line {}", raw.doc_id, i + 1),
            ));
        }
    }
    DocumentCollection::new(documents).map_err(|e| Error::data(path, e.to_string()))
}

pub fn write_collection(path: &Path, collection: &DocumentCollection, vocab: &Vocabulary) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for (id, tokens) in &collection.documents {
        let raw = RawDocument {
            doc_id: id.clone(),
            text: vocab.detokenize(tokens),
        };
        writeln!(file, "{}", serde_json::to_string(&raw)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
