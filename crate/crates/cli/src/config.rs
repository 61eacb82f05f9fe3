//! Run configuration: defaults, overlaid by a TOML file, overlaid by
//! `--set key.path=value` flags.

use std::path::Path;

use groundnc::decode::{BeamConfig, DecoderConfig, DecoderKind, ScalingConfig};
use groundnc::eval::{SelectionMetric, BLEU_EPSILON};
use groundnc::retrieval::{Bm25Params, RetrieverKind};
use groundnc::scorer::TrainConfig;
use groundnc::seed::derive_seed;
use groundnc::WorldSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Top-level seed; every random stream is derived from it by label.
    pub seed: u64,
    /// Worker threads; all processors when absent. Never changes outputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub world: WorldSection,
    pub train: TrainConfig,
    pub scorers: ScorerSection,
    pub decoder: DecoderSection,
    pub sweep: SweepSection,
    pub curve: CurveSection,
    pub retrieval: RetrievalSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub vocab_size: usize,
    pub num_documents: usize,
    pub num_contexts: usize,
    pub max_context_len: usize,
    pub max_doc_len: usize,
    pub max_response_len: usize,
    pub grounding_strength: f64,
    pub identifying_contexts: bool,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        let s = WorldSpec::default();
        Self {
            vocab_size: s.vocab_size,
            num_documents: s.num_documents,
            num_contexts: s.num_contexts,
            max_context_len: s.max_context_len,
            max_doc_len: s.max_doc_len,
            max_response_len: s.max_response_len,
            grounding_strength: s.grounding_strength,
            identifying_contexts: s.identifying_contexts,
            train_size: 2000,
            valid_size: 200,
            test_size: 500,
        }
    }
}

impl WorldSection {
    pub fn spec(&self, seed: u64) -> WorldSpec {
        WorldSpec {
            vocab_size: self.vocab_size,
            num_documents: self.num_documents,
            num_contexts: self.num_contexts,
            max_context_len: self.max_context_len,
            max_doc_len: self.max_doc_len,
            max_response_len: self.max_response_len,
            grounding_strength: self.grounding_strength,
            identifying_contexts: self.identifying_contexts,
            seed: derive_seed(seed, "world"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerSource {
    /// `direct.model`, `channel.model`, `lm.model` from `--models`.
    #[default]
    Ngram,
    /// Exact conditionals of the world given by `--world`.
    Exact,
    /// A wire-protocol server serving all three roles.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub source: ScorerSource,
    /// Exact source only: prefix-marginal channel for online decoding.
    pub partial_channel: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for ScorerSection {
    fn default() -> Self {
        Self {
            source: ScorerSource::Ngram,
            partial_channel: true,
            endpoint: None,
            timeout_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub kind: DecoderKind,
    /// Missing weights take the decoder's defaults.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_direct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_channel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_lm: Option<f64>,
    pub beam: BeamConfig,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self {
            kind: DecoderKind::OnlineOurs,
            lambda_direct: None,
            lambda_channel: None,
            lambda_lm: None,
            beam: BeamConfig::default(),
        }
    }
}

impl DecoderSection {
    pub fn resolve(&self) -> CliResult<DecoderConfig> {
        let d = self.kind.default_scaling();
        let scaling = ScalingConfig::new(
            self.lambda_direct.unwrap_or(d.lambda_direct),
            self.lambda_channel.unwrap_or(d.lambda_channel),
            self.lambda_lm.unwrap_or(d.lambda_lm),
        )?;
        self.beam.validate()?;
        Ok(DecoderConfig {
            kind: self.kind,
            scaling,
            beam: self.beam,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// `lo:hi:step` or a comma list.
    pub lambda_channel: String,
    pub lambda_lm: String,
    pub metric: SelectionMetric,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambda_channel: "0:1:0.2".into(),
            lambda_lm: "0:1:0.2".into(),
            metric: SelectionMetric::TokenF1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSection {
    pub budgets: Vec<usize>,
    /// Each runs with its default scaling.
    pub decoders: Vec<DecoderKind>,
}

impl Default for CurveSection {
    fn default() -> Self {
        Self {
            budgets: vec![1, 2, 4, 8, 16],
            decoders: vec![
                DecoderKind::Direct,
                DecoderKind::Rerank,
                DecoderKind::OnlineOurs,
                DecoderKind::OnlineLiu,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    /// `decode` grounds on the retrieved rank-1 document instead of the
    /// example's own.
    pub enabled: bool,
    pub retriever: RetrieverKind,
    /// Add one distractor per document before indexing.
    pub distractors: bool,
    /// Depth written to retrieval dumps.
    pub k: usize,
    pub bm25: Bm25Params,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            enabled: false,
            retriever: RetrieverKind::Bi,
            distractors: false,
            k: 5,
            bm25: Bm25Params::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bleu_epsilon: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bleu_epsilon: BLEU_EPSILON,
        }
    }
}

impl Config {
    /// Fills every derived or defaulted field so the echo is self-contained.
    pub fn resolved(mut self) -> CliResult<Self> {
        let d = self.decoder.resolve()?;
        self.decoder.lambda_direct = Some(d.scaling.lambda_direct);
        self.decoder.lambda_channel = Some(d.scaling.lambda_channel);
        self.decoder.lambda_lm = Some(d.scaling.lambda_lm);
        self.train.truncation.seed = derive_seed(self.seed, "truncation");
        Ok(self)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses `a.b.c=value`; the value is read as TOML, falling back to a bare string.
fn parse_override(spec: &str) -> CliResult<toml::Value> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut out = value;
    for part in key.trim().rsplit('.') {
        if part.is_empty() {
            return Err(CliError::Usage(format!("empty key segment in {spec:?}")));
        }
        let mut t = toml::Table::new();
        t.insert(part.to_string(), out);
        out = toml::Value::Table(t);
    }
    Ok(out)
}

/// Defaults, then the file, then each override in order.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> CliResult<Config> {
    let mut value = toml::Value::try_from(Config::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        merge(&mut value, toml::Value::Table(table));
    }
    for o in overrides {
        merge(&mut value, parse_override(o)?);
    }
    Config::deserialize(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}
