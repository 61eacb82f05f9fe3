//! Locally normalized conditional sequence models.
//!
//! One abstraction serves all three roles of the noisy-channel objective:
//! the direct model `p(u | context, document)`, the channel model
//! `p(document | u, context)` and the response model `p(u | context)`.

mod ngram;
mod remote;
mod training;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{flatten_context, Turn};
use crate::error::ScoreError;
use crate::vocab::{TokenId, EOS, SEP, SOS};

pub use ngram::{fit_ngram, NgramBuilder, NgramModel, DEFAULT_K, DEFAULT_ORDER};
pub use remote::RemoteScorer;
pub use training::{
    annotate_control_tokens, direct_training_pairs, lexical_precision, lm_training_pairs, make_channel_training_pairs,
    train_scorers, TrainConfig, TrainedScorers, TruncationDistribution, TruncationPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Direct,
    Channel,
    #[serde(rename = "lm", alias = "response_lm")]
    ResponseLm,
}

impl Role {
    pub fn wire_name(self) -> &'static str {
        match self {
            Role::Direct => "direct",
            Role::Channel => "channel",
            Role::ResponseLm => "lm",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.wire_name())
    }
}

/// What a scorer conditions on.
///
/// For the channel role the scored sequence is the document, so `document`
/// is absent and `response` holds the (possibly partial) response. A response
/// ending in `<eos>` is complete.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Condition {
    pub role: Role,
    pub context: Vec<Turn>,
    pub document: Option<Vec<TokenId>>,
    pub response: Option<Vec<TokenId>>,
    pub control: Option<Vec<TokenId>>,
}

impl Condition {
    pub fn direct(context: Vec<Turn>, document: Vec<TokenId>, control: Option<Vec<TokenId>>) -> Self {
        Self {
            role: Role::Direct,
            context,
            document: Some(document),
            response: None,
            control,
        }
    }

    pub fn channel(context: Vec<Turn>, response: Vec<TokenId>) -> Self {
        Self {
            role: Role::Channel,
            context,
            document: None,
            response: Some(response),
            control: None,
        }
    }

    pub fn response_lm(context: Vec<Turn>) -> Self {
        Self {
            role: Role::ResponseLm,
            context,
            document: None,
            response: None,
            control: None,
        }
    }

    /// The channel condition for response `response` sharing this context.
    pub fn to_channel(&self, response: &[TokenId]) -> Self {
        Self::channel(self.context.clone(), response.to_vec())
    }

    pub fn to_response_lm(&self) -> Self {
        Self::response_lm(self.context.clone())
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        let bad = |m: &str| Err(ScoreError::InvalidInput(format!("{} condition {m}", self.role)));
        match self.role {
            Role::Direct if self.document.is_none() => bad("requires a document"),
            Role::Channel if self.document.is_some() => bad("must not condition on the document"),
            Role::Channel if self.response.is_none() => bad("requires a response"),
            Role::ResponseLm if self.document.is_some() => bad("must not see the document"),
            _ => Ok(()),
        }
    }

    /// Flattened conditioning sequence, preceding the `<sos>` of the target.
    ///
    /// * direct: `document <sep> context <sep> control`
    /// * channel: `context <sep> response` (a trailing `<eos>` is dropped)
    /// * response LM: `context`
    pub fn linearize(&self) -> Vec<TokenId> {
        let ctx = flatten_context(&self.context);
        match self.role {
            Role::Direct => {
                let mut out = self.document.clone().unwrap_or_default();
                out.push(SEP);
                out.extend(ctx);
                out.push(SEP);
                if let Some(c) = &self.control {
                    out.extend(c);
                }
                out
            }
            Role::Channel => {
                let mut out = ctx;
                out.push(SEP);
                let resp = self.response.as_deref().unwrap_or_default();
                let resp = resp.strip_suffix(&[EOS]).unwrap_or(resp);
                out.extend_from_slice(resp);
                out
            }
            Role::ResponseLm => ctx,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerKind {
    Uniform,
    Tabular,
    Ngram { order: usize, k: f64 },
    Remote { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerDescriptor {
    #[serde(flatten)]
    pub kind: ScorerKind,
    pub role: Option<Role>,
}

pub(crate) fn check_prefix(prefix: &[TokenId], vocab_size: usize) -> Result<(), ScoreError> {
    if prefix.first() != Some(&SOS) {
        return Err(ScoreError::InvalidInput("prefix must begin with <sos>".into()));
    }
    if let Some(bad) = prefix.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(ScoreError::InvalidInput(format!("token id {bad} outside vocabulary")));
    }
    Ok(())
}

pub trait Scorer: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn descriptor(&self) -> ScorerDescriptor;

    /// Natural-log distribution over the whole vocabulary for the token
    /// following `prefix` (which starts with `<sos>`).
    fn next_token_logprobs(&self, condition: &Condition, prefix: &[TokenId]) -> Result<Vec<f64>, ScoreError>;

    /// Log-probability of `<sos>`-started `prefix`: the sum of the step
    /// log-probabilities of every token after `<sos>`. When the prefix ends
    /// in `<eos>` this is the probability of the complete sequence.
    fn prefix_logprob(&self, condition: &Condition, prefix: &[TokenId]) -> Result<f64, ScoreError> {
        check_prefix(prefix, self.vocab_size())?;
        let mut total = 0.0;
        for i in 1..prefix.len() {
            let dist = self.next_token_logprobs(condition, &prefix[..i])?;
            total += dist[prefix[i] as usize];
        }
        Ok(total)
    }

    /// Log-probability of a complete `<sos> … <eos>` sequence.
    fn sequence_logprob(&self, condition: &Condition, sequence: &[TokenId]) -> Result<f64, ScoreError> {
        if sequence.len() < 2 || sequence.last() != Some(&EOS) {
            return Err(ScoreError::InvalidInput(
                "sequence must be framed by <sos> … <eos>".into(),
            ));
        }
        self.prefix_logprob(condition, sequence)
    }
}

/// `<sos> tokens <eos>`.
pub fn frame(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(SOS);
    out.extend_from_slice(tokens);
    out.push(EOS);
    out
}

/// The three models of the noisy-channel objective.
#[derive(Clone)]
pub struct ScorerSet {
    pub direct: Arc<dyn Scorer>,
    pub channel: Arc<dyn Scorer>,
    pub lm: Arc<dyn Scorer>,
}

impl ScorerSet {
    pub fn descriptors(&self) -> [ScorerDescriptor; 3] {
        [
            self.direct.descriptor(),
            self.channel.descriptor(),
            self.lm.descriptor(),
        ]
    }
}

/// Assigns `-ln |V|` to every token.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    vocab_size: usize,
}

impl UniformScorer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 0);
        Self { vocab_size }
    }
}

impl Scorer for UniformScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn descriptor(&self) -> ScorerDescriptor {
        ScorerDescriptor {
            kind: ScorerKind::Uniform,
            role: None,
        }
    }

    fn next_token_logprobs(&self, _: &Condition, prefix: &[TokenId]) -> Result<Vec<f64>, ScoreError> {
        check_prefix(prefix, self.vocab_size)?;
        Ok(vec![-(self.vocab_size as f64).ln(); self.vocab_size])
    }
}

/// Sum of `exp` over a log-probability vector.
pub fn total_mass(logprobs: &[f64]) -> f64 {
    logprobs.iter().map(|lp| lp.exp()).sum()
}
