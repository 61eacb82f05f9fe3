//! Training-pair construction for the three scorer roles.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{fit_ngram, Condition, NgramModel, Role, DEFAULT_K, DEFAULT_ORDER};
use crate::data::GroundedExample;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::vocab::{TokenId, Vocabulary, CTRL_HIGH, CTRL_LOW, CTRL_MID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationDistribution {
    /// Prefix length drawn uniformly from `0..=len`.
    #[default]
    Uniform,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub distribution: TruncationDistribution,
    pub seed: u64,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            distribution: TruncationDistribution::Uniform,
            seed: 0,
        }
    }
}

fn response_of(ex: &GroundedExample) -> Result<&[TokenId]> {
    ex.response
        .as_deref()
        .ok_or_else(|| Error::Invalid(format!("example {} has no response", ex.id)))
}

/// One channel pair per example: the response truncated to a prefix (length
/// drawn per `policy`) conditions, the document is the target.
pub fn make_channel_training_pairs(
    examples: &[GroundedExample],
    policy: &TruncationPolicy,
) -> Result<Vec<(Condition, Vec<TokenId>)>> {
    let mut rng = rng_for(policy.seed, "channel-truncation");
    examples
        .iter()
        .map(|ex| {
            let response = response_of(ex)?;
            let n = match policy.distribution {
                TruncationDistribution::Uniform => rng.gen_range(0..=response.len()),
                TruncationDistribution::None => response.len(),
            };
            Ok((
                Condition::channel(ex.context.clone(), response[..n].to_vec()),
                ex.document.clone(),
            ))
        })
        .collect()
}

/// Direct pairs; stored control tokens are kept when `with_control` is set.
pub fn direct_training_pairs(
    examples: &[GroundedExample],
    with_control: bool,
) -> Result<Vec<(Condition, Vec<TokenId>)>> {
    examples
        .iter()
        .map(|ex| {
            let control = if with_control { ex.control.clone() } else { None };
            Ok((
                Condition::direct(ex.context.clone(), ex.document.clone(), control),
                response_of(ex)?.to_vec(),
            ))
        })
        .collect()
}

pub fn lm_training_pairs(examples: &[GroundedExample]) -> Result<Vec<(Condition, Vec<TokenId>)>> {
    examples
        .iter()
        .map(|ex| Ok((Condition::response_lm(ex.context.clone()), response_of(ex)?.to_vec())))
        .collect()
}

/// Orders and smoothing for the three n-gram scorers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub direct_order: usize,
    pub channel_order: usize,
    pub lm_order: usize,
    pub k: f64,
    pub truncation: TruncationPolicy,
    /// Condition the direct model on stored control tokens.
    pub with_control: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            direct_order: DEFAULT_ORDER,
            channel_order: DEFAULT_ORDER,
            lm_order: DEFAULT_ORDER,
            k: DEFAULT_K,
            truncation: TruncationPolicy::default(),
            with_control: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedScorers {
    pub direct: NgramModel,
    pub channel: NgramModel,
    pub lm: NgramModel,
}

/// Fits direct, channel (on truncated responses) and response-LM scorers.
pub fn train_scorers(examples: &[GroundedExample], config: &TrainConfig, vocab: &Vocabulary) -> Result<TrainedScorers> {
    let direct = direct_training_pairs(examples, config.with_control)?;
    let channel = make_channel_training_pairs(examples, &config.truncation)?;
    let lm = lm_training_pairs(examples)?;
    Ok(TrainedScorers {
        direct: fit_ngram(Role::Direct, &direct, config.direct_order, config.k, vocab)?,
        channel: fit_ngram(Role::Channel, &channel, config.channel_order, config.k, vocab)?,
        lm: fit_ngram(Role::ResponseLm, &lm, config.lm_order, config.k, vocab)?,
    })
}

impl TrainedScorers {
    pub fn into_set(self) -> super::ScorerSet {
        super::ScorerSet {
            direct: std::sync::Arc::new(self.direct),
            channel: std::sync::Arc::new(self.channel),
            lm: std::sync::Arc::new(self.lm),
        }
    }
}

/// `|set(response) ∩ set(document)| / |set(response)|`, 0 for an empty response.
pub fn lexical_precision(response: &[TokenId], document: &[TokenId]) -> f64 {
    let r: BTreeSet<_> = response.iter().collect();
    if r.is_empty() {
        return 0.0;
    }
    let d: BTreeSet<_> = document.iter().collect();
    r.intersection(&d).count() as f64 / r.len() as f64
}

/// Lexical-overlap control token: high when precision ≥ `high`, low when
/// precision ≤ `low` (or the response is empty), mid otherwise.
pub fn annotate_control_tokens(
    example: &GroundedExample,
    high: f64,
    low: f64,
    vocab: &Vocabulary,
) -> Result<Vec<TokenId>> {
    if !(0.0..=1.0).contains(&high) || !(0.0..=1.0).contains(&low) || low > high {
        return Err(Error::Config(format!("bad control thresholds high={high} low={low}")));
    }
    let response = example.response.as_deref().unwrap_or_default();
    let name = if response.is_empty() {
        CTRL_LOW
    } else {
        let p = lexical_precision(response, &example.document);
        if p >= high {
            CTRL_HIGH
        } else if p <= low {
            CTRL_LOW
        } else {
            CTRL_MID
        }
    };
    let id = vocab
        .id(name)
        .ok_or_else(|| Error::Config(format!("vocabulary lacks control token {name}")))?;
    Ok(vec![id])
}
