//! Decoding procedures.
//!
//! Every decoder scores hypotheses with the same three-way breakdown
//! (direct, channel and response-LM log-probabilities) and combines them
//! with a [`ScalingConfig`]:
//!
//! ```text
//! combined = λ0 · direct_lp + λ1 · channel_lp + λ2 · lm_lp
//! ```
//!
//! Ordering is total everywhere: scores are compared after rounding to
//! [`SCORE_RESOLUTION`], remaining ties go to the lexicographically smaller
//! token sequence.

mod beam;
mod online;
mod oracle;
mod rerank;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ScoreError};
use crate::scorer::{frame, Condition, ScorerSet};
use crate::vocab::{TokenId, Vocabulary, EOS, SOS};

pub use beam::beam_search_direct;
pub use online::{online_decode, online_decode_liu};
pub use oracle::{enumerate_oracle, OracleResult};
pub use rerank::{rerank, RerankOutcome};

/// Scores closer than this compare equal.
pub const SCORE_RESOLUTION: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub lambda_direct: f64,
    pub lambda_channel: f64,
    pub lambda_lm: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self::direct_only()
    }
}

impl ScalingConfig {
    pub fn new(lambda_direct: f64, lambda_channel: f64, lambda_lm: f64) -> Result<Self> {
        let s = Self {
            lambda_direct,
            lambda_channel,
            lambda_lm,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_direct", self.lambda_direct),
            ("lambda_channel", self.lambda_channel),
            ("lambda_lm", self.lambda_lm),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub const fn direct_only() -> Self {
        Self {
            lambda_direct: 1.0,
            lambda_channel: 0.0,
            lambda_lm: 0.0,
        }
    }

    /// Operating point used for n-best reranking.
    pub const fn reranking_default() -> Self {
        Self {
            lambda_direct: 1.0,
            lambda_channel: 0.5,
            lambda_lm: 0.2,
        }
    }

    /// Operating point used for online decoding.
    pub const fn online_default() -> Self {
        Self {
            lambda_direct: 1.0,
            lambda_channel: 0.6,
            lambda_lm: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub direct_lp: f64,
    pub channel_lp: f64,
    pub lm_lp: f64,
}

/// `λ0·direct + λ1·channel + λ2·lm`; a term with zero weight is dropped, so
/// an impossible event under an unweighted model does not poison the sum.
pub fn combined_score(breakdown: &ScoreBreakdown, scaling: &ScalingConfig) -> f64 {
    [
        (scaling.lambda_direct, breakdown.direct_lp),
        (scaling.lambda_channel, breakdown.channel_lp),
        (scaling.lambda_lm, breakdown.lm_lp),
    ]
    .into_iter()
    .filter(|&(l, _)| l != 0.0)
    .map(|(l, lp)| l * lp)
    .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Starts with `<sos>`; ends with `<eos>` when finished.
    pub tokens: Vec<TokenId>,
    pub finished: bool,
    pub breakdown: ScoreBreakdown,
    pub combined: f64,
}

impl Hypothesis {
    pub fn root() -> Self {
        Self {
            tokens: vec![SOS],
            finished: false,
            breakdown: ScoreBreakdown::default(),
            combined: 0.0,
        }
    }

    /// `self` extended by `token` with an extra direct log-probability.
    pub(crate) fn extend(&self, token: TokenId, step_lp: f64) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        Self {
            tokens,
            finished: token == EOS,
            breakdown: ScoreBreakdown {
                direct_lp: self.breakdown.direct_lp + step_lp,
                ..self.breakdown
            },
            combined: self.combined,
        }
    }

    /// Generated tokens after `<sos>`, `<eos>` included when finished.
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[1..]
    }

    /// Response content: no `<sos>`, no `<eos>`.
    pub fn response(&self) -> &[TokenId] {
        let g = self.generated();
        g.strip_suffix(&[EOS]).unwrap_or(g)
    }

    /// Generated-token count, `<eos>` included.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Final-selection score: combined, or combined per generated token.
    pub fn selection_key(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.combined / self.len().max(1) as f64
        } else {
            self.combined
        }
    }
}

fn quantize(x: f64) -> i64 {
    if x.is_nan() || x == f64::NEG_INFINITY {
        i64::MIN
    } else if x == f64::INFINITY {
        i64::MAX
    } else {
        (x / SCORE_RESOLUTION).round() as i64
    }
}

/// Better-first order on `(score, tokens)`.
pub(crate) fn rank_order(a_score: f64, a_tokens: &[TokenId], b_score: f64, b_tokens: &[TokenId]) -> Ordering {
    quantize(b_score)
        .cmp(&quantize(a_score))
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Keeps the `k` best of the best-first `ranked` candidates, split into
/// (finished, active).
pub(crate) fn prune(ranked: Vec<Hypothesis>, k: usize) -> (Vec<Hypothesis>, Vec<Hypothesis>) {
    ranked.into_iter().take(k).partition(|h| h.finished)
}

/// Sorts best first: finished before unfinished, then by selection key.
/// The head agrees with [`select_best`].
pub fn sort_hypotheses(hyps: &mut [Hypothesis], length_normalize: bool) {
    hyps.sort_by(|a, b| {
        b.finished.cmp(&a.finished).then_with(|| {
            rank_order(
                a.selection_key(length_normalize),
                &a.tokens,
                b.selection_key(length_normalize),
                &b.tokens,
            )
        })
    });
}

/// Final selection: finished hypotheses only when any exist.
pub fn select_best(hyps: &[Hypothesis], length_normalize: bool) -> Option<&Hypothesis> {
    let any_finished = hyps.iter().any(|h| h.finished);
    hyps.iter().filter(|h| h.finished || !any_finished).min_by(|a, b| {
        rank_order(
            a.selection_key(length_normalize),
            &a.tokens,
            b.selection_key(length_normalize),
            &b.tokens,
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam: usize,
    pub liu_k1: usize,
    pub liu_k2: usize,
    /// Maximum response length, `<eos>` not counted.
    pub max_len: usize,
    pub length_normalize_final: bool,
    /// Stop as soon as `beam` hypotheses have finished instead of running
    /// until the active beam empties.
    pub early_stop: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            liu_k1: 5,
            liu_k2: 2,
            max_len: 20,
            length_normalize_final: true,
            early_stop: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.liu_k1 == 0 || self.liu_k2 == 0 {
            return Err(Error::Config("beam sizes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_beam(&self, kind: DecoderKind) -> usize {
        match kind {
            DecoderKind::OnlineLiu => self.liu_k1 * self.liu_k2,
            _ => self.beam,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Direct,
    Rerank,
    OnlineOurs,
    OnlineLiu,
    Oracle,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 5] = [
        DecoderKind::Direct,
        DecoderKind::Rerank,
        DecoderKind::OnlineOurs,
        DecoderKind::OnlineLiu,
        DecoderKind::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Direct => "direct",
            DecoderKind::Rerank => "rerank",
            DecoderKind::OnlineOurs => "online-ours",
            DecoderKind::OnlineLiu => "online-liu",
            DecoderKind::Oracle => "oracle",
        }
    }

    /// Default scaling for this decoder.
    pub fn default_scaling(self) -> ScalingConfig {
        match self {
            DecoderKind::Direct => ScalingConfig::direct_only(),
            DecoderKind::Rerank => ScalingConfig::reranking_default(),
            DecoderKind::OnlineOurs | DecoderKind::OnlineLiu | DecoderKind::Oracle => ScalingConfig::online_default(),
        }
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder {s}")))
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub scaling: ScalingConfig,
    pub beam: BeamConfig,
}

impl DecoderConfig {
    pub fn new(kind: DecoderKind, beam: BeamConfig) -> Self {
        Self {
            kind,
            scaling: kind.default_scaling(),
            beam,
        }
    }
}

/// Where an n-best list came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub decoder: DecoderKind,
    pub scaling: ScalingConfig,
    pub beam: BeamConfig,
    pub effective_beam: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    /// Best first by selection key.
    pub hypotheses: Vec<Hypothesis>,
    pub provenance: Provenance,
    /// No hypothesis emitted `<eos>` within `max_len`.
    pub unfinished: bool,
}

impl NBestList {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }
}

/// Fills channel and LM log-probabilities of `hyp` and recomputes `combined`.
///
/// The channel scores the framed document given the generated tokens (a
/// finished hypothesis passes its `<eos>`, marking the response complete);
/// the LM scores the generated tokens as a prefix.
pub fn refresh(
    hyp: &mut Hypothesis,
    scorers: &ScorerSet,
    condition: &Condition,
    document: &[TokenId],
    scaling: &ScalingConfig,
) -> std::result::Result<(), ScoreError> {
    let channel_cond = condition.to_channel(hyp.generated());
    hyp.breakdown.channel_lp = scorers.channel.sequence_logprob(&channel_cond, document)?;
    hyp.breakdown.lm_lp = scorers.lm.prefix_logprob(&condition.to_response_lm(), &hyp.tokens)?;
    hyp.combined = combined_score(&hyp.breakdown, scaling);
    Ok(())
}

pub(crate) fn framed_document(condition: &Condition) -> std::result::Result<Vec<TokenId>, ScoreError> {
    condition
        .document
        .as_deref()
        .map(frame)
        .ok_or_else(|| ScoreError::InvalidInput("decoding requires a direct condition with a document".into()))
}

/// Tokens a decoder may append: every generable id plus `<eos>`.
pub(crate) fn allowed_tokens(vocab: &Vocabulary, scorer_vocab: usize) -> std::result::Result<Vec<TokenId>, ScoreError> {
    if vocab.len() != scorer_vocab {
        return Err(ScoreError::InvalidInput(format!(
            "vocabulary of {} tokens but scorer covers {}",
            vocab.len(),
            scorer_vocab
        )));
    }
    let mut ids = vec![EOS];
    ids.extend(vocab.generable_ids());
    Ok(ids)
}

/// Result of any decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub best: Hypothesis,
    pub nbest: Vec<Hypothesis>,
    pub unfinished: bool,
    pub effective_beam: usize,
    pub warnings: Vec<String>,
}

/// Runs the decoder selected by `config`. The returned breakdowns are always
/// complete: decoders that do not consult the channel or LM have their
/// hypotheses rescored for reporting.
pub fn decode(
    config: &DecoderConfig,
    scorers: &ScorerSet,
    condition: &Condition,
    vocab: &Vocabulary,
) -> Result<Decoded> {
    config.scaling.validate()?;
    config.beam.validate()?;
    let effective_beam = config.beam.effective_beam(config.kind);
    let normalize = config.beam.length_normalize_final;
    match config.kind {
        DecoderKind::Direct => {
            let nbest = beam_search_direct(scorers.direct.as_ref(), condition, &config.beam, vocab)?;
            let doc = framed_document(condition)?;
            let mut hyps = nbest.hypotheses;
            for h in &mut hyps {
                refresh(h, scorers, condition, &doc, &ScalingConfig::direct_only())?;
            }
            Ok(Decoded {
                best: hyps[0].clone(),
                nbest: hyps,
                unfinished: nbest.unfinished,
                effective_beam,
                warnings: Vec::new(),
            })
        }
        DecoderKind::Rerank => {
            let nbest = beam_search_direct(scorers.direct.as_ref(), condition, &config.beam, vocab)?;
            let unfinished = nbest.unfinished;
            let out = rerank(&nbest, scorers, condition, &config.scaling)?;
            Ok(Decoded {
                best: out.best,
                nbest: out.rescored,
                unfinished,
                effective_beam,
                warnings: out.warnings,
            })
        }
        DecoderKind::OnlineOurs | DecoderKind::OnlineLiu => {
            let nbest = if config.kind == DecoderKind::OnlineOurs {
                online_decode(scorers, condition, &config.scaling, &config.beam, vocab)?
            } else {
                online_decode_liu(scorers, condition, &config.scaling, &config.beam, vocab)?
            };
            Ok(Decoded {
                best: nbest.hypotheses[0].clone(),
                nbest: nbest.hypotheses,
                unfinished: nbest.unfinished,
                effective_beam,
                warnings: Vec::new(),
            })
        }
        DecoderKind::Oracle => {
            let out = enumerate_oracle(
                scorers,
                condition,
                &config.scaling,
                config.beam.max_len,
                normalize,
                vocab,
            )?;
            let mut table = out.table;
            sort_hypotheses(&mut table, normalize);
            table.truncate(config.beam.beam);
            Ok(Decoded {
                best: out.best,
                nbest: table,
                unfinished: false,
                effective_beam,
                warnings: Vec::new(),
            })
        }
    }
}
