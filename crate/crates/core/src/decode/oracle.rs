use serde::{Deserialize, Serialize};

use super::{allowed_tokens, framed_document, refresh, select_best, Hypothesis, ScalingConfig};
use crate::error::{Error, Result};
use crate::scorer::{Condition, ScorerSet};
use crate::vocab::{TokenId, Vocabulary, EOS};

/// Largest `G^max_len` the oracle will enumerate.
pub const ORACLE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best: Hypothesis,
    /// Every finished response up to `max_len` content tokens, in
    /// depth-first lexicographic order.
    pub table: Vec<Hypothesis>,
}

/// Scores every response of at most `max_len` generable tokens and returns
/// the argmax of the combined score (per generated token when
/// `length_normalize` is set). Direct log-probabilities accumulate step by
/// step exactly as the beam decoders do, so scores agree bit for bit.
pub fn enumerate_oracle(
    scorers: &ScorerSet,
    condition: &Condition,
    scaling: &ScalingConfig,
    max_len: usize,
    length_normalize: bool,
    vocab: &Vocabulary,
) -> Result<OracleResult> {
    scaling.validate()?;
    condition.validate()?;
    let allowed = allowed_tokens(vocab, scorers.direct.vocab_size())?;
    let content: Vec<TokenId> = allowed.iter().copied().filter(|&t| t != EOS).collect();
    let size = (content.len() as f64).powi(max_len as i32);
    if size > ORACLE_LIMIT {
        return Err(Error::Config(format!(
            "oracle would enumerate {}^{} sequences, above the limit of {ORACLE_LIMIT}",
            content.len(),
            max_len
        )));
    }
    let document = framed_document(condition)?;

    let mut table = Vec::new();
    let mut stack = vec![Hypothesis::root()];
    while let Some(h) = stack.pop() {
        let dist = scorers.direct.next_token_logprobs(condition, &h.tokens)?;
        let mut done = h.extend(EOS, dist[EOS as usize]);
        refresh(&mut done, scorers, condition, &document, scaling)?;
        table.push(done);
        if h.len() < max_len {
            // reversed so the stack pops in ascending token order
            for &v in content.iter().rev() {
                stack.push(h.extend(v, dist[v as usize]));
            }
        }
    }
    let best = select_best(&table, length_normalize)
        .cloned()
        .ok_or_else(|| Error::Invalid("empty enumeration".into()))?;
    Ok(OracleResult { best, table })
}
