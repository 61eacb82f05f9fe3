use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::{frame, Condition, Scorer};
use crate::vocab::TokenId;

/// Default floor for zero n-gram precisions.
pub const BLEU_EPSILON: f64 = 1e-9;

fn counts(tokens: &[TokenId]) -> HashMap<TokenId, usize> {
    let mut m = HashMap::new();
    for &t in tokens {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

/// Multiset token F1 between a response and a document.
pub fn token_f1(response: &[TokenId], document: &[TokenId]) -> f64 {
    if response.is_empty() || document.is_empty() {
        return 0.0;
    }
    let d = counts(document);
    let overlap: usize = counts(response)
        .iter()
        .map(|(t, &c)| c.min(d.get(t).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / response.len() as f64;
    let r = overlap as f64 / document.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS length over the response length; 0 for an empty response.
pub fn lcs_ratio(response: &[TokenId], document: &[TokenId]) -> f64 {
    if response.is_empty() {
        return 0.0;
    }
    lcs_len(response, document) as f64 / response.len() as f64
}

/// Corpus-summed BLEU sufficient statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn collect(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>], max_n: usize) -> Result<Self> {
        if hypotheses.len() != references.len() {
            return Err(Error::Invalid(format!(
                "{} hypotheses but {} references",
                hypotheses.len(),
                references.len()
            )));
        }
        if references.is_empty() || max_n == 0 {
            return Err(Error::Invalid("BLEU needs at least one reference and max_n ≥ 1".into()));
        }
        let mut stats = Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
        };
        for (h, r) in hypotheses.iter().zip(references) {
            stats.hyp_len += h.len() as u64;
            stats.ref_len += r.len() as u64;
            for n in 1..=max_n {
                if h.len() < n {
                    continue;
                }
                let mut ref_grams: HashMap<&[TokenId], u64> = HashMap::new();
                for g in r.windows(n) {
                    *ref_grams.entry(g).or_insert(0) += 1;
                }
                let mut hyp_grams: HashMap<&[TokenId], u64> = HashMap::new();
                for g in h.windows(n) {
                    *hyp_grams.entry(g).or_insert(0) += 1;
                }
                stats.totals[n - 1] += (h.len() + 1 - n) as u64;
                stats.matches[n - 1] += hyp_grams
                    .iter()
                    .map(|(g, &c)| c.min(ref_grams.get(g).copied().unwrap_or(0)))
                    .sum::<u64>();
            }
        }
        Ok(stats)
    }

    /// Geometric mean of modified precisions (zero ones floored at
    /// `epsilon`) times the brevity penalty.
    pub fn score(&self, epsilon: f64) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let n = self.matches.len() as f64;
        let log_p: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| {
                if m == 0 || t == 0 {
                    epsilon.ln()
                } else {
                    (m as f64 / t as f64).ln()
                }
            })
            .sum::<f64>()
            / n;
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        (bp * log_p.exp()).min(1.0)
    }
}

pub fn corpus_bleu(
    hypotheses: &[Vec<TokenId>],
    references: &[Vec<TokenId>],
    max_n: usize,
    epsilon: f64,
) -> Result<f64> {
    Ok(BleuStats::collect(hypotheses, references, max_n)?.score(epsilon))
}

/// Pooled log-likelihood statistics for perplexity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerplexityStats {
    pub total_logprob: f64,
    pub total_tokens: u64,
}

impl PerplexityStats {
    /// Scores each response (content tokens only) framed with `<sos>`/`<eos>`;
    /// `<eos>` counts as a token.
    pub fn collect(lm: &dyn Scorer, items: &[(Condition, Vec<TokenId>)]) -> Result<Self> {
        let mut s = Self::default();
        for (cond, response) in items {
            s.total_logprob += lm.sequence_logprob(cond, &frame(response))?;
            s.total_tokens += response.len() as u64 + 1;
        }
        Ok(s)
    }

    pub fn perplexity(&self) -> f64 {
        if self.total_tokens == 0 {
            return f64::NAN;
        }
        (-self.total_logprob / self.total_tokens as f64).exp()
    }
}

/// `exp(−Σ log p / Σ tokens)` over the whole corpus.
pub fn perplexity(lm: &dyn Scorer, items: &[(Condition, Vec<TokenId>)]) -> Result<f64> {
    Ok(PerplexityStats::collect(lm, items)?.perplexity())
}
