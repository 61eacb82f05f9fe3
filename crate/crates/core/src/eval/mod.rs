//! Surface metrics, reports and experiment drivers.

mod experiment;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::data::Turn;
use crate::error::Result;
use crate::scorer::{Condition, Scorer};
use crate::vocab::TokenId;

pub use experiment::{
    budget_curve, curve_csv, evaluate_config, factorize_budget, parse_axis, parse_grid, run_decoder, sweep, CurveRow,
    SelectionMetric, SweepPoint, SweepResult,
};
pub use metrics::{corpus_bleu, lcs_len, lcs_ratio, perplexity, token_f1, BleuStats, PerplexityStats, BLEU_EPSILON};

/// Stamped into every report: the metric standing in for factuality.
pub const FACTUALITY_PROXY: &str = "token_f1";

/// One response to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub context: Vec<Turn>,
    pub response: Vec<TokenId>,
    /// Grounding the response is compared against.
    pub document: Vec<TokenId>,
    pub reference: Option<Vec<TokenId>>,
    /// Selection key of the decoded hypothesis, if any.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub id: String,
    pub token_f1: f64,
    pub lcs_ratio: f64,
    pub length: usize,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub factuality_proxy: String,
    pub count: usize,
    pub token_f1: f64,
    pub token_f1_stderr: f64,
    pub lcs_ratio: f64,
    pub mean_length: f64,
    pub mean_score: Option<f64>,
    pub bleu: Option<f64>,
    pub bleu_stats: Option<BleuStats>,
    pub perplexity: Option<f64>,
    pub perplexity_stats: Option<PerplexityStats>,
    pub failures: Vec<String>,
    pub examples: Vec<ExampleMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

impl MetricReport {
    /// Per-example metrics and corpus aggregates. BLEU is computed when every
    /// item has a reference; perplexity when `lm` is given.
    pub fn compute(items: &[EvalItem], lm: Option<&dyn Scorer>, bleu_epsilon: f64) -> Result<Self> {
        let examples: Vec<ExampleMetrics> = items
            .iter()
            .map(|it| ExampleMetrics {
                id: it.id.clone(),
                token_f1: token_f1(&it.response, &it.document),
                lcs_ratio: lcs_ratio(&it.response, &it.document),
                length: it.response.len(),
                score: it.score,
            })
            .collect();
        let (f1, n) = mean(examples.iter().map(|e| e.token_f1));
        let var = if n > 1 {
            examples.iter().map(|e| (e.token_f1 - f1).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let (bleu, bleu_stats) = if !items.is_empty() && items.iter().all(|it| it.reference.is_some()) {
            let hyps: Vec<_> = items.iter().map(|it| it.response.clone()).collect();
            let refs: Vec<_> = items
                .iter()
                .map(|it| it.reference.clone().unwrap_or_default())
                .collect();
            let stats = BleuStats::collect(&hyps, &refs, 4)?;
            (Some(stats.score(bleu_epsilon)), Some(stats))
        } else {
            (None, None)
        };
        let (perplexity, perplexity_stats) = match lm {
            Some(lm) if !items.is_empty() => {
                let pairs: Vec<_> = items
                    .iter()
                    .map(|it| (Condition::response_lm(it.context.clone()), it.response.clone()))
                    .collect();
                let stats = PerplexityStats::collect(lm, &pairs)?;
                (Some(stats.perplexity()), Some(stats))
            }
            _ => (None, None),
        };
        let scores: Vec<f64> = examples.iter().filter_map(|e| e.score).collect();
        Ok(Self {
            factuality_proxy: FACTUALITY_PROXY.to_string(),
            count: n,
            token_f1: f1,
            token_f1_stderr: (var / n.max(1) as f64).sqrt(),
            lcs_ratio: mean(examples.iter().map(|e| e.lcs_ratio)).0,
            mean_length: mean(examples.iter().map(|e| e.length as f64)).0,
            mean_score: (!scores.is_empty()).then(|| mean(scores.iter().copied()).0),
            bleu,
            bleu_stats,
            perplexity,
            perplexity_stats,
            failures: Vec::new(),
            examples,
        })
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "token_f1" => Some(self.token_f1),
            "lcs_ratio" => Some(self.lcs_ratio),
            "mean_length" => Some(self.mean_length),
            "mean_score" => self.mean_score,
            "bleu" => self.bleu,
            "perplexity" => self.perplexity,
            _ => None,
        }
    }

    /// Per-example JSONL sidecar.
    pub fn examples_jsonl(&self) -> String {
        self.examples
            .iter()
            .map(|e| serde_json::to_string(e).expect("metrics serialize") + "\n")
            .collect()
    }
}
