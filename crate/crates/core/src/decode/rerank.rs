use serde::{Deserialize, Serialize};

use super::{framed_document, refresh, select_best, sort_hypotheses, Hypothesis, NBestList, ScalingConfig};
use crate::error::{Error, Result};
use crate::scorer::{Condition, ScorerSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankOutcome {
    pub best: Hypothesis,
    /// Rescored hypotheses, best first.
    pub rescored: Vec<Hypothesis>,
    /// One entry per hypothesis dropped because a scorer failed on it.
    pub warnings: Vec<String>,
}

/// Rescores a direct-model n-best list with channel and LM terms and picks
/// the best under `scaling`, using the list's own length-normalization
/// setting. The direct log-probabilities are taken from the list as-is.
pub fn rerank(
    nbest: &NBestList,
    scorers: &ScorerSet,
    condition: &Condition,
    scaling: &ScalingConfig,
) -> Result<RerankOutcome> {
    scaling.validate()?;
    if nbest.hypotheses.is_empty() {
        return Err(Error::Invalid("cannot rerank an empty n-best list".into()));
    }
    let document = framed_document(condition)?;
    let normalize = nbest.provenance.beam.length_normalize_final;
    let mut rescored = Vec::with_capacity(nbest.hypotheses.len());
    let mut warnings = Vec::new();
    for (rank, h) in nbest.hypotheses.iter().enumerate() {
        let mut h = h.clone();
        match refresh(&mut h, scorers, condition, &document, scaling) {
            Ok(()) => rescored.push(h),
            Err(e) => {
                log::warn!("rerank: dropping hypothesis {rank}: {e}");
                warnings.push(format!("hypothesis {rank}: {e}"));
            }
        }
    }
    if rescored.is_empty() {
        return Err(Error::Invalid(format!(
            "every hypothesis failed rescoring: {}",
            warnings.join("; ")
        )));
    }
    sort_hypotheses(&mut rescored, normalize);
    let best = select_best(&rescored, normalize).expect("non-empty").clone();
    Ok(RerankOutcome {
        best,
        rescored,
        warnings,
    })
}
