use super::{
    allowed_tokens, combined_score, prune, rank_order, sort_hypotheses, Hypothesis, NBestList, Provenance,
    ScalingConfig,
};
use super::{BeamConfig, DecoderKind};
use crate::error::Result;
use crate::scorer::{Condition, Scorer};
use crate::vocab::{Vocabulary, EOS};

/// Left-to-right beam search under the direct model alone.
///
/// Each step extends every active hypothesis by every allowed token and
/// keeps the `beam` best candidates by accumulated log-probability; those
/// that emitted `<eos>` move to the finished pool, the rest stay active. At
/// step `max_len` only `<eos>` is offered. Search stops when nothing is
/// active, or with `early_stop` once the pool holds `beam` entries. With
/// `beam = 1` this is greedy decoding.
pub fn beam_search_direct(
    direct: &dyn Scorer,
    condition: &Condition,
    cfg: &BeamConfig,
    vocab: &Vocabulary,
) -> Result<NBestList> {
    cfg.validate()?;
    condition.validate()?;
    let allowed = allowed_tokens(vocab, direct.vocab_size())?;
    let scaling = ScalingConfig::direct_only();
    let k = cfg.beam;

    let mut active = vec![Hypothesis::root()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..=cfg.max_len {
        let options: &[_] = if step == cfg.max_len { &[EOS] } else { &allowed };
        let mut candidates = Vec::with_capacity(active.len() * options.len());
        for h in &active {
            let dist = direct.next_token_logprobs(condition, &h.tokens)?;
            for &v in options {
                let lp = dist[v as usize];
                if lp.is_finite() {
                    let mut c = h.extend(v, lp);
                    c.combined = combined_score(&c.breakdown, &scaling);
                    candidates.push(c);
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| rank_order(a.combined, &a.tokens, b.combined, &b.tokens));
        let (done, next) = prune(candidates, k);
        finished.extend(done);
        active = next;
        if active.is_empty() || (cfg.early_stop && finished.len() >= k) {
            break;
        }
    }

    let unfinished = finished.is_empty();
    let mut hypotheses = if unfinished { active } else { finished };
    sort_hypotheses(&mut hypotheses, cfg.length_normalize_final);
    hypotheses.truncate(k);
    if hypotheses.is_empty() {
        return Err(
            crate::error::ScoreError::InvalidInput("direct model assigns zero mass to every extension".into()).into(),
        );
    }
    Ok(NBestList {
        hypotheses,
        provenance: Provenance {
            decoder: DecoderKind::Direct,
            scaling,
            beam: *cfg,
            effective_beam: k,
        },
        unfinished,
    })
}
