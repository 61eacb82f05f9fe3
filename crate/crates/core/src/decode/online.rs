use super::{
    allowed_tokens, framed_document, prune, rank_order, refresh, select_best, sort_hypotheses, BeamConfig, DecoderKind,
    Hypothesis, NBestList, Provenance, ScalingConfig,
};
use crate::error::{Result, ScoreError};
use crate::scorer::{Condition, ScorerSet};
use crate::vocab::{TokenId, Vocabulary, EOS};

struct Pools {
    active: Vec<Hypothesis>,
    finished: Vec<Hypothesis>,
}

impl Pools {
    /// True when search should stop.
    fn absorb(&mut self, finished: Vec<Hypothesis>, active: Vec<Hypothesis>, target: usize, early_stop: bool) -> bool {
        self.finished.extend(finished);
        self.active = active;
        self.active.is_empty() || (early_stop && self.finished.len() >= target)
    }

    fn into_nbest(
        self,
        kind: DecoderKind,
        scaling: &ScalingConfig,
        cfg: &BeamConfig,
        keep: usize,
    ) -> Result<NBestList> {
        let unfinished = self.finished.is_empty();
        let mut hypotheses = if unfinished { self.active } else { self.finished };
        if hypotheses.is_empty() {
            return Err(ScoreError::InvalidInput("every extension has zero probability".into()).into());
        }
        sort_hypotheses(&mut hypotheses, cfg.length_normalize_final);
        debug_assert_eq!(
            select_best(&hypotheses, cfg.length_normalize_final).map(|h| &h.tokens),
            Some(&hypotheses[0].tokens)
        );
        hypotheses.truncate(keep);
        Ok(NBestList {
            hypotheses,
            provenance: Provenance {
                decoder: kind,
                scaling: *scaling,
                beam: *cfg,
                effective_beam: cfg.effective_beam(kind),
            },
            unfinished,
        })
    }
}

fn options(step: usize, cfg: &BeamConfig, allowed: &[TokenId]) -> Vec<TokenId> {
    if step == cfg.max_len {
        vec![EOS]
    } else {
        allowed.to_vec()
    }
}

fn setup(
    scorers: &ScorerSet,
    condition: &Condition,
    scaling: &ScalingConfig,
    cfg: &BeamConfig,
    vocab: &Vocabulary,
) -> Result<(Vec<TokenId>, Vec<TokenId>, Hypothesis)> {
    scaling.validate()?;
    cfg.validate()?;
    condition.validate()?;
    let allowed = allowed_tokens(vocab, scorers.direct.vocab_size())?;
    let document = framed_document(condition)?;
    let mut root = Hypothesis::root();
    refresh(&mut root, scorers, condition, &document, scaling)?;
    Ok((allowed, document, root))
}

/// Online noisy-channel decoding.
///
/// Candidates `w·v` are ranked by `q(v | w) + score(w)`, where `q` is the
/// direct next-token log-probability and `score(w)` the combined score of
/// the parent. Pruning follows [`beam_search_direct`]; survivors have their
/// channel and LM terms recomputed on the extended prefix. Final selection uses the combined
/// score, divided by length when `length_normalize_final` is set.
pub fn online_decode(
    scorers: &ScorerSet,
    condition: &Condition,
    scaling: &ScalingConfig,
    cfg: &BeamConfig,
    vocab: &Vocabulary,
) -> Result<NBestList> {
    let (allowed, document, root) = setup(scorers, condition, scaling, cfg, vocab)?;
    let k = cfg.beam;
    let mut pools = Pools {
        active: vec![root],
        finished: Vec::new(),
    };
    for step in 0..=cfg.max_len {
        let opts = options(step, cfg, &allowed);
        let mut ranked: Vec<(f64, Hypothesis)> = Vec::new();
        for h in &pools.active {
            let dist = scorers.direct.next_token_logprobs(condition, &h.tokens)?;
            for &v in &opts {
                let q = dist[v as usize];
                let rank = q + h.combined;
                if q.is_finite() && rank.is_finite() {
                    ranked.push((rank, h.extend(v, q)));
                }
            }
        }
        if ranked.is_empty() {
            break;
        }
        ranked.sort_by(|a, b| rank_order(a.0, &a.1.tokens, b.0, &b.1.tokens));
        let (mut done, mut next) = prune(ranked.into_iter().map(|(_, h)| h).collect(), k);
        for h in done.iter_mut().chain(next.iter_mut()) {
            refresh(h, scorers, condition, &document, scaling)?;
        }
        if pools.absorb(done, next, k, cfg.early_stop) {
            break;
        }
    }
    pools.into_nbest(DecoderKind::OnlineOurs, scaling, cfg, k)
}

/// Online decoding with a two-level beam.
///
/// Each of the `liu_k2` active hypotheses proposes its `liu_k1` best
/// extensions under the direct model; the pooled `k1·k2` candidates are
/// scored with the full combined score and pruned back to `liu_k2` as in
/// [`beam_search_direct`].
pub fn online_decode_liu(
    scorers: &ScorerSet,
    condition: &Condition,
    scaling: &ScalingConfig,
    cfg: &BeamConfig,
    vocab: &Vocabulary,
) -> Result<NBestList> {
    let (allowed, document, root) = setup(scorers, condition, scaling, cfg, vocab)?;
    let (k1, k2) = (cfg.liu_k1, cfg.liu_k2);
    let mut pools = Pools {
        active: vec![root],
        finished: Vec::new(),
    };
    for step in 0..=cfg.max_len {
        let opts = options(step, cfg, &allowed);
        let mut pool = Vec::new();
        for h in &pools.active {
            let dist = scorers.direct.next_token_logprobs(condition, &h.tokens)?;
            let mut proposals: Vec<(f64, TokenId)> = opts
                .iter()
                .map(|&v| (dist[v as usize], v))
                .filter(|(q, _)| q.is_finite())
                .collect();
            proposals.sort_by(|a, b| rank_order(a.0, &[a.1], b.0, &[b.1]));
            proposals.truncate(k1);
            for (q, v) in proposals {
                let mut c = h.extend(v, q);
                refresh(&mut c, scorers, condition, &document, scaling)?;
                if !c.combined.is_nan() {
                    pool.push(c);
                }
            }
        }
        if pool.is_empty() {
            break;
        }
        pool.sort_by(|a, b| rank_order(a.combined, &a.tokens, b.combined, &b.tokens));
        let (done, next) = prune(pool, k2);
        if pools.absorb(done, next, k2, cfg.early_stop) {
            break;
        }
    }
    pools.into_nbest(DecoderKind::OnlineLiu, scaling, cfg, k2)
}
