use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalItem, MetricReport, BLEU_EPSILON};
use crate::data::GroundedExample;
use crate::decode::{decode, BeamConfig, Decoded, DecoderConfig, DecoderKind, ScalingConfig};
use crate::error::{Error, Result};
use crate::scorer::{Condition, ScorerSet};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    TokenF1,
    LcsRatio,
    Bleu,
    Perplexity,
    MeanScore,
}

impl SelectionMetric {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMetric::TokenF1 => "token_f1",
            SelectionMetric::LcsRatio => "lcs_ratio",
            SelectionMetric::Bleu => "bleu",
            SelectionMetric::Perplexity => "perplexity",
            SelectionMetric::MeanScore => "mean_score",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != SelectionMetric::Perplexity
    }
}

impl std::str::FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SelectionMetric::TokenF1,
            SelectionMetric::LcsRatio,
            SelectionMetric::Bleu,
            SelectionMetric::Perplexity,
            SelectionMetric::MeanScore,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown selection metric {s}")))
    }
}

/// Parses `lo:hi:step` (inclusive) or a comma-separated list.
pub fn parse_axis(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad grid axis {spec:?}"));
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let values: Vec<f64> = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [lo, hi, step] = parts[..] else {
            return Err(bad());
        };
        let (lo, hi, step) = (parse(lo)?, parse(hi)?, parse(step)?);
        if step.is_nan() || step <= 0.0 || hi < lo {
            return Err(bad());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        spec.split(',').map(parse).collect::<Result<_>>()?
    };
    if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(bad());
    }
    Ok(values)
}

/// Cross product of two axes, duplicates rejected.
pub fn parse_grid(channel_axis: &str, lm_axis: &str) -> Result<Vec<(f64, f64)>> {
    let a = parse_axis(channel_axis)?;
    let b = parse_axis(lm_axis)?;
    let grid: Vec<(f64, f64)> = a.iter().flat_map(|&x| b.iter().map(move |&y| (x, y))).collect();
    check_unique(&grid)?;
    Ok(grid)
}

fn check_unique(grid: &[(f64, f64)]) -> Result<()> {
    for (i, p) in grid.iter().enumerate() {
        if grid[..i].contains(p) {
            return Err(Error::Config(format!("duplicate grid point {p:?}")));
        }
    }
    Ok(())
}

fn condition_of(example: &GroundedExample) -> Condition {
    Condition::direct(
        example.context.clone(),
        example.document.clone(),
        example.control.clone(),
    )
}

/// Decodes every example in parallel; results keep input order.
pub fn run_decoder(
    examples: &[GroundedExample],
    scorers: &ScorerSet,
    vocab: &Vocabulary,
    config: &DecoderConfig,
) -> Vec<Result<Decoded>> {
    examples
        .par_iter()
        .map(|ex| decode(config, scorers, &condition_of(ex), vocab))
        .collect()
}

/// Report over successful decodes; failures are listed by example id.
fn report_for(
    examples: &[GroundedExample],
    results: &[Result<Decoded>],
    scorers: &ScorerSet,
    normalize: bool,
) -> Result<MetricReport> {
    let mut items = Vec::new();
    let mut failures = Vec::new();
    for (ex, r) in examples.iter().zip(results) {
        match r {
            Ok(d) => items.push(EvalItem {
                id: ex.id.clone(),
                context: ex.context.clone(),
                response: d.best.response().to_vec(),
                document: ex.document.clone(),
                reference: ex.response.clone(),
                score: Some(d.best.selection_key(normalize)),
            }),
            Err(e) => failures.push(format!("{}: {e}", ex.id)),
        }
    }
    if items.is_empty() {
        return Err(Error::Invalid(format!("every example failed: {}", failures.join("; "))));
    }
    let mut report = MetricReport::compute(&items, Some(scorers.lm.as_ref()), BLEU_EPSILON)?;
    report.failures = failures;
    Ok(report)
}

/// Decodes and evaluates `examples` under one configuration.
pub fn evaluate_config(
    examples: &[GroundedExample],
    scorers: &ScorerSet,
    vocab: &Vocabulary,
    config: &DecoderConfig,
) -> Result<MetricReport> {
    let results = run_decoder(examples, scorers, vocab, config);
    report_for(examples, &results, scorers, config.beam.length_normalize_final)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda_channel: f64,
    pub lambda_lm: f64,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub decoder: DecoderKind,
    pub dataset_id: String,
    pub selection_metric: SelectionMetric,
    pub base: DecoderConfig,
    pub points: Vec<SweepPoint>,
    /// Index into `points`; earliest wins ties.
    pub best: Option<usize>,
}

impl SweepResult {
    pub fn best_point(&self) -> Option<&SweepPoint> {
        self.best.map(|i| &self.points[i])
    }
}

/// Evaluates `base` at every `(λ1, λ2)` in `grid`, keeping `λ0` from `base`.
pub fn sweep(
    examples: &[GroundedExample],
    scorers: &ScorerSet,
    vocab: &Vocabulary,
    base: &DecoderConfig,
    grid: &[(f64, f64)],
    metric: SelectionMetric,
    dataset_id: &str,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    check_unique(grid)?;
    let mut points = Vec::with_capacity(grid.len());
    for &(l1, l2) in grid {
        let config = DecoderConfig {
            scaling: ScalingConfig::new(base.scaling.lambda_direct, l1, l2)?,
            ..*base
        };
        let (report, error) = match evaluate_config(examples, scorers, vocab, &config) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        points.push(SweepPoint {
            lambda_channel: l1,
            lambda_lm: l2,
            report,
            error,
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let Some(v) = p.report.as_ref().and_then(|r| r.metric(metric.name())) else {
            continue;
        };
        if v.is_nan() {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, b)) if metric.higher_is_better() => v > b,
            Some((_, b)) => v < b,
        };
        if better {
            best = Some((i, v));
        }
    }
    Ok(SweepResult {
        decoder: base.kind,
        dataset_id: dataset_id.to_string(),
        selection_metric: metric,
        base: *base,
        points,
        best: best.map(|(i, _)| i),
    })
}

/// Splits an effective beam size into `(k1, k2)` with `k1·k2 = budget`:
/// `k2` is the largest divisor not above `√budget`.
pub fn factorize_budget(budget: usize) -> Result<(usize, usize)> {
    if budget == 0 {
        return Err(Error::Config("budget must be positive".into()));
    }
    let k2 = (1..=budget)
        .take_while(|d| d * d <= budget)
        .filter(|d| budget.is_multiple_of(*d))
        .last()
        .unwrap_or(1);
    Ok((budget / k2, k2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub kind: DecoderKind,
    pub budget: usize,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub report: MetricReport,
}

/// Evaluates each decoder at each effective beam size.
pub fn budget_curve(
    examples: &[GroundedExample],
    scorers: &ScorerSet,
    vocab: &Vocabulary,
    decoders: &[(DecoderKind, ScalingConfig)],
    budgets: &[usize],
    base: &BeamConfig,
) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for &(kind, scaling) in decoders {
        for &budget in budgets {
            let (k1, k2) = factorize_budget(budget)?;
            let beam = BeamConfig {
                beam: budget,
                liu_k1: k1,
                liu_k2: k2,
                ..*base
            };
            let config = DecoderConfig { kind, scaling, beam };
            let report = evaluate_config(examples, scorers, vocab, &config)?;
            let liu = kind == DecoderKind::OnlineLiu;
            rows.push(CurveRow {
                kind,
                budget,
                k1: liu.then_some(k1),
                k2: liu.then_some(k2),
                report,
            });
        }
    }
    Ok(rows)
}

const CURVE_METRICS: [&str; 6] = [
    "token_f1",
    "lcs_ratio",
    "bleu",
    "perplexity",
    "mean_score",
    "mean_length",
];

/// CSV with header `kind,budget,metric,value`.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("kind,budget,metric,value\n");
    for r in rows {
        for m in CURVE_METRICS {
            if let Some(v) = r.report.metric(m) {
                out.push_str(&format!("{},{},{},{}\n", r.kind, r.budget, m, v));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        let a = parse_axis("0.1:2.0:0.1").unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a[0], 0.1);
        assert_eq!(a[2], 0.3);
        assert_eq!(a[19], 2.0);
        assert_eq!(parse_axis("0, 0.5").unwrap(), vec![0.0, 0.5]);
        assert!(parse_axis("1:0:0.1").is_err());
        assert!(parse_axis("x").is_err());
        assert!(parse_grid("0,0", "1").is_err());
        assert_eq!(parse_grid("0,1", "0.5").unwrap(), vec![(0.0, 0.5), (1.0, 0.5)]);
    }

    #[test]
    fn budget_factorization() {
        assert_eq!(factorize_budget(1).unwrap(), (1, 1));
        assert_eq!(factorize_budget(2).unwrap(), (2, 1));
        assert_eq!(factorize_budget(16).unwrap(), (4, 4));
        assert_eq!(factorize_budget(12).unwrap(), (4, 3));
        assert_eq!(factorize_budget(7).unwrap(), (7, 1));
        assert!(factorize_budget(0).is_err());
    }
}
