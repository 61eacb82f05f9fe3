use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use groundnc::data::{example_to_json, load_collection, load_dataset, write_collection};
use groundnc::decode::{Decoded, DecoderConfig, DecoderKind};
use groundnc::eval::{budget_curve, curve_csv, parse_grid, run_decoder, sweep, EvalItem, MetricReport};
use groundnc::retrieval::{
    pipeline_decode, recall_at_1, with_distractors, RetrievalIndex, RetrievalResult, RetrieverKind,
};
use groundnc::scorer::{NgramModel, RemoteScorer, ScorerDescriptor};
use groundnc::seed::derive_seed;
use groundnc::{DocumentCollection, GroundedExample, Role, Scorer, ScorerSet, TokenId, Vocabulary, WorldModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ScorerSource};
use crate::error::{io_error, write_error, CliError, CliResult};
use crate::record::{hash_file, hash_inputs, now_unix, output_dir, run_id, versions, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    WorldGen,
    Train,
    Decode,
    Eval,
    Sweep,
    Curve,
    Retrieve,
}

impl CommandKind {
    pub const ALL: [CommandKind; 7] = [
        CommandKind::WorldGen,
        CommandKind::Train,
        CommandKind::Decode,
        CommandKind::Eval,
        CommandKind::Sweep,
        CommandKind::Curve,
        CommandKind::Retrieve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CommandKind::WorldGen => "world-gen",
            CommandKind::Train => "train",
            CommandKind::Decode => "decode",
            CommandKind::Eval => "eval",
            CommandKind::Sweep => "sweep",
            CommandKind::Curve => "curve",
            CommandKind::Retrieve => "retrieve",
        }
    }

    pub fn from_name(name: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| CliError::Data(format!("unknown command {name:?} in run record")))
    }
}

/// One row of an n-best dump. Minus-infinite scores are written as null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestLine {
    pub example_id: String,
    pub rank: usize,
    /// Response content, without `<sos>`/`<eos>`.
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub direct_lp: Option<f64>,
    pub channel_lp: Option<f64>,
    pub lm_lp: Option<f64>,
    pub combined: Option<f64>,
    pub finished: bool,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Files written by a command, with their hashes.
struct Outputs {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Outputs {
    fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| write_error(&path, e))?;
        self.record(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        self.write(name, &text)
    }

    /// Hashes a file some other writer already put in the directory.
    fn record(&mut self, name: &str) -> CliResult<()> {
        let hash = hash_file(&self.dir.join(name))?;
        self.hashes.insert(name.to_string(), hash);
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

struct Ctx<'a> {
    config: &'a Config,
    inputs: &'a BTreeMap<String, PathBuf>,
    out: Outputs,
    notes: Vec<String>,
    vocab_hash: Option<String>,
    report: Option<String>,
}

impl Ctx<'_> {
    fn input(&self, name: &str) -> CliResult<&Path> {
        self.inputs.get(name).map(PathBuf::as_path).ok_or_else(|| {
            let flag = if name.ends_with("_model") { "models" } else { name };
            CliError::Usage(format!("this command needs --{flag}"))
        })
    }

    fn world(&self) -> CliResult<Arc<WorldModel>> {
        Ok(Arc::new(WorldModel::load(self.input("world")?)?))
    }

    /// From `--vocab`, else from `--world`.
    fn vocab(&mut self) -> CliResult<Vocabulary> {
        let vocab = match self.inputs.get("vocab") {
            Some(p) => Vocabulary::load(p)?,
            None if self.inputs.contains_key("world") => self.world()?.vocab().clone(),
            None => return Err(CliError::Usage("this command needs --vocab or --world".into())),
        };
        self.vocab_hash = Some(vocab.hash());
        Ok(vocab)
    }

    fn dataset(&self, vocab: &Vocabulary) -> CliResult<Vec<GroundedExample>> {
        let data = load_dataset(self.input("data")?, vocab)?;
        if data.is_empty() {
            return Err(CliError::Data("dataset is empty".into()));
        }
        Ok(data)
    }

    fn scorers(&self, vocab: &Vocabulary) -> CliResult<ScorerSet> {
        let cfg = &self.config.scorers;
        match cfg.source {
            ScorerSource::Ngram => {
                let load = |name: &str, role: Role| -> CliResult<Arc<dyn Scorer>> {
                    let path = self.input(name)?;
                    let model = NgramModel::load(path, vocab)?;
                    if model.role() != role {
                        return Err(CliError::Data(format!(
                            "{} holds a {} model, expected {role}",
                            path.display(),
                            model.role()
                        )));
                    }
                    Ok(Arc::new(model))
                };
                Ok(ScorerSet {
                    direct: load("direct_model", Role::Direct)?,
                    channel: load("channel_model", Role::Channel)?,
                    lm: load("lm_model", Role::ResponseLm)?,
                })
            }
            ScorerSource::Exact => {
                let world = self.world()?;
                if world.vocab().hash() != vocab.hash() {
                    return Err(CliError::Data("vocabulary does not match the world's".into()));
                }
                Ok(world.exact_scorer_set(cfg.partial_channel))
            }
            ScorerSource::Remote => {
                let endpoint = cfg
                    .endpoint
                    .clone()
                    .ok_or_else(|| CliError::Usage("scorers.endpoint is required for remote scorers".into()))?;
                let timeout = Duration::from_millis(cfg.timeout_ms);
                let remote = |role| -> Arc<dyn Scorer> {
                    Arc::new(RemoteScorer::new(endpoint.clone(), role, vocab.len(), timeout))
                };
                Ok(ScorerSet {
                    direct: remote(Role::Direct),
                    channel: remote(Role::Channel),
                    lm: remote(Role::ResponseLm),
                })
            }
        }
    }

    /// Indexed collection, with distractors when configured.
    fn index(&mut self, vocab: &Vocabulary) -> CliResult<(RetrievalIndex, DocumentCollection)> {
        let cfg = &self.config.retrieval;
        let mut collection = load_collection(self.input("collection")?, vocab)?;
        if cfg.distractors {
            collection = with_distractors(
                &collection,
                &vocab.generable_ids(),
                derive_seed(self.config.seed, "distractors"),
            )?;
        }
        self.notes
            .push("retrieval is lexical: tf-idf cosine (bi) and BM25 (cross) stand in for trained encoders".into());
        let index = RetrievalIndex::build(&collection)
            .with_vocab_hash(vocab.hash())
            .with_bm25(cfg.bm25);
        Ok((index, collection))
    }
}

/// Gold document ids for examples whose document appears in the collection.
fn gold_ids(examples: &[GroundedExample], collection: &DocumentCollection) -> Option<BTreeMap<String, String>> {
    examples
        .iter()
        .map(|ex| {
            collection
                .documents
                .iter()
                .find(|(_, d)| **d == ex.document)
                .map(|(id, _)| (ex.id.clone(), id.clone()))
        })
        .collect()
}

#[derive(Serialize)]
struct RetrievalSummary {
    retriever: RetrieverKind,
    collection_size: usize,
    distractors: bool,
    recall_at_1: Option<f64>,
}

fn summarize_retrieval(
    ctx: &Ctx,
    results: &[RetrievalResult],
    examples: &[GroundedExample],
    collection: &DocumentCollection,
) -> CliResult<RetrievalSummary> {
    let recall = match gold_ids(examples, collection) {
        Some(gold) => Some(recall_at_1(results, &gold)?),
        None => None,
    };
    Ok(RetrievalSummary {
        retriever: ctx.config.retrieval.retriever,
        collection_size: collection.len(),
        distractors: ctx.config.retrieval.distractors,
        recall_at_1: recall,
    })
}

fn without_examples(mut r: MetricReport) -> MetricReport {
    r.examples.clear();
    r
}

fn world_gen(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.config;
    let world = WorldModel::build(&cfg.world.spec(cfg.seed))?;
    let vocab = world.vocab().clone();
    ctx.vocab_hash = Some(vocab.hash());
    ctx.out.write("world.json", &world.to_dump_string())?;
    ctx.out.write("vocab.txt", &vocab.to_file_string())?;
    for (name, size) in [
        ("train", cfg.world.train_size),
        ("valid", cfg.world.valid_size),
        ("test", cfg.world.test_size),
    ] {
        if size == 0 {
            continue;
        }
        let mut data = world.sample_dataset(size, derive_seed(cfg.seed, name))?;
        let mut text = String::new();
        for (i, ex) in data.iter_mut().enumerate() {
            ex.id = format!("{name}-{i:06}");
            text.push_str(&example_to_json(ex, &vocab));
            text.push('\n');
        }
        ctx.out.write(&format!("{name}.jsonl"), &text)?;
    }
    write_collection(&ctx.out.path("collection.jsonl"), &world.collection(), &vocab)?;
    ctx.out.record("collection.jsonl")?;
    Ok(())
}

fn train(ctx: &mut Ctx) -> CliResult<()> {
    let vocab = ctx.vocab()?;
    let data = ctx.dataset(&vocab)?;
    let models = groundnc::scorer::train_scorers(&data, &ctx.config.train, &vocab)?;
    ctx.out.write("direct.model", &models.direct.to_file_string())?;
    ctx.out.write("channel.model", &models.channel.to_file_string())?;
    ctx.out.write("lm.model", &models.lm.to_file_string())?;
    Ok(())
}

#[derive(Serialize)]
struct DecodeReport {
    decoder: DecoderConfig,
    effective_beam: usize,
    scorers: [ScorerDescriptor; 3],
    retrieval: Option<RetrievalSummary>,
    unfinished: usize,
    warnings: Vec<String>,
    metrics: MetricReport,
}

fn nbest_lines(ex: &GroundedExample, d: &Decoded, vocab: &Vocabulary, out: &mut String) {
    for (rank, h) in d.nbest.iter().enumerate() {
        let line = NBestLine {
            example_id: ex.id.clone(),
            rank,
            tokens: h.response().to_vec(),
            text: vocab.detokenize(h.response()),
            direct_lp: finite(h.breakdown.direct_lp),
            channel_lp: finite(h.breakdown.channel_lp),
            lm_lp: finite(h.breakdown.lm_lp),
            combined: finite(h.combined),
            finished: h.finished,
        };
        out.push_str(&serde_json::to_string(&line).expect("plain record serializes"));
        out.push('\n');
    }
}

fn eval_items(
    examples: &[GroundedExample],
    results: &[groundnc::Result<Decoded>],
    normalize: bool,
) -> (Vec<EvalItem>, Vec<String>) {
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
    (items, failures)
}

fn decode(ctx: &mut Ctx) -> CliResult<()> {
    let vocab = ctx.vocab()?;
    let examples = ctx.dataset(&vocab)?;
    let scorers = ctx.scorers(&vocab)?;
    let config = ctx.config.decoder.resolve()?;
    let (results, retrieval) = if ctx.config.retrieval.enabled {
        let (index, collection) = ctx.index(&vocab)?;
        let kind = ctx.config.retrieval.retriever;
        let outs: Vec<_> = examples
            .par_iter()
            .map(|ex| pipeline_decode(&index, kind, &config, &scorers, ex, &vocab))
            .collect();
        let mut results = Vec::with_capacity(outs.len());
        let mut dump = String::new();
        let mut retrieved = Vec::new();
        for o in outs {
            match o {
                Ok(p) => {
                    dump.push_str(&p.retrieval.to_json_line());
                    dump.push('\n');
                    retrieved.push(p.retrieval);
                    results.push(Ok(p.decoded));
                }
                Err(e) => results.push(Err(e)),
            }
        }
        ctx.out.write("retrieval.jsonl", &dump)?;
        let summary = if retrieved.len() == examples.len() {
            Some(summarize_retrieval(ctx, &retrieved, &examples, &collection)?)
        } else {
            None
        };
        (results, summary)
    } else {
        (run_decoder(&examples, &scorers, &vocab, &config), None)
    };

    let mut dump = String::new();
    let mut warnings = Vec::new();
    let mut unfinished = 0;
    for (ex, r) in examples.iter().zip(&results) {
        if let Ok(d) = r {
            nbest_lines(ex, d, &vocab, &mut dump);
            unfinished += usize::from(d.unfinished);
            warnings.extend(d.warnings.iter().map(|w| format!("{}: {w}", ex.id)));
        }
    }
    let (items, failures) = eval_items(&examples, &results, config.beam.length_normalize_final);
    if items.is_empty() {
        return Err(CliError::Runtime(format!(
            "every example failed: {}",
            failures.join("; ")
        )));
    }
    for f in &failures {
        log::warn!("decode failed for {f}");
    }
    let mut metrics = MetricReport::compute(&items, Some(scorers.lm.as_ref()), ctx.config.eval.bleu_epsilon)?;
    metrics.failures = failures;
    ctx.out.write("nbest.jsonl", &dump)?;
    ctx.out.write("examples.jsonl", &metrics.examples_jsonl())?;
    let report = DecodeReport {
        decoder: config,
        effective_beam: config.beam.effective_beam(config.kind),
        scorers: scorers.descriptors(),
        retrieval,
        unfinished,
        warnings,
        metrics: without_examples(metrics),
    };
    ctx.out.write_json("report.json", &report)?;
    ctx.report = Some("report.json".into());
    Ok(())
}

fn read_nbest_top(path: &Path) -> CliResult<BTreeMap<String, Vec<TokenId>>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut top = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: NBestLine = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        if row.rank == 0 {
            top.insert(row.example_id, row.tokens);
        }
    }
    Ok(top)
}

#[derive(Serialize)]
struct EvalReport {
    hypotheses: String,
    metrics: MetricReport,
}

fn eval(ctx: &mut Ctx) -> CliResult<()> {
    let vocab = ctx.vocab()?;
    let refs = ctx.dataset(&vocab)?;
    let (source, hyps) = match (ctx.inputs.get("nbest"), ctx.inputs.get("hypotheses")) {
        (Some(p), None) => ("nbest", read_nbest_top(p)?),
        (None, Some(p)) => (
            "hypotheses",
            load_dataset(p, &vocab)?
                .into_iter()
                .map(|ex| {
                    ex.response
                        .map(|r| (ex.id.clone(), r))
                        .ok_or_else(|| CliError::Data(format!("hypothesis {} has no response", ex.id)))
                })
                .collect::<CliResult<_>>()?,
        ),
        _ => {
            return Err(CliError::Usage(
                "eval needs exactly one of --nbest or --hypotheses".into(),
            ))
        }
    };
    let items = refs
        .iter()
        .map(|ex| {
            let response = hyps
                .get(&ex.id)
                .cloned()
                .ok_or_else(|| CliError::Data(format!("no hypothesis for example {}", ex.id)))?;
            Ok(EvalItem {
                id: ex.id.clone(),
                context: ex.context.clone(),
                response,
                document: ex.document.clone(),
                reference: ex.response.clone(),
                score: None,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let lm = match ctx.inputs.get("lm_model") {
        Some(p) => Some(NgramModel::load(p, &vocab)?),
        None => None,
    };
    let metrics = MetricReport::compute(
        &items,
        lm.as_ref().map(|m| m as &dyn Scorer),
        ctx.config.eval.bleu_epsilon,
    )?;
    ctx.out.write("examples.jsonl", &metrics.examples_jsonl())?;
    ctx.out.write_json(
        "report.json",
        &EvalReport {
            hypotheses: source.into(),
            metrics: without_examples(metrics),
        },
    )?;
    ctx.report = Some("report.json".into());
    Ok(())
}

fn run_sweep(ctx: &mut Ctx) -> CliResult<()> {
    let vocab = ctx.vocab()?;
    let examples = ctx.dataset(&vocab)?;
    let scorers = ctx.scorers(&vocab)?;
    let base = ctx.config.decoder.resolve()?;
    let grid = parse_grid(&ctx.config.sweep.lambda_channel, &ctx.config.sweep.lambda_lm)?;
    let dataset_id = hash_file(ctx.input("data")?)?;
    let mut result = sweep(
        &examples,
        &scorers,
        &vocab,
        &base,
        &grid,
        ctx.config.sweep.metric,
        &dataset_id,
    )?;
    for p in &mut result.points {
        if let Some(r) = p.report.take() {
            p.report = Some(without_examples(r));
        }
    }
    ctx.out.write_json("sweep.json", &result)?;
    ctx.report = Some("sweep.json".into());
    Ok(())
}

fn curve(ctx: &mut Ctx) -> CliResult<()> {
    let vocab = ctx.vocab()?;
    let examples = ctx.dataset(&vocab)?;
    let scorers = ctx.scorers(&vocab)?;
    let decoders: Vec<(DecoderKind, _)> = ctx
        .config
        .curve
        .decoders
        .iter()
        .map(|&k| (k, k.default_scaling()))
        .collect();
    if decoders.is_empty() || ctx.config.curve.budgets.is_empty() {
        return Err(CliError::Usage(
            "curve needs at least one decoder and one budget".into(),
        ));
    }
    let mut rows = budget_curve(
        &examples,
        &scorers,
        &vocab,
        &decoders,
        &ctx.config.curve.budgets,
        &ctx.config.decoder.beam,
    )?;
    ctx.out.write("curve.csv", &curve_csv(&rows))?;
    for r in &mut rows {
        r.report.examples.clear();
    }
    ctx.out.write_json("curve.json", &rows)?;
    ctx.report = Some("curve.json".into());
    Ok(())
}

fn retrieve(ctx: &mut Ctx) -> CliResult<()> {
    let vocab = ctx.vocab()?;
    let examples = ctx.dataset(&vocab)?;
    let (index, collection) = ctx.index(&vocab)?;
    let kind = ctx.config.retrieval.retriever;
    let k = ctx.config.retrieval.k;
    let results = examples
        .par_iter()
        .map(|ex| index.retrieve(kind, &ex.id, &ex.context, k))
        .collect::<groundnc::Result<Vec<_>>>()?;
    let mut dump = String::new();
    for r in &results {
        writeln!(dump, "{}", r.to_json_line()).expect("string write");
    }
    ctx.out.write("retrieval.jsonl", &dump)?;
    if ctx.config.retrieval.distractors {
        write_collection(&ctx.out.path("collection.jsonl"), &collection, &vocab)?;
        ctx.out.record("collection.jsonl")?;
    }
    let summary = summarize_retrieval(ctx, &results, &examples, &collection)?;
    ctx.out.write_json("report.json", &summary)?;
    ctx.report = Some("report.json".into());
    Ok(())
}

/// Result of a finished command.
#[derive(Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    pub record: RunRecord,
}

/// Runs `kind` with a configuration and named input files, writing into
/// `out` (or the default output root) and recording a [`RunRecord`].
pub fn execute(
    kind: CommandKind,
    config: Config,
    inputs: BTreeMap<String, PathBuf>,
    out: Option<&Path>,
) -> CliResult<Outcome> {
    let config = config.resolved()?;
    let hashed = hash_inputs(&inputs)?;
    let id = run_id(kind.name(), &config, &hashed);
    let dir = output_dir(out, kind.name(), &id);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.workers {
        if n == 0 {
            return Err(CliError::Usage("workers must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    let existed = dir.exists();
    std::fs::create_dir_all(&dir).map_err(|e| write_error(&dir, e))?;
    let mut ctx = Ctx {
        config: &config,
        inputs: &inputs,
        out: Outputs {
            dir: dir.clone(),
            hashes: BTreeMap::new(),
        },
        notes: Vec::new(),
        vocab_hash: None,
        report: None,
    };
    pool.install(|| match kind {
        CommandKind::WorldGen => world_gen(&mut ctx),
        CommandKind::Train => train(&mut ctx),
        CommandKind::Decode => decode(&mut ctx),
        CommandKind::Eval => eval(&mut ctx),
        CommandKind::Sweep => run_sweep(&mut ctx),
        CommandKind::Curve => curve(&mut ctx),
        CommandKind::Retrieve => retrieve(&mut ctx),
    })
    .inspect_err(|_| {
        // only removes a directory this run created and left empty
        if !existed {
            let _ = std::fs::remove_dir(&dir);
        }
    })?;
    let record = RunRecord {
        run_id: id,
        command: kind.name().to_string(),
        timestamp_unix: now_unix(),
        config: config.clone(),
        inputs: hashed,
        vocab_hash: ctx.vocab_hash,
        outputs: ctx.out.hashes,
        report: ctx.report,
        versions: versions(),
        notes: ctx.notes,
    };
    record.write(&dir)?;
    Ok(Outcome { dir, record })
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub original: RunRecord,
    pub replayed: Outcome,
    /// Output files whose hash differs, or that only one run produced.
    pub mismatches: Vec<String>,
}

/// Reruns a recorded command after verifying its inputs and compares
/// output hashes.
pub fn replay(record_path: &Path, out: Option<&Path>) -> CliResult<ReplayOutcome> {
    let original = RunRecord::load(record_path)?;
    original.verify_inputs()?;
    let kind = CommandKind::from_name(&original.command)?;
    let inputs = original
        .inputs
        .iter()
        .map(|(k, v)| (k.clone(), v.path.clone()))
        .collect();
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = record_path.parent().unwrap_or(Path::new("."));
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            dir.with_file_name(format!("{name}-replay"))
        }
    };
    let replayed = execute(kind, original.config.clone(), inputs, Some(&out))?;
    let mut names: Vec<&String> = original.outputs.keys().chain(replayed.record.outputs.keys()).collect();
    names.sort();
    names.dedup();
    let mismatches = names
        .into_iter()
        .filter(|n| original.outputs.get(*n) != replayed.record.outputs.get(*n))
        .cloned()
        .collect();
    Ok(ReplayOutcome {
        original,
        replayed,
        mismatches,
    })
}
