use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use groundnc_cli::serve::{mock_registry, serve_mock_scorer, MODEL_FILES};
use groundnc_cli::{execute, load_config, replay, CliError, CliResult, CommandKind};

#[derive(Parser)]
#[command(
    name = "groundnc",
    version,
    about = "Noisy-channel decoding for document-grounded dialog"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `decoder.beam.beam=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; defaults to `$NC_DECODER_HOME/<command>-<run id>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct Inputs {
    /// Dataset JSONL (references for `eval`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// World dump from `world-gen`.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Directory holding direct.model, channel.model and lm.model.
    #[arg(long)]
    models: Option<PathBuf>,
    /// Document collection JSONL.
    #[arg(long)]
    collection: Option<PathBuf>,
    /// N-best dump whose rank-0 rows are evaluated.
    #[arg(long)]
    nbest: Option<PathBuf>,
    /// Dataset JSONL whose responses are evaluated.
    #[arg(long)]
    hypotheses: Option<PathBuf>,
    /// Response-LM model file used for perplexity in `eval`.
    #[arg(long)]
    lm: Option<PathBuf>,
}

impl Inputs {
    fn into_map(self) -> BTreeMap<String, PathBuf> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<PathBuf>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("data", self.data);
        put("vocab", self.vocab);
        put("world", self.world);
        put("collection", self.collection);
        put("nbest", self.nbest);
        put("hypotheses", self.hypotheses);
        put("lm_model", self.lm);
        if let Some(dir) = self.models {
            for (role, file) in MODEL_FILES {
                let key = match role {
                    groundnc::Role::Direct => "direct_model",
                    groundnc::Role::Channel => "channel_model",
                    groundnc::Role::ResponseLm => "lm_model",
                };
                put(key, Some(dir.join(file)));
            }
        }
        m
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic world and sample train/valid/test splits.
    WorldGen {
        #[command(flatten)]
        common: Common,
    },
    /// Fit direct, channel and response-LM n-gram scorers.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Decode a dataset and write n-best dumps and a metric report.
    Decode {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Shortcut for `--set decoder.kind=...`.
        #[arg(long)]
        decoder: Option<String>,
    },
    /// Score hypotheses against a reference dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Evaluate a grid of channel and LM weights.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Metrics as a function of effective beam size.
    Curve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Rank documents for every example's context.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Serve the scorer wire protocol from local model files.
    ServeMockScorer {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 picks a free port; the bound address is printed first.
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Serve a uniform distribution over this many tokens instead.
        #[arg(long)]
        uniform: Option<usize>,
        /// Serve one session on stdin/stdout.
        #[arg(long)]
        stdio: bool,
    },
    /// Rerun a recorded command and check its outputs are byte-identical.
    Replay {
        /// `run.json` of the original run.
        record: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_recorded(kind: CommandKind, common: Common, inputs: Inputs, extra: Vec<String>) -> CliResult<()> {
    let mut overrides = common.set;
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("workers={w}"));
    }
    overrides.extend(extra);
    let config = load_config(common.config.as_deref(), &overrides)?;
    let outcome = execute(kind, config, inputs.into_map(), common.out.as_deref())?;
    println!("{}", outcome.dir.join(groundnc_cli::RECORD_FILE).display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::WorldGen { common } => run_recorded(CommandKind::WorldGen, common, Inputs::default(), Vec::new()),
        Command::Train { common, inputs } => run_recorded(CommandKind::Train, common, inputs, Vec::new()),
        Command::Decode {
            common,
            inputs,
            decoder,
        } => {
            let extra = decoder.map(|d| format!("decoder.kind=\"{d}\"")).into_iter().collect();
            run_recorded(CommandKind::Decode, common, inputs, extra)
        }
        Command::Eval { common, inputs } => run_recorded(CommandKind::Eval, common, inputs, Vec::new()),
        Command::Sweep { common, inputs } => run_recorded(CommandKind::Sweep, common, inputs, Vec::new()),
        Command::Curve { common, inputs } => run_recorded(CommandKind::Curve, common, inputs, Vec::new()),
        Command::Retrieve { common, inputs } => run_recorded(CommandKind::Retrieve, common, inputs, Vec::new()),
        Command::ServeMockScorer {
            host,
            port,
            models,
            vocab,
            uniform,
            stdio,
        } => {
            let registry = mock_registry(models.as_deref(), vocab.as_deref(), uniform)?;
            serve_mock_scorer(&host, port, registry, stdio)
        }
        Command::Replay { record, out } => {
            let outcome = replay(&record, out.as_deref())?;
            for name in outcome.replayed.record.outputs.keys() {
                let status = if outcome.mismatches.contains(name) {
                    "DIFFERS"
                } else {
                    "identical"
                };
                println!("{name}: {status}");
            }
            if outcome.mismatches.is_empty() {
                Ok(())
            } else {
                Err(CliError::Runtime(format!(
                    "outputs differ: {}",
                    outcome.mismatches.join(", ")
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("groundnc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
