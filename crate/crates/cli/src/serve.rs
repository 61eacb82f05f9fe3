use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;

use groundnc::scorer::{NgramModel, UniformScorer};
use groundnc::wire::{serve_stream, serve_tcp, ScorerRegistry};
use groundnc::{Role, Scorer, Vocabulary};

use crate::error::{CliError, CliResult};

/// Model file name for each served role.
pub const MODEL_FILES: [(Role, &str); 3] = [
    (Role::Direct, "direct.model"),
    (Role::Channel, "channel.model"),
    (Role::ResponseLm, "lm.model"),
];

/// Every model found in `models` (at least one is required), or a uniform
/// scorer over `uniform` tokens for every role.
pub fn mock_registry(models: Option<&Path>, vocab: Option<&Path>, uniform: Option<usize>) -> CliResult<ScorerRegistry> {
    let mut registry = ScorerRegistry::new();
    match (models, uniform) {
        (Some(dir), None) => {
            let vocab_path = vocab.ok_or_else(|| CliError::Usage("--models needs --vocab".into()))?;
            let vocab = Vocabulary::load(vocab_path)?;
            for (role, file) in MODEL_FILES {
                let path = dir.join(file);
                if !path.exists() {
                    continue;
                }
                let model = NgramModel::load(&path, &vocab)?;
                if model.role() != role {
                    return Err(CliError::Data(format!(
                        "{} holds a {} model",
                        path.display(),
                        model.role()
                    )));
                }
                registry.insert(role, Arc::new(model) as Arc<dyn Scorer>);
            }
            if registry.is_empty() {
                return Err(CliError::Data(format!("no model files in {}", dir.display())));
            }
        }
        (None, Some(n)) => {
            if n == 0 {
                return Err(CliError::Usage("--uniform needs a positive vocabulary size".into()));
            }
            for (role, _) in MODEL_FILES {
                registry.insert(role, Arc::new(UniformScorer::new(n)) as Arc<dyn Scorer>);
            }
        }
        _ => return Err(CliError::Usage("give exactly one of --models or --uniform".into())),
    }
    Ok(registry)
}

/// Serves on stdin/stdout, or on `host:port` printing `listening on ADDR`
/// first. Blocks until the input ends or forever.
pub fn serve_mock_scorer(host: &str, port: u16, registry: ScorerRegistry, stdio: bool) -> CliResult<()> {
    if stdio {
        let stdin = std::io::stdin();
        let stdout = std::io::stdout();
        return serve_stream(BufReader::new(stdin.lock()), stdout.lock(), &registry)
            .map_err(|e| CliError::Runtime(e.to_string()));
    }
    let listener =
        TcpListener::bind((host, port)).map_err(|e| CliError::Runtime(format!("cannot bind {host}:{port}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut stdout = std::io::stdout();
    writeln!(stdout, "listening on {addr}")
        .and_then(|_| stdout.flush())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    serve_tcp(listener, Arc::new(registry)).map_err(|e| CliError::Runtime(e.to_string()))
}
