use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use groundnc::seed::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{io_error, write_error, CliError, CliResult};

pub const RECORD_FILE: &str = "run.json";
pub const HOME_VAR: &str = "NC_DECODER_HOME";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Hash of command, resolved configuration and input hashes.
    pub run_id: String,
    pub command: String,
    pub timestamp_unix: u64,
    pub config: Config,
    pub inputs: BTreeMap<String, InputRef>,
    pub vocab_hash: Option<String>,
    /// Output file name to SHA-256, for every file the command wrote.
    pub outputs: BTreeMap<String, String>,
    /// Name of the metric report among `outputs`, if any.
    pub report: Option<String>,
    pub versions: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn hash_inputs(inputs: &BTreeMap<String, PathBuf>) -> CliResult<BTreeMap<String, InputRef>> {
    inputs
        .iter()
        .map(|(name, path)| {
            let path = std::fs::canonicalize(path).map_err(|e| io_error(path, e))?;
            let sha256 = hash_file(&path)?;
            Ok((name.clone(), InputRef { path, sha256 }))
        })
        .collect()
}

pub fn run_id(command: &str, config: &Config, inputs: &BTreeMap<String, InputRef>) -> String {
    let hashes: BTreeMap<&String, &String> = inputs.iter().map(|(k, v)| (k, &v.sha256)).collect();
    let key = serde_json::json!({ "command": command, "config": config, "inputs": hashes });
    sha256_hex(key.to_string().as_bytes())[..16].to_string()
}

/// `out` when given, otherwise `$NC_DECODER_HOME/<command>-<run id>`
/// (default root `runs`).
pub fn output_dir(out: Option<&Path>, command: &str, run_id: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(HOME_VAR)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(format!("{command}-{run_id}"))
        }
    }
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("groundnc-core".to_string(), groundnc::VERSION.to_string()),
        ("groundnc-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ])
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunRecord {
    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(RECORD_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| write_error(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Errors when any input changed since the run.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for (name, input) in &self.inputs {
            let now = hash_file(&input.path)?;
            if now != input.sha256 {
                return Err(CliError::Data(format!(
                    "input {name} ({}) changed since the run: {} != {}",
                    input.path.display(),
                    now,
                    input.sha256
                )));
            }
        }
        Ok(())
    }
}
