use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use groundnc::data::Turn;
use groundnc::decode::{decode, BeamConfig, DecoderConfig, DecoderKind};
use groundnc::scorer::{train_scorers, NgramModel, RemoteScorer, TrainConfig};
use groundnc::vocab::SOS;
use groundnc::wire::{WireOp, WireRequest, WireResponse};
use groundnc::{Condition, Role, Scorer, ScorerSet, WorldModel, WorldSpec};

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn spawn(args: &[&str]) -> Server {
    let mut child = Command::new(env!("CARGO_BIN_EXE_groundnc"))
        .arg("serve-mock-scorer")
        .args(args)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .expect("address line")
        .to_string();
    Server { child, addr }
}

fn world() -> Arc<WorldModel> {
    let spec = WorldSpec {
        vocab_size: 5,
        max_response_len: 3,
        seed: 11,
        ..Default::default()
    };
    Arc::new(WorldModel::build(&spec).unwrap())
}

/// Trains models for `world` and writes them with the vocabulary into `dir`.
fn write_models(world: &WorldModel, dir: &Path) -> ScorerSet {
    let train = world.sample_dataset(800, 3).unwrap();
    let models = train_scorers(&train, &TrainConfig::default(), world.vocab()).unwrap();
    world.vocab().save(&dir.join("vocab.txt")).unwrap();
    std::fs::write(dir.join("direct.model"), models.direct.to_file_string()).unwrap();
    std::fs::write(dir.join("channel.model"), models.channel.to_file_string()).unwrap();
    std::fs::write(dir.join("lm.model"), models.lm.to_file_string()).unwrap();
    // scorers as read back from disk, which is what the server holds
    let load = |f: &str| -> Arc<dyn Scorer> { Arc::new(NgramModel::load(&dir.join(f), world.vocab()).unwrap()) };
    ScorerSet {
        direct: load("direct.model"),
        channel: load("channel.model"),
        lm: load("lm.model"),
    }
}

fn conditions(world: &WorldModel) -> Vec<Condition> {
    let mut out = Vec::new();
    for ctx in world.contexts().iter().take(3) {
        for doc in world.documents() {
            out.push(Condition::direct(vec![Turn::user(ctx.clone())], doc.clone(), None));
        }
    }
    out
}

#[test]
fn served_models_score_like_local_ones() {
    let world = world();
    let vocab = world.vocab();
    let dir = tempfile::tempdir().unwrap();
    let local = write_models(&world, dir.path());
    let models = dir.path().to_string_lossy().into_owned();
    let vocab_path = dir.path().join("vocab.txt").to_string_lossy().into_owned();
    let server = spawn(&["--models", &models, "--vocab", &vocab_path]);
    let remote = |role| -> Arc<dyn Scorer> {
        Arc::new(RemoteScorer::new(
            server.addr.clone(),
            role,
            vocab.len(),
            Duration::from_secs(10),
        ))
    };
    let remote = ScorerSet {
        direct: remote(Role::Direct),
        channel: remote(Role::Channel),
        lm: remote(Role::ResponseLm),
    };
    let tokens = vocab.generable_ids();
    for condition in conditions(&world) {
        for prefix in [vec![SOS], vec![SOS, tokens[0]], vec![SOS, tokens[1], tokens[0]]] {
            let a = local.direct.next_token_logprobs(&condition, &prefix).unwrap();
            let b = remote.direct.next_token_logprobs(&condition, &prefix).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!(x == y || (x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }
    let beam = BeamConfig {
        beam: 3,
        max_len: 3,
        ..Default::default()
    };
    for kind in DecoderKind::ALL {
        let config = DecoderConfig::new(kind, beam);
        for condition in conditions(&world).iter().take(4) {
            let a = decode(&config, &local, condition, vocab).unwrap();
            let b = decode(&config, &remote, condition, vocab).unwrap();
            assert_eq!(a.best.tokens, b.best.tokens, "{kind}");
        }
    }
}

fn exchange(stream: &mut TcpStream, line: &str) -> WireResponse {
    stream.write_all(line.as_bytes()).unwrap();
    stream.write_all(b"\n").unwrap();
    let mut reply = String::new();
    BufReader::new(stream.try_clone().unwrap())
        .read_line(&mut reply)
        .unwrap();
    WireResponse::parse(&reply).unwrap()
}

#[test]
fn bad_requests_get_errors_and_the_session_continues() {
    let server = spawn(&["--uniform", "7"]);
    let mut stream = TcpStream::connect(&server.addr).unwrap();
    let condition = Condition::direct(vec![Turn::user(vec![4])], vec![5], None);

    let reply = exchange(&mut stream, "{this is not json");
    assert!(matches!(reply, WireResponse::Error { id: None, .. }), "{reply:?}");

    let mut bad = WireRequest::new("r-bad".into(), WireOp::Next, &condition, vec![SOS, 99], None);
    let reply = exchange(&mut stream, &bad.to_line());
    assert!(
        matches!(&reply, WireResponse::Error { id: Some(id), .. } if id == "r-bad"),
        "{reply:?}"
    );

    bad.id = "r-ok".into();
    bad.prefix = vec![SOS, 4];
    match exchange(&mut stream, &bad.to_line()) {
        WireResponse::Next { id, logprobs } => {
            assert_eq!(id, "r-ok");
            assert_eq!(logprobs.len(), 7);
            assert!(logprobs.iter().all(|lp| (lp + 7f64.ln()).abs() < 1e-12));
        }
        other => panic!("{other:?}"),
    }

    let seq = WireRequest::new(
        "r-seq".into(),
        WireOp::Seq,
        &condition,
        vec![SOS],
        Some(vec![SOS, 4, 5]),
    );
    match exchange(&mut stream, &seq.to_line()) {
        WireResponse::Seq { id, logprob } => {
            assert_eq!(id, "r-seq");
            assert!((logprob + 2.0 * 7f64.ln()).abs() < 1e-12);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn stdio_mode_answers_one_line_per_request() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_groundnc"))
        .args(["serve-mock-scorer", "--uniform", "5", "--stdio"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let condition = Condition::response_lm(vec![Turn::user(vec![4])]);
    let requests = [
        WireRequest::new("a".into(), WireOp::Next, &condition, vec![SOS], None).to_line(),
        "[]".to_string(),
        WireRequest::new("b".into(), WireOp::Seq, &condition, vec![SOS], Some(vec![SOS, 4])).to_line(),
    ];
    {
        let mut stdin = child.stdin.take().unwrap();
        for r in &requests {
            writeln!(stdin, "{r}").unwrap();
        }
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let replies: Vec<WireResponse> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| WireResponse::parse(l).unwrap())
        .collect();
    assert_eq!(replies.len(), 3);
    assert_eq!(replies[0].id(), Some("a"));
    assert!(matches!(replies[1], WireResponse::Error { .. }));
    assert_eq!(replies[2].id(), Some("b"));
}

#[test]
fn serving_needs_a_model_source() {
    let out = Command::new(env!("CARGO_BIN_EXE_groundnc"))
        .arg("serve-mock-scorer")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let world = world();
    world.vocab().save(&dir.path().join("vocab.txt")).unwrap();
    let models = dir.path().to_string_lossy().into_owned();
    let vocab = dir.path().join("vocab.txt").to_string_lossy().into_owned();
    let out = Command::new(env!("CARGO_BIN_EXE_groundnc"))
        .args(["serve-mock-scorer", "--models", &models, "--vocab", &vocab])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
