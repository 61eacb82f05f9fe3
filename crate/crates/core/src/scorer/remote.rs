//! Client side of the scorer wire protocol.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::{check_prefix, total_mass, Condition, Role, Scorer, ScorerDescriptor, ScorerKind};
use crate::error::ScoreError;
use crate::vocab::TokenId;
use crate::wire::{WireOp, WireRequest, WireResponse};

const NORMALIZATION_TOLERANCE: f64 = 1e-4;

struct Session {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// A scorer answered by a server speaking the wire protocol.
///
/// One request is in flight per session; concurrent callers queue on the
/// session lock. A transport failure drops the session and the next call
/// reconnects.
pub struct RemoteScorer {
    endpoint: String,
    role: Role,
    vocab_size: usize,
    timeout: Duration,
    session: Mutex<Option<Session>>,
    counter: AtomicU64,
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>, role: Role, vocab_size: usize, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            role,
            vocab_size,
            timeout,
            session: Mutex::new(None),
            counter: AtomicU64::new(0),
        }
    }

    fn next_id(&self) -> String {
        format!("{}-{}", self.role, self.counter.fetch_add(1, Ordering::Relaxed))
    }

    fn connect(&self, request_id: &str) -> Result<Session, ScoreError> {
        let transport = |e: std::io::Error| ScoreError::Transport {
            request_id: request_id.to_string(),
            detail: e.to_string(),
        };
        let stream = TcpStream::connect(&self.endpoint).map_err(transport)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(transport)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(transport)?;
        stream.set_nodelay(true).map_err(transport)?;
        let reader = BufReader::new(stream.try_clone().map_err(transport)?);
        Ok(Session { reader, writer: stream })
    }

    /// Sends one request and waits for its reply.
    pub fn call(&self, request: &WireRequest) -> Result<WireResponse, ScoreError> {
        let id = request.id.clone();
        let mut guard = self.session.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(self.connect(&id)?);
        }
        let session = guard.as_mut().expect("session just opened");
        let result = exchange(session, request);
        if matches!(result, Err(ScoreError::Timeout { .. } | ScoreError::Transport { .. })) {
            *guard = None;
        }
        let reply = result?;
        match &reply {
            WireResponse::Error { error, .. } => Err(ScoreError::Server {
                request_id: id,
                message: error.clone(),
            }),
            other if other.id() != Some(id.as_str()) => Err(ScoreError::Malformed {
                request_id: id,
                detail: format!("reply id {:?} does not match", other.id()),
            }),
            _ => Ok(reply),
        }
    }
}

fn exchange(session: &mut Session, request: &WireRequest) -> Result<WireResponse, ScoreError> {
    let id = &request.id;
    let io_err = |e: std::io::Error| match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => ScoreError::Timeout { request_id: id.clone() },
        _ => ScoreError::Transport {
            request_id: id.clone(),
            detail: e.to_string(),
        },
    };
    let mut line = request.to_line();
    line.push('\n');
    session.writer.write_all(line.as_bytes()).map_err(io_err)?;
    session.writer.flush().map_err(io_err)?;
    let mut reply = String::new();
    let n = session.reader.read_line(&mut reply).map_err(io_err)?;
    if n == 0 {
        return Err(ScoreError::Transport {
            request_id: id.clone(),
            detail: "connection closed".into(),
        });
    }
    WireResponse::parse(reply.trim_end()).map_err(|detail| ScoreError::Malformed {
        request_id: id.clone(),
        detail,
    })
}

impl Scorer for RemoteScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn descriptor(&self) -> ScorerDescriptor {
        ScorerDescriptor {
            kind: ScorerKind::Remote {
                endpoint: self.endpoint.clone(),
            },
            role: Some(self.role),
        }
    }

    fn next_token_logprobs(&self, condition: &Condition, prefix: &[TokenId]) -> Result<Vec<f64>, ScoreError> {
        check_prefix(prefix, self.vocab_size)?;
        let req = WireRequest::new(self.next_id(), WireOp::Next, condition, prefix.to_vec(), None);
        match self.call(&req)? {
            WireResponse::Next { logprobs, .. } => {
                if logprobs.len() != self.vocab_size {
                    return Err(ScoreError::Malformed {
                        request_id: req.id,
                        detail: format!("{} log-probs for a vocabulary of {}", logprobs.len(), self.vocab_size),
                    });
                }
                let sum = total_mass(&logprobs);
                if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE || !sum.is_finite() {
                    return Err(ScoreError::Normalization {
                        request_id: req.id,
                        sum,
                    });
                }
                Ok(logprobs)
            }
            _ => Err(ScoreError::Malformed {
                request_id: req.id,
                detail: "expected a next-token reply".into(),
            }),
        }
    }

    fn prefix_logprob(&self, condition: &Condition, prefix: &[TokenId]) -> Result<f64, ScoreError> {
        check_prefix(prefix, self.vocab_size)?;
        let req = WireRequest::new(
            self.next_id(),
            WireOp::Seq,
            condition,
            Vec::new(),
            Some(prefix.to_vec()),
        );
        match self.call(&req)? {
            WireResponse::Seq { logprob, .. } if logprob <= 1e-9 => Ok(logprob),
            WireResponse::Seq { logprob, .. } => Err(ScoreError::Malformed {
                request_id: req.id,
                detail: format!("positive sequence log-prob {logprob}"),
            }),
            _ => Err(ScoreError::Malformed {
                request_id: req.id,
                detail: "expected a sequence reply".into(),
            }),
        }
    }
}
