//! Line-delimited JSON scorer protocol.
//!
//! Each request is one JSON object on one line:
//!
//! ```text
//! {"id": "r1", "op": "next"|"seq", "role": "direct"|"channel"|"lm",
//!  "context": [int…], "document": [int…]|null, "control": [int…]|null,
//!  "prefix": [int…], "target": [int…]|null, "response": [int…]|null}
//! ```
//!
//! `context` is the flattened dialog history. `response` carries the
//! (possibly partial) response a channel request conditions on and is null
//! for the other roles. `next` answers `{"id", "logprobs": [float…]}` with one
//! entry per vocabulary id; `seq` answers `{"id", "logprob": float}` for the
//! `<sos>`-started `target`. Floats are written with 17 significant digits;
//! a log-probability of minus infinity is written as `null`. Failures answer
//! `{"id", "error": string}`, with `id` null only when the request line did
//! not carry a readable id.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Turn;
use crate::scorer::{Condition, Role, Scorer};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireOp {
    Next,
    Seq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: String,
    pub op: WireOp,
    pub role: Role,
    pub context: Vec<TokenId>,
    pub document: Option<Vec<TokenId>>,
    pub control: Option<Vec<TokenId>>,
    pub prefix: Vec<TokenId>,
    pub target: Option<Vec<TokenId>>,
    #[serde(default)]
    pub response: Option<Vec<TokenId>>,
}

impl WireRequest {
    pub fn new(
        id: String,
        op: WireOp,
        condition: &Condition,
        prefix: Vec<TokenId>,
        target: Option<Vec<TokenId>>,
    ) -> Self {
        Self {
            id,
            op,
            role: condition.role,
            context: crate::data::flatten_context(&condition.context),
            document: condition.document.clone(),
            control: condition.control.clone(),
            prefix,
            target,
            response: condition.response.clone(),
        }
    }

    pub fn condition(&self) -> Condition {
        let context = if self.context.is_empty() {
            Vec::new()
        } else {
            vec![Turn::user(self.context.clone())]
        };
        Condition {
            role: self.role,
            context,
            document: self.document.clone(),
            response: self.response.clone(),
            control: self.control.clone(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireResponse {
    Next { id: String, logprobs: Vec<f64> },
    Seq { id: String, logprob: f64 },
    Error { id: Option<String>, error: String },
}

fn push_float(out: &mut String, x: f64) {
    if x.is_finite() {
        write!(out, "{x:.16e}").unwrap();
    } else {
        out.push_str("null");
    }
}

fn float_of(v: &Value) -> Option<f64> {
    match v {
        Value::Null => Some(f64::NEG_INFINITY),
        other => other.as_f64(),
    }
}

impl WireResponse {
    pub fn id(&self) -> Option<&str> {
        match self {
            WireResponse::Next { id, .. } | WireResponse::Seq { id, .. } => Some(id),
            WireResponse::Error { id, .. } => id.as_deref(),
        }
    }

    pub fn to_line(&self) -> String {
        let json_str = |s: &str| serde_json::to_string(s).expect("string serializes");
        let mut out = String::new();
        match self {
            WireResponse::Next { id, logprobs } => {
                write!(out, "{{\"id\":{},\"logprobs\":[", json_str(id)).unwrap();
                for (i, &lp) in logprobs.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    push_float(&mut out, lp);
                }
                out.push_str("]}");
            }
            WireResponse::Seq { id, logprob } => {
                write!(out, "{{\"id\":{},\"logprob\":", json_str(id)).unwrap();
                push_float(&mut out, *logprob);
                out.push('}');
            }
            WireResponse::Error { id, error } => {
                let id = id.as_deref().map_or("null".to_string(), json_str);
                write!(out, "{{\"id\":{id},\"error\":{}}}", json_str(error)).unwrap();
            }
        }
        out
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let obj = value.as_object().ok_or("reply is not an object")?;
        let id = obj.get("id").and_then(Value::as_str).map(str::to_string);
        if let Some(err) = obj.get("error") {
            return Ok(WireResponse::Error {
                id,
                error: err.as_str().unwrap_or("unspecified error").to_string(),
            });
        }
        let id = id.ok_or("reply lacks a string id")?;
        if let Some(lps) = obj.get("logprobs") {
            let arr = lps.as_array().ok_or("logprobs is not an array")?;
            let logprobs = arr
                .iter()
                .map(float_of)
                .collect::<Option<Vec<_>>>()
                .ok_or("logprobs holds a non-number")?;
            return Ok(WireResponse::Next { id, logprobs });
        }
        if let Some(lp) = obj.get("logprob") {
            let logprob = float_of(lp).ok_or("logprob is not a number")?;
            return Ok(WireResponse::Seq { id, logprob });
        }
        Err("reply has neither logprobs nor logprob".into())
    }
}

/// Scorers served per role.
pub type ScorerRegistry = BTreeMap<Role, Arc<dyn Scorer>>;

/// Answers one request line.
pub fn handle_line(line: &str, registry: &ScorerRegistry) -> WireResponse {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => {
            return WireResponse::Error {
                id: None,
                error: format!("malformed request: {e}"),
            }
        }
    };
    let id = value.get("id").and_then(Value::as_str).map(str::to_string);
    let fail = |error: String| WireResponse::Error { id: id.clone(), error };
    let req: WireRequest = match serde_json::from_value(value.clone()) {
        Ok(r) => r,
        Err(e) => return fail(format!("malformed request: {e}")),
    };
    let Some(scorer) = registry.get(&req.role) else {
        return fail(format!("no scorer serves role {}", req.role));
    };
    let cond = req.condition();
    if let Err(e) = cond.validate() {
        return fail(e.to_string());
    }
    match req.op {
        WireOp::Next => match scorer.next_token_logprobs(&cond, &req.prefix) {
            Ok(logprobs) => WireResponse::Next { id: req.id, logprobs },
            Err(e) => fail(e.to_string()),
        },
        WireOp::Seq => {
            let Some(target) = &req.target else {
                return fail("seq request without target".into());
            };
            match scorer.prefix_logprob(&cond, target) {
                Ok(logprob) => WireResponse::Seq { id: req.id, logprob },
                Err(e) => fail(e.to_string()),
            }
        }
    }
}

/// Serves one session: one reply line per request line, in order.
pub fn serve_stream<R: BufRead, W: Write>(reader: R, mut writer: W, registry: &ScorerRegistry) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_line(&line, registry);
        writer.write_all(reply.to_line().as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per session.
pub fn serve_tcp(listener: TcpListener, registry: Arc<ScorerRegistry>) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let registry = Arc::clone(&registry);
        std::thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => {
                    log::warn!("cannot clone stream for {peer:?}: {e}");
                    return;
                }
            };
            if let Err(e) = serve_stream(reader, BufWriter::new(stream), &registry) {
                log::warn!("session {peer:?} ended: {e}");
            }
        });
    }
    Ok(())
}

/// Binds `addr` and serves in a background thread; returns the bound address.
pub fn spawn_tcp_server(addr: impl ToSocketAddrs, registry: ScorerRegistry) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let registry = Arc::new(registry);
    std::thread::spawn(move || {
        if let Err(e) = serve_tcp(listener, registry) {
            log::error!("scorer server stopped: {e}");
        }
    });
    Ok(local)
}
