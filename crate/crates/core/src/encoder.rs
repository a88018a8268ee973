//! The encoder port.
//!
//! Text and image embeddings come from an [`Encoder`]. Two implementations
//! ship here: [`FixtureCache`], a lookup table used by tests and the
//! synthetic benchmark, and [`RemoteEncoder`], a client for an external
//! model service speaking newline-delimited JSON over TCP or a child
//! process's standard streams.
//!
//! Wire format, one JSON object per line:
//!
//! ```text
//! -> {"id": "7", "kind": "text", "payload": "a photo of a dog"}
//! <- {"id": "7", "dim": 512, "values": [...]}
//! <- {"id": "8", "error": "image not found"}
//! ```
//!
//! Responses may arrive in any order and are matched by id.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TataError};
use crate::numerics::{l2_normalize, Embedding, Role};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeKind {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodeRequest {
    pub kind: EncodeKind,
    pub payload: String,
}

impl EncodeRequest {
    pub fn text(payload: impl Into<String>) -> Self {
        Self {
            kind: EncodeKind::Text,
            payload: payload.into(),
        }
    }

    pub fn image(path: impl Into<String>) -> Self {
        Self {
            kind: EncodeKind::Image,
            payload: path.into(),
        }
    }
}

pub trait Encoder: Send + Sync {
    /// One unit-norm embedding per request, in request order.
    fn encode(&self, requests: &[EncodeRequest]) -> Result<Vec<Embedding>>;

    fn encode_texts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let requests: Vec<EncodeRequest> = texts.iter().map(EncodeRequest::text).collect();
        self.encode(&requests)
    }
}

fn role_of(kind: EncodeKind) -> Role {
    match kind {
        EncodeKind::Text => Role::Text,
        EncodeKind::Image => Role::Image,
    }
}

/// A fixed lookup table of `(kind, payload) -> embedding`.
#[derive(Debug, Clone, Default)]
pub struct FixtureCache {
    entries: HashMap<(EncodeKind, String), Embedding>,
}

impl FixtureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_texts(texts: &[String], embeddings: &[Embedding]) -> Result<Self> {
        if texts.len() != embeddings.len() {
            return Err(TataError::CountMismatch(texts.len(), embeddings.len()));
        }
        let mut cache = Self::new();
        for (t, e) in texts.iter().zip(embeddings) {
            cache.insert(EncodeRequest::text(t.clone()), e.clone());
        }
        Ok(cache)
    }

    pub fn insert(&mut self, request: EncodeRequest, embedding: Embedding) {
        let role = role_of(request.kind);
        self.entries
            .insert((request.kind, request.payload), embedding.with_role(role));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, request: &EncodeRequest) -> Option<&Embedding> {
        self.entries.get(&(request.kind, request.payload.clone()))
    }

    /// Text entries sorted by text, for writing a cache file.
    pub fn text_entries(&self) -> Vec<(&str, &Embedding)> {
        let mut out: Vec<(&str, &Embedding)> = self
            .entries
            .iter()
            .filter(|((k, _), _)| *k == EncodeKind::Text)
            .map(|((_, t), e)| (t.as_str(), e))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }
}

impl Encoder for FixtureCache {
    fn encode(&self, requests: &[EncodeRequest]) -> Result<Vec<Embedding>> {
        requests
            .iter()
            .map(|r| {
                self.get(r).cloned().ok_or_else(|| {
                    TataError::Encoder(format!("no cached embedding for {:?}", r.payload))
                })
            })
            .collect()
    }
}

impl<E: Encoder + ?Sized> Encoder for &E {
    fn encode(&self, requests: &[EncodeRequest]) -> Result<Vec<Embedding>> {
        (**self).encode(requests)
    }
}

impl<E: Encoder + ?Sized> Encoder for Arc<E> {
    fn encode(&self, requests: &[EncodeRequest]) -> Result<Vec<Embedding>> {
        (**self).encode(requests)
    }
}

impl<E: Encoder + ?Sized> Encoder for Box<E> {
    fn encode(&self, requests: &[EncodeRequest]) -> Result<Vec<Embedding>> {
        (**self).encode(requests)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: String,
    pub kind: EncodeKind,
    pub payload: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Client for an external encoder service.
pub struct RemoteEncoder {
    writer: Mutex<Box<dyn Write + Send>>,
    lines: Mutex<Receiver<std::io::Result<String>>>,
    parked: Mutex<HashMap<String, WireResponse>>,
    next_id: AtomicU64,
    dim: Mutex<Option<usize>>,
    timeout: Duration,
    child: Option<Mutex<Child>>,
}

impl RemoteEncoder {
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let failed = line.is_err();
                if tx.send(line).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            writer: Mutex::new(Box::new(writer)),
            lines: Mutex::new(rx),
            parked: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(0),
            dim: Mutex::new(None),
            timeout,
            child: None,
        }
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Ok(Self::from_streams(reader, stream, timeout))
    }

    /// Spawns `program args...` and talks to it over stdin/stdout.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::from_streams(stdout, stdin, timeout);
        client.child = Some(Mutex::new(child));
        Ok(client)
    }

    /// `tcp://host:port` or `host:port` connects; `exec:<command line>` spawns.
    pub fn from_endpoint(endpoint: &str, timeout: Duration) -> Result<Self> {
        if let Some(cmd) = endpoint.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts
                .next()
                .ok_or_else(|| TataError::Parse("empty exec endpoint".into()))?;
            let args: Vec<String> = parts.collect();
            Self::spawn(&program, &args, timeout)
        } else {
            Self::connect_tcp(endpoint.trim_start_matches("tcp://"), timeout)
        }
    }

    fn check(&self, response: WireResponse) -> Result<Embedding> {
        if let Some(message) = response.error {
            return Err(TataError::Encoder(format!(
                "request {}: {message}",
                response.id
            )));
        }
        let (Some(dim), Some(values)) = (response.dim, response.values) else {
            return Err(TataError::Protocol(format!(
                "response {} has neither values nor error",
                response.id
            )));
        };
        if values.len() != dim {
            return Err(TataError::Protocol(format!(
                "response {} declares dim {dim} but carries {} values",
                response.id,
                values.len()
            )));
        }
        let mut known = self.dim.lock().unwrap();
        match *known {
            Some(d) if d != dim => {
                return Err(TataError::Protocol(format!(
                    "response {} has dim {dim}, expected {d}",
                    response.id
                )))
            }
            None => *known = Some(dim),
            _ => {}
        }
        l2_normalize(&values, Role::Text)
            .map_err(|e| TataError::Protocol(format!("response {}: {e}", response.id)))
    }
}

impl Encoder for RemoteEncoder {
    fn encode(&self, requests: &[EncodeRequest]) -> Result<Vec<Embedding>> {
        let ids: Vec<String> = requests
            .iter()
            .map(|_| self.next_id.fetch_add(1, Ordering::Relaxed).to_string())
            .collect();
        {
            let mut w = self.writer.lock().unwrap();
            for (id, r) in ids.iter().zip(requests) {
                let line = serde_json::to_string(&WireRequest {
                    id: id.clone(),
                    kind: r.kind,
                    payload: r.payload.clone(),
                })?;
                w.write_all(line.as_bytes())?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }

        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        let mut got: HashMap<String, WireResponse> = HashMap::new();
        let deadline = Instant::now() + self.timeout;
        let lines = self.lines.lock().unwrap();
        {
            let mut parked = self.parked.lock().unwrap();
            for id in &ids {
                if let Some(r) = parked.remove(id) {
                    got.insert(id.clone(), r);
                }
            }
        }
        while got.len() < ids.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            let line = match lines.recv_timeout(left) {
                Ok(line) => line?,
                Err(RecvTimeoutError::Timeout) => return Err(TataError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(TataError::Protocol("encoder closed the connection".into()))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let response: WireResponse = serde_json::from_str(&line)
                .map_err(|e| TataError::Protocol(format!("malformed response line: {e}")))?;
            if wanted.contains(response.id.as_str()) {
                got.insert(response.id.clone(), response);
            } else {
                self.parked
                    .lock()
                    .unwrap()
                    .insert(response.id.clone(), response);
            }
        }
        drop(lines);

        ids.iter()
            .zip(requests)
            .map(|(id, r)| {
                let response = got.remove(id).expect("collected above");
                Ok(self.check(response)?.with_role(role_of(r.kind)))
            })
            .collect()
    }
}

impl Drop for RemoteEncoder {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            let _ = child.lock().unwrap().kill();
        }
    }
}

/// Answers protocol requests from `reader` using `encoder`, one line at a
/// time, until EOF. Per-request failures become error responses.
pub fn serve<R: BufRead, W: Write>(encoder: &dyn Encoder, reader: R, mut writer: W) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<WireRequest>(&line) {
            Ok(req) => match encoder.encode(&[EncodeRequest {
                kind: req.kind,
                payload: req.payload,
            }]) {
                Ok(mut e) => {
                    let values = e.pop().expect("one request").into_values();
                    WireResponse {
                        id: req.id,
                        dim: Some(values.len()),
                        values: Some(values),
                        error: None,
                    }
                }
                Err(e) => WireResponse {
                    id: req.id,
                    dim: None,
                    values: None,
                    error: Some(e.to_string()),
                },
            },
            Err(e) => WireResponse {
                id: serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string))
                    .unwrap_or_default(),
                dim: None,
                values: None,
                error: Some(format!("malformed request: {e}")),
            },
        };
        serde_json::to_writer(&mut writer, &response)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Memoizes text encodings by exact prompt text.
pub struct MemoEncoder<E> {
    inner: E,
    memo: RwLock<HashMap<String, Embedding>>,
}

impl<E: Encoder> MemoEncoder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            memo: RwLock::new(HashMap::new()),
        }
    }

    pub fn memo_len(&self) -> usize {
        self.memo.read().unwrap().len()
    }
}

impl<E: Encoder> Encoder for MemoEncoder<E> {
    fn encode(&self, requests: &[EncodeRequest]) -> Result<Vec<Embedding>> {
        let mut out: Vec<Option<Embedding>> = {
            let memo = self.memo.read().unwrap();
            requests
                .iter()
                .map(|r| match r.kind {
                    EncodeKind::Text => memo.get(&r.payload).cloned(),
                    EncodeKind::Image => None,
                })
                .collect()
        };
        let mut missing: Vec<usize> = Vec::new();
        let mut seen: HashMap<&EncodeRequest, usize> = HashMap::new();
        for (i, slot) in out.iter().enumerate() {
            if slot.is_none() && !seen.contains_key(&requests[i]) {
                seen.insert(&requests[i], missing.len());
                missing.push(i);
            }
        }
        if !missing.is_empty() {
            let batch: Vec<EncodeRequest> = missing.iter().map(|&i| requests[i].clone()).collect();
            let fresh = self.inner.encode(&batch)?;
            let mut memo = self.memo.write().unwrap();
            for (r, e) in batch.iter().zip(&fresh) {
                if r.kind == EncodeKind::Text {
                    memo.insert(r.payload.clone(), e.clone());
                }
            }
            for (i, slot) in out.iter_mut().enumerate() {
                if slot.is_none() {
                    *slot = Some(fresh[seen[&requests[i]]].clone());
                }
            }
        }
        Ok(out.into_iter().map(|e| e.expect("filled")).collect())
    }
}
