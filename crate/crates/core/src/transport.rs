//! JSON-over-HTTP transport used by the external encoder and the chat client.
//!
//! Tests run against [`StubTransport`] or replay a recorded
//! `transcripts.jsonl` through [`ReplayTransport`]; nothing in the test suite
//! touches the network.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("request to {url} failed: {message}")]
    Connection { url: String, message: String },
    #[error("{url} returned status {status}: {body}")]
    Status {
        url: String,
        status: u16,
        body: String,
    },
    #[error("unexpected response from {url}: {message}")]
    Decode { url: String, message: String },
    #[error("transcript replay: {0}")]
    Replay(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Connection { .. } => true,
            TransportError::Status { status, .. } => {
                matches!(status, 408 | 429 | 500 | 502 | 503 | 504)
            }
            TransportError::Decode { .. } | TransportError::Replay(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, TransportError>;
}

/// Blocking HTTP client.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, TransportError> {
        let mut req = self.agent.post(url);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| TransportError::Connection {
                url: url.to_string(),
                message: e.to_string(),
            })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Decode {
                url: url.to_string(),
                message: e.to_string(),
            })?;
        Ok(HttpResponse { status, body: text })
    }
}

/// One request/response exchange in `transcripts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub url: String,
    pub request: Value,
    pub response: HttpResponse,
}

/// Forwards to an inner transport and appends every exchange to a transcript.
/// Headers are not recorded, so API keys never reach the file.
pub struct RecordingTransport<T> {
    inner: T,
    path: PathBuf,
    lock: Mutex<()>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, path: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            path: path.into(),
            lock: Mutex::new(()),
        }
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, TransportError> {
        let response = self.inner.post_json(url, headers, body)?;
        let entry = TranscriptEntry {
            url: url.to_string(),
            request: body.clone(),
            response: response.clone(),
        };
        let _guard = self.lock.lock().expect("transcript lock");
        let mut line = serde_json::to_vec(&entry).expect("transcript entries serialize");
        line.push(b'\n');
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| f.write_all(&line))
            .map_err(|e| {
                TransportError::Replay(format!("cannot write {}: {e}", self.path.display()))
            })?;
        Ok(response)
    }
}

/// Serves responses from a transcript. A request is answered by the first
/// unused entry with the same url and request body, so replay is independent
/// of call order between distinct requests.
pub struct ReplayTransport {
    entries: Mutex<Vec<(TranscriptEntry, bool)>>,
}

impl ReplayTransport {
    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        Self {
            entries: Mutex::new(entries.into_iter().map(|e| (e, false)).collect()),
        }
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        Ok(Self::from_entries(crate::catalog::read_jsonl(path)?))
    }
}

impl Transport for ReplayTransport {
    fn post_json(
        &self,
        url: &str,
        _headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, TransportError> {
        let mut entries = self.entries.lock().expect("replay lock");
        let slot = entries
            .iter_mut()
            .find(|(e, used)| !*used && e.url == url && &e.request == body)
            .ok_or_else(|| {
                TransportError::Replay(format!("no recorded response for request to {url}"))
            })?;
        slot.1 = true;
        Ok(slot.0.response.clone())
    }
}

type StubFn = dyn Fn(&str, &Value) -> Result<HttpResponse, TransportError> + Send + Sync;

/// Closure-backed transport for tests.
pub struct StubTransport {
    handler: Box<StubFn>,
    calls: Mutex<Vec<Value>>,
}

impl StubTransport {
    pub fn new(
        handler: impl Fn(&str, &Value) -> Result<HttpResponse, TransportError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            handler: Box::new(handler),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Always answers 200 with `body`.
    pub fn fixed(body: impl Into<String>) -> Self {
        let body = body.into();
        Self::new(move |_, _| {
            Ok(HttpResponse {
                status: 200,
                body: body.clone(),
            })
        })
    }

    /// Answers with the given responses in order, then fails.
    pub fn sequence(responses: Vec<Result<HttpResponse, TransportError>>) -> Self {
        let queue = Mutex::new(VecDeque::from(responses));
        Self::new(move |url, _| {
            queue
                .lock()
                .expect("stub queue")
                .pop_front()
                .unwrap_or_else(|| Err(TransportError::Replay(format!("stub exhausted for {url}"))))
        })
    }

    pub fn requests(&self) -> Vec<Value> {
        self.calls.lock().expect("stub calls").clone()
    }
}

impl Transport for StubTransport {
    fn post_json(
        &self,
        url: &str,
        _headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, TransportError> {
        self.calls.lock().expect("stub calls").push(body.clone());
        (self.handler)(url, body)
    }
}

/// Exponential backoff with seeded full jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub seed: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 20_000,
            seed: 0,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    /// Delay before retry number `attempt` (1-based) of the request keyed by
    /// `key`. Same `(seed, key, attempt)` always yields the same delay.
    pub fn delay(&self, key: &str, attempt: u32) -> Duration {
        let cap = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.saturating_sub(1).min(20))
            .min(self.max_delay_ms);
        let mut rng = seed::rng(seed::derive_seed(self.seed, &format!("{key}#{attempt}")));
        Duration::from_millis(if cap == 0 {
            0
        } else {
            rng.random_range(0..=cap)
        })
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent. `sleep` is injected so tests never block.
    pub fn run<T>(
        &self,
        key: &str,
        sleep: &dyn Fn(Duration),
        mut op: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<T, TransportError> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    let d = self.delay(key, attempt);
                    tracing::warn!(key, attempt, delay_ms = d.as_millis() as u64, error = %e, "retrying request");
                    sleep(d);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Walks a dotted path (`data.*.embedding`, `choices.0.message.content`).
/// `*` maps over an array and yields one value per element.
pub fn select_json<'a>(root: &'a Value, path: &str) -> Vec<&'a Value> {
    let mut current = vec![root];
    for key in path.split('.').filter(|k| !k.is_empty()) {
        let mut next = Vec::new();
        for v in current {
            if key == "*" {
                if let Some(arr) = v.as_array() {
                    next.extend(arr.iter());
                }
            } else if let Ok(idx) = key.parse::<usize>() {
                if let Some(x) = v.as_array().and_then(|a| a.get(idx)) {
                    next.push(x);
                }
            } else if let Some(x) = v.get(key) {
                next.push(x);
            }
        }
        current = next;
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::cell::RefCell;

    fn err(status: u16) -> Result<HttpResponse, TransportError> {
        Err(TransportError::Status {
            url: "u".into(),
            status,
            body: String::new(),
        })
    }

    #[test]
    fn retries_then_succeeds() {
        let stub = StubTransport::sequence(vec![
            err(503),
            err(429),
            Ok(HttpResponse {
                status: 200,
                body: "ok".into(),
            }),
        ]);
        let slept = RefCell::new(Vec::new());
        let policy = RetryPolicy {
            max_retries: 3,
            ..RetryPolicy::default()
        };
        let got = policy
            .run("k", &|d| slept.borrow_mut().push(d), || {
                stub.post_json("u", &[], &json!({}))
            })
            .unwrap();
        assert_eq!(got.body, "ok");
        assert_eq!(slept.borrow().len(), 2);
    }

    #[test]
    fn non_retryable_status_is_not_retried() {
        let stub = StubTransport::sequence(vec![err(401), err(500)]);
        let policy = RetryPolicy::default();
        let e = policy
            .run("k", &|_| {}, || stub.post_json("u", &[], &json!({})))
            .unwrap_err();
        assert!(matches!(e, TransportError::Status { status: 401, .. }));
        assert_eq!(stub.requests().len(), 1);
    }

    #[test]
    fn budget_exhaustion_surfaces_last_error() {
        let stub = StubTransport::new(|_, _| err(500));
        let policy = RetryPolicy {
            max_retries: 2,
            ..RetryPolicy::default()
        };
        assert!(policy
            .run("k", &|_| {}, || stub.post_json("u", &[], &json!({})))
            .is_err());
        assert_eq!(stub.requests().len(), 3);
    }

    #[test]
    fn jitter_is_replayable_and_bounded() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay_ms: 100,
            max_delay_ms: 350,
            seed: 9,
        };
        for attempt in 1..=5 {
            assert_eq!(p.delay("req", attempt), p.delay("req", attempt));
            assert!(p.delay("req", attempt) <= Duration::from_millis(350));
        }
    }

    #[test]
    fn replay_matches_by_request() {
        let entries = vec![
            TranscriptEntry {
                url: "u".into(),
                request: json!({"q": 1}),
                response: HttpResponse {
                    status: 200,
                    body: "one".into(),
                },
            },
            TranscriptEntry {
                url: "u".into(),
                request: json!({"q": 2}),
                response: HttpResponse {
                    status: 200,
                    body: "two".into(),
                },
            },
        ];
        let t = ReplayTransport::from_entries(entries);
        assert_eq!(t.post_json("u", &[], &json!({"q": 2})).unwrap().body, "two");
        assert_eq!(t.post_json("u", &[], &json!({"q": 1})).unwrap().body, "one");
        assert!(t.post_json("u", &[], &json!({"q": 1})).is_err());
    }

    #[test]
    fn recording_then_replaying_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transcripts.jsonl");
        let rec = RecordingTransport::new(StubTransport::fixed("hello"), &path);
        rec.post_json(
            "u",
            &[("Authorization".into(), "secret".into())],
            &json!({"a": 1}),
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("secret"));
        let replay = ReplayTransport::load(&path).unwrap();
        assert_eq!(
            replay.post_json("u", &[], &json!({"a": 1})).unwrap().body,
            "hello"
        );
    }

    #[test]
    fn json_paths() {
        let v = json!({"data": [{"embedding": [1, 2]}, {"embedding": [3]}], "choices": [{"message": {"content": "x"}}]});
        assert_eq!(select_json(&v, "data.*.embedding").len(), 2);
        assert_eq!(
            select_json(&v, "choices.0.message.content"),
            vec![&json!("x")]
        );
        assert!(select_json(&v, "nope").is_empty());
    }
}
