//! Blocking client for OpenAI-compatible chat and embedding endpoints.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use reqwest::header::CONTENT_TYPE;
use reqwest::StatusCode;
use serde_json::Value;

use super::{GatewayError, ProviderConfig, Result};

const MAX_BACKOFF: Duration = Duration::from_secs(30);
const ERROR_BODY_LIMIT: usize = 512;

/// Counting semaphore capping concurrent requests to one provider.
struct InFlight {
    active: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            active: Mutex::new(0),
            freed: Condvar::new(),
            limit: limit.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|p| p.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|p| p.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|p| p.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

pub(crate) struct RemoteClient {
    http: reqwest::blocking::Client,
    base: String,
    pub(crate) model: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
    gate: InFlight,
    attempts: AtomicU64,
}

fn retryable_status(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

fn truncate(mut s: String) -> String {
    if s.len() > ERROR_BODY_LIMIT {
        let mut cut = ERROR_BODY_LIMIT;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
    }
    s
}

impl RemoteClient {
    /// Resolves the API key up front so a missing variable fails before any
    /// request is made.
    pub(crate) fn new(cfg: &ProviderConfig) -> Result<Self> {
        let base = cfg
            .endpoint
            .clone()
            .ok_or_else(|| GatewayError::Config("remote provider needs an endpoint".into()))?;
        let model = cfg
            .model_name
            .clone()
            .ok_or_else(|| GatewayError::Config("remote provider needs a model_name".into()))?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::MissingApiKey { var: var.clone() })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(Self {
            http,
            base: base.trim_end_matches('/').to_string(),
            model,
            api_key,
            max_retries: cfg.max_retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
            gate: InFlight::new(cfg.max_in_flight),
            attempts: AtomicU64::new(0),
        })
    }

    /// Total wire attempts made so far.
    pub(crate) fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    fn backoff_for(&self, attempt: u32) -> Duration {
        self.backoff.saturating_mul(1u32 << (attempt - 1).min(16)).min(MAX_BACKOFF)
    }

    /// POSTs `body` to `{endpoint}{path}`, retrying connection failures,
    /// timeouts, 429 and 5xx up to `max_retries` times.
    pub(crate) fn post(&self, path: &str, body: &str) -> Result<String> {
        let url = format!("{}{path}", self.base);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let outcome = {
                let _permit = self.gate.acquire();
                let mut req = self.http.post(&url).header(CONTENT_TYPE, "application/json").body(body.to_owned());
                if let Some(key) = &self.api_key {
                    req = req.bearer_auth(key);
                }
                req.send().and_then(|resp| {
                    let status = resp.status();
                    resp.text().map(|text| (status, text))
                })
            };
            let can_retry = attempt <= self.max_retries;
            match outcome {
                Ok((status, text)) if status.is_success() => return Ok(text),
                Ok((status, text)) => {
                    tracing::warn!(%url, status = status.as_u16(), attempt, "request failed");
                    if !(retryable_status(status) && can_retry) {
                        return Err(GatewayError::Status {
                            status: status.as_u16(),
                            attempts: attempt,
                            body: truncate(text),
                        });
                    }
                }
                Err(e) => {
                    tracing::warn!(%url, attempt, "transport error: {e}");
                    // a body cut short by the peer surfaces as a decode error
                    let transient = e.is_timeout() || e.is_connect() || e.is_request() || e.is_body() || e.is_decode();
                    if !(transient && can_retry) {
                        return Err(GatewayError::Transport {
                            attempts: attempt,
                            message: e.to_string(),
                        });
                    }
                }
            }
            std::thread::sleep(self.backoff_for(attempt));
        }
    }
}

fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| GatewayError::Decode(format!("response is not JSON: {e}")))
}

/// Content of the first choice's message.
pub(crate) fn decode_chat(text: &str) -> Result<String> {
    let v = parse_json(text)?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| GatewayError::Decode("missing choices[0].message.content string".into()))
}

/// Vector of the first embedding record.
pub(crate) fn decode_embedding(text: &str) -> Result<Vec<f64>> {
    let v = parse_json(text)?;
    let items = v
        .pointer("/data/0/embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Decode("missing data[0].embedding array".into()))?;
    let vector = items
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| GatewayError::Decode(format!("non-numeric embedding component {x}"))))
        .collect::<Result<Vec<f64>>>()?;
    if vector.is_empty() {
        return Err(GatewayError::Decode("empty embedding".into()));
    }
    Ok(vector)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_chat_payloads() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"answer: A"}}]}"#;
        assert_eq!(decode_chat(ok).unwrap(), "answer: A");
        for bad in ["", "{", r#"{"choices":[]}"#, r#"{"choices":[{"message":{"content":3}}]}"#] {
            assert!(matches!(decode_chat(bad), Err(GatewayError::Decode(_))), "{bad}");
        }
    }

    #[test]
    fn decode_embedding_payloads() {
        assert_eq!(decode_embedding(r#"{"data":[{"embedding":[0.5,-1]}]}"#).unwrap(), [0.5, -1.0]);
        for bad in [r#"{"data":[]}"#, r#"{"data":[{"embedding":["x"]}]}"#, r#"{"data":[{"embedding":[]}]}"#] {
            assert!(matches!(decode_embedding(bad), Err(GatewayError::Decode(_))), "{bad}");
        }
    }

    #[test]
    fn permits_cap_concurrency() {
        let gate = std::sync::Arc::new(InFlight::new(2));
        let peak = std::sync::Arc::new(AtomicU64::new(0));
        let now = std::sync::Arc::new(AtomicU64::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (gate, peak, now) = (gate.clone(), peak.clone(), now.clone());
                std::thread::spawn(move || {
                    let _p = gate.acquire();
                    let n = now.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(n, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    now.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
