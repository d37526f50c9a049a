//! Client for the v1 embedding wire protocol.
//!
//! ```text
//! POST {endpoint}/embed   {"model": str, "task": "query"|"document", "normalize": bool, "texts": [str]}
//!                      -> {"dim": int, "vectors": [[num]]}
//! GET  {endpoint}/healthz -> {"status": "ok", "models": [str]}
//! ```
//!
//! 400 and 404 are permanent; 429, 5xx and connection failures are retried
//! with full-jitter exponential backoff.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, EmbedderSpec, TaskType};
use crate::error::{Error, Result};

/// Environment variable holding an optional bearer token for the endpoint.
pub const TOKEN_ENV_VAR: &str = "RAGBENCH_API_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub model: String,
    pub task: String,
    pub normalize: bool,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(200),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the sleep after failed attempt `attempt` (1-based).
    pub fn backoff_cap(&self, attempt: u32) -> Duration {
        self.base_delay
            .mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }

    fn jittered(&self, attempt: u32) -> Duration {
        let cap = self.backoff_cap(attempt).as_secs_f64();
        Duration::from_secs_f64(rand::thread_rng().gen_range(0.0..=cap))
    }
}

/// Minimum-interval limiter shared by every client of one endpoint.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Option<Duration>,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        let interval = (requests_per_second > 0.0)
            .then(|| Duration::from_secs_f64(1.0 / requests_per_second));
        Self {
            interval,
            next_slot: Mutex::new(None),
        }
    }

    /// Limiter registered for `endpoint`; created with `rps` on first use.
    pub fn shared(endpoint: &str, rps: f64) -> Arc<RateLimiter> {
        static REGISTRY: OnceLock<Mutex<HashMap<String, Arc<RateLimiter>>>> = OnceLock::new();
        let mut reg = REGISTRY.get_or_init(Default::default).lock().unwrap();
        reg.entry(endpoint.to_string())
            .or_insert_with(|| Arc::new(RateLimiter::new(rps)))
            .clone()
    }

    /// Blocks until the caller may issue a request.
    pub fn acquire(&self) {
        let Some(interval) = self.interval else {
            return;
        };
        let wait = {
            let mut slot = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let start = slot.map_or(now, |s| s.max(now));
            *slot = Some(start + interval);
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

enum Failure {
    Transient(String),
    Permanent(Error),
}

#[derive(Debug, Clone)]
pub struct RemoteClient {
    endpoint: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    limiter: Arc<RateLimiter>,
    token: Option<String>,
}

impl RemoteClient {
    pub fn new(endpoint: &str, timeout: Duration, retry: RetryPolicy, limiter: Arc<RateLimiter>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(timeout)
            .timeout(timeout)
            .build();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent,
            retry,
            limiter,
            token: std::env::var(TOKEN_ENV_VAR).ok().filter(|t| !t.is_empty()),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn with_auth(&self, req: ureq::Request) -> ureq::Request {
        match &self.token {
            Some(t) => req.set("Authorization", &format!("Bearer {t}")),
            None => req,
        }
    }

    fn classify(err: ureq::Error) -> Failure {
        match err {
            ureq::Error::Status(code, resp) => {
                let body = resp.into_string().unwrap_or_default();
                match code {
                    429 | 500..=599 => Failure::Transient(format!("HTTP {code}: {body}")),
                    404 => Failure::Permanent(Error::Protocol(format!("unknown model (HTTP 404): {body}"))),
                    _ => Failure::Permanent(Error::Protocol(format!("HTTP {code}: {body}"))),
                }
            }
            ureq::Error::Transport(t) => Failure::Transient(t.to_string()),
        }
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> std::result::Result<T, Failure>) -> Result<T> {
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts {
            self.limiter.acquire();
            match call() {
                Ok(v) => return Ok(v),
                Err(Failure::Permanent(e)) => return Err(e),
                Err(Failure::Transient(msg)) => {
                    log::debug!("{}: attempt {attempt} failed: {msg}", self.endpoint);
                    last = msg;
                    if attempt < self.retry.max_attempts {
                        std::thread::sleep(self.retry.jittered(attempt));
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts: self.retry.max_attempts,
            message: format!("{}: {last}", self.endpoint),
        })
    }

    pub fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse> {
        let url = format!("{}/embed", self.endpoint);
        let resp: EmbedResponse = self.with_retries(|| {
            let r = self
                .with_auth(self.agent.post(&url))
                .send_json(request)
                .map_err(Self::classify)?;
            r.into_json::<EmbedResponse>()
                .map_err(|e| Failure::Permanent(Error::Protocol(format!("malformed /embed response: {e}"))))
        })?;
        if resp.vectors.len() != request.texts.len() {
            return Err(Error::Protocol(format!(
                "/embed returned {} vectors for {} texts",
                resp.vectors.len(),
                request.texts.len()
            )));
        }
        if let Some((i, v)) = resp.vectors.iter().enumerate().find(|(_, v)| v.len() != resp.dim) {
            return Err(Error::Protocol(format!(
                "/embed vector {i} has length {} but response dim is {}",
                v.len(),
                resp.dim
            )));
        }
        Ok(resp)
    }

    pub fn health(&self) -> Result<HealthResponse> {
        let url = format!("{}/healthz", self.endpoint);
        self.with_retries(|| {
            let r = self
                .with_auth(self.agent.get(&url))
                .call()
                .map_err(Self::classify)?;
            r.into_json::<HealthResponse>()
                .map_err(|e| Failure::Permanent(Error::Protocol(format!("malformed /healthz response: {e}"))))
        })
    }
}

/// [`Backend`] speaking the wire protocol for one model.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    client: RemoteClient,
    model: String,
    normalize: bool,
}

impl RemoteBackend {
    pub fn new(client: RemoteClient, model: &str, normalize: bool) -> Self {
        Self {
            client,
            model: model.to_string(),
            normalize,
        }
    }

    pub fn from_spec(spec: &EmbedderSpec) -> Result<Self> {
        let endpoint = spec
            .endpoint
            .as_deref()
            .ok_or_else(|| Error::Config("remote backend requires an endpoint".into()))?;
        let client = RemoteClient::new(
            endpoint,
            Duration::from_secs(spec.timeout_secs),
            RetryPolicy::default(),
            RateLimiter::shared(endpoint, spec.rate_limit_rps),
        );
        Ok(Self::new(client, &spec.name, spec.normalize))
    }

    pub fn client(&self) -> &RemoteClient {
        &self.client
    }

    pub fn request(&self, texts: &[String], task: TaskType) -> EmbedRequest {
        EmbedRequest {
            model: self.model.clone(),
            task: task.wire_name().to_string(),
            normalize: self.normalize,
            texts: texts.to_vec(),
        }
    }
}

impl Backend for RemoteBackend {
    fn embed(&self, texts: &[String], task: TaskType) -> Result<Vec<Vec<f32>>> {
        Ok(self.client.embed(&self.request(texts, task))?.vectors)
    }
}
