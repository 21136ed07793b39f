//! HTTP client for backends speaking the `/v1/generate` protocol.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::warn;

use super::wire::{decode_response, encode_request, GENERATE_PATH};
use super::{Backend, BackendError, BackendErrorKind, GenerationRequest, GenerationResult};

pub const DEFAULT_TIMEOUT_S: u64 = 300;
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteOptions {
    pub timeout_s: u64,
    pub concurrency: usize,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout_s: DEFAULT_TIMEOUT_S,
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cond: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter poisoned");
        while *free == 0 {
            free = self.cond.wait(free).expect("limiter poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter poisoned") += 1;
        self.0.cond.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteBackend {
    id: String,
    url: String,
    options: RemoteOptions,
    client: reqwest::blocking::Client,
    limiter: Limiter,
}

enum Attempt {
    Transport(BackendErrorKind),
    Final(Box<Result<GenerationResult, BackendErrorKind>>),
}

impl RemoteBackend {
    pub fn new(endpoint: &str, options: RemoteOptions) -> Result<Self, reqwest::Error> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(options.timeout_s))
            .build()?;
        let base = endpoint.trim_end_matches('/');
        Ok(Self {
            id: format!("remote:{base}"),
            url: format!("{base}{GENERATE_PATH}"),
            limiter: Limiter::new(options.concurrency),
            options,
            client,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn attempt(&self, req: &GenerationRequest, body: &[u8]) -> Attempt {
        let sent = self
            .client
            .post(&self.url)
            .header("content-type", "application/json")
            .body(body.to_vec())
            .send();
        let resp = match sent {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return Attempt::Transport(BackendErrorKind::Timeout(self.options.timeout_s))
            }
            Err(e) => return Attempt::Transport(BackendErrorKind::Unavailable(e.to_string())),
        };
        let status = resp.status();
        let bytes = match resp.bytes() {
            Ok(b) => b,
            Err(e) if e.is_timeout() => {
                return Attempt::Transport(BackendErrorKind::Timeout(self.options.timeout_s))
            }
            Err(e) => return Attempt::Transport(BackendErrorKind::Unavailable(e.to_string())),
        };
        if !status.is_success() {
            let mut text = String::from_utf8_lossy(&bytes).into_owned();
            text.truncate(512);
            return Attempt::Final(Box::new(Err(BackendErrorKind::Status {
                status: status.as_u16(),
                body: text,
            })));
        }
        Attempt::Final(Box::new(decode_response(req, &bytes)))
    }
}

/// Sends the request, retrying once on transport failure. Protocol
/// violations and error statuses are not retried.
pub fn remote_generate(
    backend: &RemoteBackend,
    req: &GenerationRequest,
) -> Result<GenerationResult, BackendError> {
    let wire = encode_request(req).map_err(|k| BackendError::new(req, k))?;
    let body = serde_json::to_vec(&wire).expect("wire request serializes");
    let _permit = backend.limiter.acquire();
    let mut last = None;
    for attempt in 0..2 {
        match backend.attempt(req, &body) {
            Attempt::Final(r) => return (*r).map_err(|k| BackendError::new(req, k)),
            Attempt::Transport(kind) => {
                warn!(
                    "template_id={} seed={} attempt={} transport failure: {kind}",
                    req.prompt.template_id,
                    req.seed,
                    attempt + 1
                );
                last = Some(kind);
            }
        }
    }
    Err(BackendError::new(req, last.expect("two attempts ran")))
}

impl Backend for RemoteBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn dispatch(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        remote_generate(self, request)
    }
}
