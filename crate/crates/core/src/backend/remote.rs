//! HTTP client for the `diffex-backend/1` protocol.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::{
    ClassifyRequest, ClassifyResponse, EditRequest, EditResponse, Handshake, Reply, CLASSIFY_BATCH_PATH,
    CLASSIFY_PATH, EDIT_BATCH_PATH, EDIT_PATH, HANDSHAKE_PATH, PROTOCOL_VERSION,
};
use super::{Backend, BackendError, BackendSession, ClassifierOutput, EditParams, ErrorCode, SemanticEdit, ValueSpace};

/// Environment variable holding the bearer token for remote backends.
pub const TOKEN_ENV: &str = "DIFFEX_BACKEND_TOKEN";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Upper bound on requests in flight at once.
    pub max_in_flight: usize,
    pub timeout: Duration,
    /// Extra attempts after a transport failure. Protocol errors are never
    /// retried.
    pub retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig { max_in_flight: 8, timeout: Duration::from_secs(30), retries: 0 }
    }
}

struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Gate { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    agent: ureq::Agent,
    base: String,
    token: Option<String>,
    config: RemoteConfig,
    gate: Gate,
    next_id: AtomicU64,
    value_space: Mutex<Option<ValueSpace>>,
}

enum Attempt {
    Transport(String),
    Fatal(BackendError),
}

impl RemoteBackend {
    pub fn new(endpoint: &str, token: Option<String>, config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend {
            agent,
            base: endpoint.trim_end_matches('/').to_string(),
            token,
            gate: Gate::new(config.max_in_flight),
            config,
            next_id: AtomicU64::new(1),
            value_space: Mutex::new(None),
        }
    }

    fn request_id(&self) -> String {
        format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn attempt<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, Attempt> {
        let mut req = self.agent.post(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Transport(e.to_string()))?;
        match serde_json::from_str::<Reply<Resp>>(&text) {
            Ok(Reply::Ok(v)) => Ok(v),
            Ok(Reply::Err(e)) => Err(Attempt::Fatal(BackendError::protocol(e.error.code, e.error.message))),
            Err(_) if status.is_server_error() => Err(Attempt::Transport(format!("HTTP {status}: {text}"))),
            Err(e) => Err(Attempt::Fatal(BackendError::protocol(
                ErrorCode::Internal,
                format!("undecodable response (HTTP {status}): {e}"),
            ))),
        }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, BackendError> {
        let _permit = self.gate.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(path, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transport(message)) => {
                    if attempts > self.config.retries {
                        return Err(BackendError::Transport { message, attempts, retry_budget: self.config.retries });
                    }
                    log::warn!("transport failure on {path} (attempt {attempts}): {message}");
                }
            }
        }
    }

    fn check_id(sent: &str, got: &str) -> Result<(), BackendError> {
        if sent == got {
            Ok(())
        } else {
            Err(BackendError::protocol(ErrorCode::Internal, format!("response for {got:?} answered request {sent:?}")))
        }
    }

    fn output(&self, resp: ClassifyResponse) -> Result<ClassifierOutput, BackendError> {
        let cached = *self.value_space.lock();
        let value_space = match cached {
            Some(v) => v,
            None => self.handshake()?.value_space,
        };
        Ok(ClassifierOutput { class_labels: resp.labels, values: resp.values, value_space })
    }

    /// Edits several images in one request. Results are in request order.
    pub fn edit_batch(
        &self,
        items: &[(String, Vec<SemanticEdit>, EditParams)],
    ) -> Result<Vec<Result<String, BackendError>>, BackendError> {
        let reqs: Vec<EditRequest> = items
            .iter()
            .map(|(image_id, semantics, params)| EditRequest {
                request_id: self.request_id(),
                image_id: image_id.clone(),
                semantics: semantics.clone(),
                params: *params,
            })
            .collect();
        let replies: Vec<Reply<EditResponse>> = self.post(EDIT_BATCH_PATH, &reqs)?;
        if replies.len() != reqs.len() {
            return Err(BackendError::protocol(ErrorCode::Internal, "batch reply length mismatch"));
        }
        Ok(replies
            .into_iter()
            .zip(&reqs)
            .map(|(r, q)| match r {
                Reply::Ok(v) => RemoteBackend::check_id(&q.request_id, &v.request_id).map(|_| v.edited_image_id),
                Reply::Err(e) => Err(BackendError::protocol(e.error.code, e.error.message)),
            })
            .collect())
    }

    pub fn classify_batch(&self, image_ids: &[String]) -> Result<Vec<Result<ClassifierOutput, BackendError>>, BackendError> {
        let reqs: Vec<ClassifyRequest> = image_ids
            .iter()
            .map(|id| ClassifyRequest { request_id: self.request_id(), image_id: id.clone() })
            .collect();
        let replies: Vec<Reply<ClassifyResponse>> = self.post(CLASSIFY_BATCH_PATH, &reqs)?;
        if replies.len() != reqs.len() {
            return Err(BackendError::protocol(ErrorCode::Internal, "batch reply length mismatch"));
        }
        Ok(replies
            .into_iter()
            .zip(&reqs)
            .map(|(r, q)| match r {
                Reply::Ok(v) => {
                    RemoteBackend::check_id(&q.request_id, &v.request_id)?;
                    self.output(v)
                }
                Reply::Err(e) => Err(BackendError::protocol(e.error.code, e.error.message)),
            })
            .collect())
    }
}

impl Backend for RemoteBackend {
    fn handshake(&self) -> Result<Handshake, BackendError> {
        let h: Handshake = self.post(HANDSHAKE_PATH, &serde_json::json!({ "protocol": PROTOCOL_VERSION }))?;
        *self.value_space.lock() = Some(h.value_space);
        Ok(h)
    }

    fn edit(&self, image_id: &str, semantics: &[SemanticEdit], params: &EditParams) -> Result<String, BackendError> {
        let req = EditRequest {
            request_id: self.request_id(),
            image_id: image_id.to_string(),
            semantics: semantics.to_vec(),
            params: *params,
        };
        let resp: EditResponse = self.post(EDIT_PATH, &req)?;
        RemoteBackend::check_id(&req.request_id, &resp.request_id)?;
        Ok(resp.edited_image_id)
    }

    fn classify(&self, image_id: &str) -> Result<ClassifierOutput, BackendError> {
        let req = ClassifyRequest { request_id: self.request_id(), image_id: image_id.to_string() };
        let resp: ClassifyResponse = self.post(CLASSIFY_PATH, &req)?;
        RemoteBackend::check_id(&req.request_id, &resp.request_id)?;
        self.output(resp)
    }
}

/// Connects to a backend over HTTP and performs the version handshake.
pub fn connect_remote_backend(
    endpoint: &str,
    token: Option<String>,
    config: RemoteConfig,
) -> Result<BackendSession, BackendError> {
    BackendSession::open(Arc::new(RemoteBackend::new(endpoint, token, config)))
}
