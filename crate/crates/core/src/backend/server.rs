//! Serves any [`Backend`] over the `diffex-backend/1` HTTP protocol.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use super::protocol::{
    ClassifyRequest, ClassifyResponse, EditRequest, EditResponse, ErrorBody, ErrorCode, ErrorResponse, Reply,
    CLASSIFY_BATCH_PATH, CLASSIFY_PATH, EDIT_BATCH_PATH, EDIT_PATH, HANDSHAKE_PATH,
};
use super::{Backend, BackendError};

type Shared = Arc<dyn Backend>;
type Response = (StatusCode, Json<Value>);

fn code_of(err: &BackendError) -> ErrorCode {
    match err {
        BackendError::Protocol { code, .. } => *code,
        BackendError::InvalidParams(_) => ErrorCode::BadParams,
        _ => ErrorCode::Internal,
    }
}

fn status_of(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::UnknownImage | ErrorCode::UnknownSemantic => StatusCode::NOT_FOUND,
        ErrorCode::BadParams => StatusCode::BAD_REQUEST,
        ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_body(request_id: &str, code: ErrorCode, message: String) -> ErrorResponse {
    ErrorResponse { request_id: request_id.to_string(), error: ErrorBody { code, message } }
}

fn error_response(request_id: &str, err: &BackendError) -> Response {
    let code = code_of(err);
    let message = match err {
        BackendError::Protocol { message, .. } => message.clone(),
        other => other.to_string(),
    };
    (status_of(code), Json(json!(error_body(request_id, code, message))))
}

/// Parses a body, answering `bad_params` (with whatever request id can be
/// recovered) when it does not match the expected shape.
fn parse<T: DeserializeOwned>(body: &str) -> Result<T, Response> {
    serde_json::from_str(body).map_err(|e| {
        let rid = serde_json::from_str::<Value>(body)
            .ok()
            .and_then(|v| v.get("request_id").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_default();
        let err = error_body(&rid, ErrorCode::BadParams, format!("malformed request: {e}"));
        (StatusCode::BAD_REQUEST, Json(json!(err)))
    })
}

fn do_edit(backend: &dyn Backend, req: &EditRequest) -> Reply<EditResponse> {
    if let Err(e) = req.params.validate() {
        return Reply::Err(error_body(&req.request_id, ErrorCode::BadParams, e.to_string()));
    }
    match backend.edit(&req.image_id, &req.semantics, &req.params) {
        Ok(id) => Reply::Ok(EditResponse { request_id: req.request_id.clone(), edited_image_id: id }),
        Err(e) => Reply::Err(error_body(&req.request_id, code_of(&e), e.to_string())),
    }
}

fn do_classify(backend: &dyn Backend, req: &ClassifyRequest) -> Reply<ClassifyResponse> {
    match backend.classify(&req.image_id) {
        Ok(out) => Reply::Ok(ClassifyResponse {
            request_id: req.request_id.clone(),
            labels: out.class_labels,
            values: out.values,
        }),
        Err(e) => Reply::Err(error_body(&req.request_id, code_of(&e), e.to_string())),
    }
}

fn single<T: serde::Serialize>(reply: Reply<T>) -> Response {
    match reply {
        Reply::Ok(v) => (StatusCode::OK, Json(json!(v))),
        Reply::Err(e) => (status_of(e.error.code), Json(json!(e))),
    }
}

async fn blocking<F: FnOnce() -> Response + Send + 'static>(f: F) -> Response {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        let err = error_body("", ErrorCode::Internal, format!("handler panicked: {e}"));
        (StatusCode::INTERNAL_SERVER_ERROR, Json(json!(err)))
    })
}

async fn handshake(State(backend): State<Shared>) -> Response {
    blocking(move || match backend.handshake() {
        Ok(h) => (StatusCode::OK, Json(json!(h))),
        Err(e) => error_response("", &e),
    })
    .await
}

async fn edit(State(backend): State<Shared>, body: String) -> Response {
    let req: EditRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    blocking(move || single(do_edit(backend.as_ref(), &req))).await
}

async fn classify(State(backend): State<Shared>, body: String) -> Response {
    let req: ClassifyRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    blocking(move || single(do_classify(backend.as_ref(), &req))).await
}

async fn edit_batch(State(backend): State<Shared>, body: String) -> Response {
    let reqs: Vec<EditRequest> = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    blocking(move || {
        let out: Vec<_> = reqs.iter().map(|r| do_edit(backend.as_ref(), r)).collect();
        (StatusCode::OK, Json(json!(out)))
    })
    .await
}

async fn classify_batch(State(backend): State<Shared>, body: String) -> Response {
    let reqs: Vec<ClassifyRequest> = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    blocking(move || {
        let out: Vec<_> = reqs.iter().map(|r| do_classify(backend.as_ref(), r)).collect();
        (StatusCode::OK, Json(json!(out)))
    })
    .await
}

pub fn router(backend: Shared) -> Router {
    Router::new()
        .route(HANDSHAKE_PATH, post(handshake))
        .route(EDIT_PATH, post(edit))
        .route(CLASSIFY_PATH, post(classify))
        .route(EDIT_BATCH_PATH, post(edit_batch))
        .route(CLASSIFY_BATCH_PATH, post(classify_batch))
        .with_state(backend)
}

/// A server running on a background thread. Dropping it shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits.
    pub fn wait(mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            std::mem::forget(tx);
        }
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| io::Error::other("server thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on a background
/// thread with its own runtime.
pub fn serve(backend: Shared, addr: SocketAddr) -> io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name("diffex-serve".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router(backend))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    })?;
    Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}
