//! Serve a [`Backends`] set over HTTP.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use qarsmith_core::backend::*;
use tokio::sync::oneshot;

struct ApiError(BackendError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = match &self.0 {
            BackendError::Invalid(_) => StatusCode::BAD_REQUEST,
            BackendError::Status { code, .. } => {
                StatusCode::from_u16(*code).unwrap_or(StatusCode::BAD_GATEWAY)
            }
            _ => StatusCode::BAD_GATEWAY,
        };
        (code, self.0.to_string()).into_response()
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, BackendError> + Send + 'static,
) -> Result<Json<T>, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError),
        Err(e) => Err(ApiError(BackendError::Transport(e.to_string()))),
    }
}

async fn embed(State(b): State<Arc<Backends>>, Json(req): Json<EmbedRequest>) -> Result<Json<EmbedResponse>, ApiError> {
    blocking(move || b.embed.embed(&req)).await
}

async fn chat(State(b): State<Arc<Backends>>, Json(req): Json<ChatRequest>) -> Result<Json<ChatResponse>, ApiError> {
    blocking(move || b.chat.chat(&req)).await
}

async fn caption(State(b): State<Arc<Backends>>, Json(req): Json<CaptionRequest>) -> Result<Json<CaptionResponse>, ApiError> {
    blocking(move || b.caption.caption(&req)).await
}

async fn vqa(State(b): State<Arc<Backends>>, Json(req): Json<VqaRequest>) -> Result<Json<VqaResponse>, ApiError> {
    blocking(move || b.vqa.vqa(&req)).await
}

async fn score(State(b): State<Arc<Backends>>, Json(req): Json<ScoreRequest>) -> Result<Json<ScoreResponse>, ApiError> {
    blocking(move || match &b.score {
        Some(s) => s.score(&req),
        None => Err(BackendError::Status {
            code: 404,
            body: "no scorer configured".into(),
        }),
    })
    .await
}

pub fn router(backends: Backends) -> Router {
    Router::new()
        .route("/v1/embed", post(embed))
        .route("/v1/chat", post(chat))
        .route("/v1/caption", post(caption))
        .route("/v1/vqa", post(vqa))
        .route("/v1/score", post(score))
        .with_state(Arc::new(backends))
}

/// A server running on its own thread; dropped handles shut it down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Bind `addr` (port 0 picks a free port) and serve `app` until stopped.
pub fn serve_in_background(app: Router, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
