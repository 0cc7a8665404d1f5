//! Serves any [`VisionModel`] over the chat-completions wire format on a
//! loopback port.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use tokio::sync::oneshot;

use crate::backend::http::{decode_request, encode_response, wire};
use crate::backend::VisionModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerOptions {
    /// When false the server drops log-probabilities from every reply, like
    /// a hosted endpoint that does not expose them.
    pub logprobs: bool,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self { logprobs: true }
    }
}

struct AppState {
    model: Arc<dyn VisionModel>,
    opts: ServerOptions,
}

/// Stops the server when dropped.
pub struct MockServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

async fn completions(
    State(state): State<Arc<AppState>>,
    Json(req): Json<wire::ChatRequest>,
) -> Result<Json<wire::ChatResponse>, (StatusCode, String)> {
    let prompt = decode_request(&req).map_err(|e| (StatusCode::BAD_REQUEST, e.to_string()))?;
    let model = state.model.clone();
    let completion = tokio::task::spawn_blocking(move || model.complete(&prompt))
        .await
        .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok(Json(encode_response(
        &req.model,
        &completion,
        req.logprobs && state.opts.logprobs,
    )))
}

impl MockServer {
    /// Bind to `127.0.0.1:port` (0 picks a free port) and serve in a
    /// background thread.
    pub fn start(
        model: Arc<dyn VisionModel>,
        opts: ServerOptions,
        port: u16,
    ) -> std::io::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(("127.0.0.1", port)))?;
        let addr = listener.local_addr()?;
        let app = Router::new()
            .route("/v1/chat/completions", post(completions))
            .layer(axum::extract::DefaultBodyLimit::max(256 * 1024 * 1024))
            .with_state(Arc::new(AppState { model, opts }));
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server stops. It only stops once the handle is dropped
    /// from another thread or the process exits, so this is for CLI use.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
