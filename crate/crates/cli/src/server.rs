//! HTTP face of the annotation hub: pending-request polling, response
//! submission, run status, and the static annotation UI.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use refinery_core::annotation::{AnnotationHub, AnnotationResponse};
use refinery_core::orchestrator::{Controller, StatusSnapshot};
use refinery_core::Error;
use serde::Serialize;
use tower_http::services::ServeDir;

#[derive(Clone)]
pub struct ServiceContext {
    pub hub: Arc<AnnotationHub>,
    pub controller: Arc<Controller>,
    /// Built UI assets; a placeholder page is served without them.
    pub ui_dir: Option<PathBuf>,
}

impl ServiceContext {
    pub fn new(hub: Arc<AnnotationHub>, controller: Arc<Controller>) -> Self {
        Self {
            hub,
            controller,
            ui_dir: None,
        }
    }
}

#[derive(Serialize)]
struct StatusBody {
    #[serde(flatten)]
    snapshot: StatusSnapshot,
    pending: Option<u64>,
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

fn error_response(status: StatusCode, e: &Error) -> Response {
    let body = ErrorBody {
        error: e.kind(),
        message: e.to_string(),
    };
    (status, Json(body)).into_response()
}

async fn pending(State(ctx): State<ServiceContext>) -> Response {
    match ctx.hub.pending() {
        Some(req) => Json(req).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn annotations(State(ctx): State<ServiceContext>, body: Bytes) -> Response {
    let resp: AnnotationResponse = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, &Error::Json(e)),
    };
    let request_id = resp.request_id;
    match ctx.hub.submit(resp) {
        Ok(()) => Json(serde_json::json!({ "accepted": request_id })).into_response(),
        Err(e @ Error::StaleResponse { .. }) => error_response(StatusCode::CONFLICT, &e),
        Err(e) => error_response(StatusCode::BAD_REQUEST, &e),
    }
}

async fn status(State(ctx): State<ServiceContext>) -> Json<StatusBody> {
    Json(StatusBody {
        snapshot: ctx.controller.snapshot(),
        pending: ctx.hub.pending().map(|r| r.request_id),
    })
}

const PLACEHOLDER: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>refinery annotation</title></head>
<body>
<h1>refinery annotation service</h1>
<p>No UI assets are installed. Start the service with <code>--ui-dir</code>
pointing at a built annotation UI, or talk to the JSON API directly:</p>
<ul>
<li><code>GET /api/pending</code> returns the pending request, or 204</li>
<li><code>POST /api/annotations</code> answers it</li>
<li><code>GET /api/status</code> reports progress</li>
</ul>
</body></html>
"#;

pub fn router(ctx: ServiceContext) -> Router {
    let api = Router::new()
        .route("/api/pending", get(pending))
        .route("/api/annotations", post(annotations))
        .route("/api/status", get(status))
        .route("/", get(|| async { Redirect::temporary("/ui/") }));
    let api = match &ctx.ui_dir {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir)),
        None => api
            .route("/ui", get(|| async { Html(PLACEHOLDER) }))
            .route("/ui/", get(|| async { Html(PLACEHOLDER) })),
    };
    api.with_state(ctx)
}

/// Serves until the process is interrupted.
pub async fn serve(bind: &str, ctx: ServiceContext) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .with_context(|| format!("binding {bind}"))?;
    log::info!(
        "annotation service on http://{}/ui/",
        listener.local_addr()?
    );
    axum::serve(listener, router(ctx))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// The service running on its own thread next to a blocking phase.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(bind: &str, ctx: ServiceContext) -> anyhow::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = rt
            .block_on(tokio::net::TcpListener::bind(bind))
            .with_context(|| format!("binding {bind}"))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let served = axum::serve(listener, router(ctx)).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = served.await {
                    log::error!("annotation service failed: {e}");
                }
            });
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
