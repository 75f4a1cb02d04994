//! JSON-over-HTTP routes onto the session store.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hdl_core::nav::{cell_array, cell_list, Cell};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::session::{ApiError, ErrorCode, Session};
use crate::store::{CreateSession, SessionStore};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanBody {
    #[serde(with = "cell_list")]
    scan: Vec<Cell>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MoveBody {
    #[serde(with = "cell_array")]
    cell: Cell,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimingBody {
    phase: String,
    elapsed_ms: f64,
}

#[derive(Serialize)]
struct Recorded {
    recorded: bool,
}

pub fn status_of(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::NotFound => StatusCode::NOT_FOUND,
        ErrorCode::InvalidPhase => StatusCode::CONFLICT,
        ErrorCode::InsufficientScan | ErrorCode::IllegalMove => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
        ErrorCode::MissingArtifact => StatusCode::SERVICE_UNAVAILABLE,
        ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_of(self.code), Json(self)).into_response()
    }
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(view))
        .route("/sessions/{id}/initialize", post(initialize))
        .route("/sessions/{id}/instructions", get(instructions))
        .route("/sessions/{id}/move", post(step))
        .route("/sessions/{id}/capture", post(capture))
        .route("/sessions/{id}/diagnose", post(diagnose))
        .route("/sessions/{id}/log", get(log).post(timing))
        .with_state(store)
}

/// Binds `addr`, reports the bound address, and serves until ctrl-c.
pub async fn serve(store: Arc<SessionStore>, addr: &str, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

fn parse<T: DeserializeOwned>(body: &[u8], session: Option<&Session>) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(ErrorCode::BadRequest, format!("malformed body: {e}"), session.map(Session::phase)))
}

/// Runs `f` on the locked session off the async workers.
async fn with_session<T, F>(store: Arc<SessionStore>, id: String, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
{
    let session = match store.get(&id) {
        Ok(s) => s,
        Err(e) => return e.into_response(),
    };
    let outcome = tokio::task::spawn_blocking(move || match session.lock() {
        Ok(mut guard) => f(&mut guard),
        Err(_) => Err(ApiError::new(ErrorCode::Internal, "session lock poisoned by an earlier failure", None)),
    })
    .await;
    match outcome {
        Ok(Ok(value)) => Json(value).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(ErrorCode::Internal, e.to_string(), None).into_response(),
    }
}

async fn create(State(store): State<Arc<SessionStore>>, body: Bytes) -> Response {
    let request = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSession::default()
    } else {
        match parse::<CreateSession>(&body, None) {
            Ok(r) => r,
            Err(e) => return e.into_response(),
        }
    };
    let result = tokio::task::spawn_blocking(move || store.create(request)).await;
    match result {
        Ok(Ok(view)) => Json(view).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(ErrorCode::Internal, e.to_string(), None).into_response(),
    }
}

async fn view(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Response {
    with_session(store, id, |s| Ok(s.view())).await
}

async fn initialize(State(store): State<Arc<SessionStore>>, Path(id): Path<String>, body: Bytes) -> Response {
    with_session(store, id, move |s| {
        let body: ScanBody = parse(&body, Some(s))?;
        s.initialize(&body.scan)
    })
    .await
}

async fn instructions(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Response {
    with_session(store, id, |s| s.instructions()).await
}

async fn step(State(store): State<Arc<SessionStore>>, Path(id): Path<String>, body: Bytes) -> Response {
    with_session(store, id, move |s| {
        let body: MoveBody = parse(&body, Some(s))?;
        s.move_to(body.cell)
    })
    .await
}

async fn capture(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Response {
    with_session(store, id, |s| s.capture()).await
}

async fn diagnose(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Response {
    with_session(store, id, |s| s.diagnose()).await
}

async fn log(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Response {
    with_session(store, id, |s| Ok(s.log().to_vec())).await
}

async fn timing(State(store): State<Arc<SessionStore>>, Path(id): Path<String>, body: Bytes) -> Response {
    with_session(store, id, move |s| {
        let body: TimingBody = parse(&body, Some(s))?;
        s.client_timing(body.phase, body.elapsed_ms)?;
        Ok(Recorded { recorded: true })
    })
    .await
}
