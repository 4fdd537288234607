//! HTTP front end of the MUSHRA store.
//!
//! Ratings go through a write lock, so journal appends are serialized;
//! everything else reads under a shared lock.

use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bwe_core::mushra::{AggregateResult, MushraError, MushraStore, ScoreSubmission, TrialView};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub type SharedStore = Arc<RwLock<MushraStore>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub test_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub test_id: String,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresAccepted {
    pub session_id: String,
    pub index: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestList {
    pub tests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub struct ApiError(MushraError);

impl From<MushraError> for ApiError {
    fn from(e: MushraError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            e if e.is_not_found() => StatusCode::NOT_FOUND,
            MushraError::TrialOutOfRange { .. } => StatusCode::NOT_FOUND,
            MushraError::AlreadyRated(_) => StatusCode::CONFLICT,
            e if e.is_client_error() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{}", self.0);
        }
        (status, Json(ErrorBody { error: self.0.to_string() })).into_response()
    }
}

fn poisoned() -> ApiError {
    ApiError(MushraError::Validation("store lock poisoned".into()))
}

pub fn router(store: MushraStore, static_dir: Option<&Path>) -> Router {
    let state: SharedStore = Arc::new(RwLock::new(store));
    let api = Router::new()
        .route("/api/tests", get(list_tests))
        .route("/api/session", post(create_session))
        .route("/api/session/{sid}/trial/{index}", get(get_trial))
        .route("/api/session/{sid}/trial/{index}/scores", post(submit_scores))
        .route("/api/test/{tid}/aggregate", get(aggregate))
        .route("/audio/{token}", get(audio))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn list_tests(State(store): State<SharedStore>) -> Result<Json<TestList>, ApiError> {
    let store = store.read().map_err(|_| poisoned())?;
    let mut tests: Vec<String> = store.tests().map(|t| t.test_id.clone()).collect();
    tests.sort();
    Ok(Json(TestList { tests }))
}

async fn create_session(
    State(store): State<SharedStore>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let mut store = store.write().map_err(|_| poisoned())?;
    let session = store.create_session(&req.test_id, &mut rand::rng())?;
    let trials = store.test(&req.test_id)?.trials.len();
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: session.session_id,
            test_id: session.test_id,
            trials,
        }),
    ))
}

async fn get_trial(
    State(store): State<SharedStore>,
    UrlPath((sid, index)): UrlPath<(String, usize)>,
) -> Result<Json<TrialView>, ApiError> {
    let store = store.read().map_err(|_| poisoned())?;
    Ok(Json(store.get_trial(&sid, index)?))
}

async fn submit_scores(
    State(store): State<SharedStore>,
    UrlPath((sid, index)): UrlPath<(String, usize)>,
    Json(sub): Json<ScoreSubmission>,
) -> Result<Json<ScoresAccepted>, ApiError> {
    let mut store = store.write().map_err(|_| poisoned())?;
    store.submit_scores(&sid, index, &sub)?;
    Ok(Json(ScoresAccepted {
        session_id: sid,
        index,
        accepted: true,
    }))
}

async fn aggregate(
    State(store): State<SharedStore>,
    UrlPath(tid): UrlPath<String>,
) -> Result<Json<AggregateResult>, ApiError> {
    let store = store.read().map_err(|_| poisoned())?;
    Ok(Json(store.aggregate(&tid)?))
}

async fn audio(State(store): State<SharedStore>, UrlPath(token): UrlPath<String>) -> Result<Response, ApiError> {
    let path = {
        let store = store.read().map_err(|_| poisoned())?;
        store.token_path(&token)?.to_path_buf()
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "audio/wav"), (header::CACHE_CONTROL, "no-store")], bytes).into_response()),
        Err(e) => {
            log::error!("{}: {e}", path.display());
            Err(ApiError(MushraError::UnknownToken(token)))
        }
    }
}
