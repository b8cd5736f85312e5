use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;

use super::{ChatService, SessionOptions};
use crate::decoding::{DecodeMode, DecodeSettings};
use crate::error::Error;
use crate::transformer::TransformerConfig;

struct ApiError(StatusCode, serde_json::Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Input(_) | Error::Persona(_) | Error::Config(_) | Error::Length(_) => {
                StatusCode::BAD_REQUEST
            }
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            _ => {
                let id = uuid::Uuid::new_v4().to_string();
                tracing::error!(error_id = %id, "request failed: {e}");
                return ApiError(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    json!({ "error": "internal error", "id": id }),
                );
            }
        };
        ApiError(status, json!({ "error": e.to_string() }))
    }
}

fn bad_request(msg: String) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, json!({ "error": msg }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    model: String,
    speaker: Option<String>,
    addressee: Option<String>,
    mode: Option<DecodeMode>,
    beam: Option<usize>,
    max_len: Option<usize>,
    seed: Option<u64>,
    mmi: Option<f64>,
    length_normalize: Option<bool>,
    history: Option<usize>,
}

#[derive(Debug, Serialize)]
struct SessionCreated {
    session_id: String,
}

#[derive(Debug, Deserialize)]
struct ChatRequest {
    session_id: String,
    utterance: String,
}

#[derive(Debug, Deserialize)]
struct PersonaQuery {
    model: String,
}

#[derive(Debug, Serialize)]
struct ModelInfo {
    id: String,
    vocab_size: usize,
    config: TransformerConfig,
}

async fn create_session(
    State(service): State<Arc<ChatService>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Json<SessionCreated>, ApiError> {
    let Json(req) = body.map_err(|e| bad_request(e.body_text()))?;
    let defaults = DecodeSettings::default();
    let settings = DecodeSettings {
        mode: req.mode.unwrap_or(defaults.mode),
        beam_width: req.beam.unwrap_or(defaults.beam_width),
        max_len: req.max_len.unwrap_or(defaults.max_len),
        seed: req.seed.unwrap_or(defaults.seed),
        mmi_lambda: req.mmi,
        length_normalize: req.length_normalize.unwrap_or(defaults.length_normalize),
    };
    let options = SessionOptions {
        speaker: req.speaker,
        addressee: req.addressee,
        settings,
        history_window: req.history.unwrap_or(0),
    };
    let session_id = service.create_session(&req.model, options)?;
    Ok(Json(SessionCreated { session_id }))
}

async fn chat(
    State(service): State<Arc<ChatService>>,
    body: Result<Json<ChatRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| bad_request(e.body_text()))?;
    let reply = service.chat(&req.session_id, req.utterance).await?;
    Ok(Json(reply).into_response())
}

async fn personas(
    State(service): State<Arc<ChatService>>,
    query: Result<Query<PersonaQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| bad_request(e.body_text()))?;
    Ok(Json(json!({ "tokens": service.personas(&q.model)? })).into_response())
}

async fn models(State(service): State<Arc<ChatService>>) -> Response {
    let models: Vec<ModelInfo> = service
        .models()
        .map(|m| ModelInfo {
            id: m.id.clone(),
            vocab_size: m.vocab.len(),
            config: m.config().clone(),
        })
        .collect();
    Json(json!({ "models": models })).into_response()
}

/// `POST /sessions`, `POST /chat`, `GET /personas?model=` and `GET /models`,
/// with permissive CORS for browser clients.
pub fn router(service: Arc<ChatService>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/chat", post(chat))
        .route("/personas", get(personas))
        .route("/models", get(models))
        .layer(CorsLayer::permissive())
        .with_state(service)
}

pub async fn serve(listener: TcpListener, service: Arc<ChatService>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}
