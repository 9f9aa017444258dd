//! HTTP+JSON routes and the server-sent event stream.
//!
//! | route                      | success                      |
//! |----------------------------|------------------------------|
//! | `POST /jobs`               | 201 `{"id", "status"}`       |
//! | `GET /jobs/{id}`           | 200 job document             |
//! | `GET /jobs/{id}/events`    | 200 `text/event-stream`      |
//! | `POST /jobs/{id}/select`   | 202 `{"id", "status"}`       |
//! | `GET /artifacts/{id}`      | 200 `image/png`              |
//! | `GET /vocab`               | 200 vocabulary document      |
//!
//! Errors are JSON `{"error": message}`; validation failures (422) add
//! `"fields": [{"field", "message"}, ..]`. Event streams resume after the
//! `Last-Event-ID` header or the `after` query parameter.

use std::convert::Infallible;
use std::future::Future;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::StreamExt;
use maskguide::jobspec::JobSpec;
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::error::ServiceError;
use crate::service::{SelectRequest, Service};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/jobs", post(submit))
        .route("/jobs/{id}", get(job))
        .route("/jobs/{id}/events", get(events))
        .route("/jobs/{id}/select", post(select))
        .route("/artifacts/{id}", get(artifact))
        .route("/vocab", get(vocab))
        .with_state(service)
}

/// Serves until `shutdown` resolves, then closes open event streams and drains connections.
pub async fn serve(
    listener: TcpListener,
    service: Service,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let closer = service.clone();
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async move {
            shutdown.await;
            closer.close();
        })
        .await
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, body) = match &self {
            ServiceError::NotFound { .. } => (StatusCode::NOT_FOUND, json!({ "error": self.to_string() })),
            ServiceError::Validation(errs) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": "invalid job spec", "fields": errs.errors }),
            ),
            ServiceError::Conflict { .. } => (StatusCode::CONFLICT, json!({ "error": self.to_string() })),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": self.to_string() })),
        };
        (status, Json(body)).into_response()
    }
}

fn bad_body(rejection: JsonRejection) -> Response {
    let status = match rejection {
        JsonRejection::JsonDataError(_) => StatusCode::UNPROCESSABLE_ENTITY,
        JsonRejection::MissingJsonContentType(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
        _ => StatusCode::BAD_REQUEST,
    };
    let message = rejection.body_text();
    let body = if status == StatusCode::UNPROCESSABLE_ENTITY {
        json!({ "error": "invalid job spec", "fields": [{ "field": "body", "message": message }] })
    } else {
        json!({ "error": message })
    };
    (status, Json(body)).into_response()
}

async fn submit(State(service): State<Service>, body: Result<Json<JobSpec>, JsonRejection>) -> Response {
    let spec = match body {
        Ok(Json(spec)) => spec,
        Err(rejection) => return bad_body(rejection),
    };
    match service.submit(spec) {
        Ok(submitted) => (StatusCode::CREATED, Json(submitted)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn job(State(service): State<Service>, Path(id): Path<String>) -> Response {
    match service.job(&id) {
        Ok(view) => Json(view).into_response(),
        Err(e) => e.into_response(),
    }
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

async fn events(
    State(service): State<Service>,
    Path(id): Path<String>,
    Query(query): Query<EventsQuery>,
    headers: HeaderMap,
) -> Response {
    let last_event_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let after = last_event_id.or(query.after).unwrap_or(0);
    match service.events(&id, after) {
        Ok(stream) => {
            let stream = stream.map(|event| {
                Ok::<_, Infallible>(
                    Event::default()
                        .id(event.seq.to_string())
                        .event(event.kind.name())
                        .json_data(&event)
                        .expect("events serialize"),
                )
            });
            Sse::new(stream).keep_alive(KeepAlive::default()).into_response()
        }
        Err(e) => e.into_response(),
    }
}

async fn select(
    State(service): State<Service>,
    Path(id): Path<String>,
    body: Result<Json<SelectRequest>, JsonRejection>,
) -> Response {
    let request = match body {
        Ok(Json(r)) => r,
        Err(rejection) => return bad_body(rejection),
    };
    match service.select(&id, request) {
        Ok(accepted) => (StatusCode::ACCEPTED, Json(accepted)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn artifact(State(service): State<Service>, Path(id): Path<String>) -> Response {
    match service.artifact(&id) {
        Ok(bytes) => {
            let content_type = if bytes.starts_with(PNG_MAGIC) {
                "image/png"
            } else {
                "application/octet-stream"
            };
            (
                [
                    (header::CONTENT_TYPE, content_type),
                    (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
                ],
                bytes,
            )
                .into_response()
        }
        Err(e) => e.into_response(),
    }
}

async fn vocab(State(service): State<Service>) -> Response {
    Json(service.vocab()).into_response()
}
