//! JSON API over [`AnnotationService`].
//!
//! Bodies are decoded by hand so that malformed requests still get a
//! `schema_version`-tagged error object.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::service::{AnnotationService, ServiceError, RENDERS_DIR};
use crate::task::{PairwiseItem, Rating, TaskKind, Vote};
use crate::SCHEMA_VERSION;

type Shared = Arc<AnnotationService>;

fn reply(status: StatusCode, mut body: Value) -> Response {
    if let Value::Object(m) = &mut body {
        m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    }
    (status, Json(body)).into_response()
}

fn ok(body: Value) -> Response {
    reply(StatusCode::OK, body)
}

fn fail(status: StatusCode, code: &str, message: impl ToString) -> Response {
    reply(status, json!({"error": code, "message": message.to_string()}))
}

fn service_error(e: ServiceError) -> Response {
    let (status, code) = match &e {
        ServiceError::MissingRenders(_) => (StatusCode::UNPROCESSABLE_ENTITY, "missing_renders"),
        ServiceError::UnknownInstances(_) => (StatusCode::NOT_FOUND, "unknown_instances"),
        ServiceError::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
        ServiceError::TaskClosed(_) => (StatusCode::CONFLICT, "task_closed"),
        ServiceError::DuplicateAnnotator { .. } => (StatusCode::CONFLICT, "duplicate_annotator"),
        ServiceError::WrongKind { .. } => (StatusCode::BAD_REQUEST, "wrong_kind"),
        ServiceError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "violation"),
        ServiceError::NothingComplete => (StatusCode::CONFLICT, "nothing_complete"),
        ServiceError::Vote(_) => (StatusCode::CONFLICT, "vote_count"),
        ServiceError::Store(_) | ServiceError::Aggregate(_) | ServiceError::Inconsistent(_) => {
            (StatusCode::INTERNAL_SERVER_ERROR, "internal")
        }
    };
    let mut body = json!({"error": code, "message": e.to_string()});
    if let ServiceError::MissingRenders(ids) | ServiceError::UnknownInstances(ids) = &e {
        body["instance_ids"] = json!(ids);
    }
    reply(status, body)
}

fn decode<T: DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| fail(StatusCode::BAD_REQUEST, "bad_request", e))
}

fn default_stage() -> String {
    "candidates".into()
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CreateTasksRequest {
    Rating {
        #[serde(default = "default_stage")]
        stage: String,
        #[serde(default)]
        instance_ids: Option<Vec<String>>,
    },
    Pairwise {
        items: Vec<PairwiseItem>,
    },
}

async fn next_task(State(svc): State<Shared>, Query(q): Query<HashMap<String, String>>) -> Response {
    let Some(kind) = q.get("kind").and_then(|k| TaskKind::parse(k)) else {
        return fail(StatusCode::BAD_REQUEST, "bad_request", "kind must be rating or pairwise");
    };
    let Some(annotator) = q.get("annotator").filter(|a| !a.is_empty()) else {
        return fail(StatusCode::BAD_REQUEST, "bad_request", "annotator is required");
    };
    ok(json!({"task": svc.next_task(kind, annotator)}))
}

async fn get_task(State(svc): State<Shared>, Path(id): Path<String>) -> Response {
    match svc.task(&id) {
        Some(t) => ok(json!({"task": t})),
        None => service_error(ServiceError::UnknownTask(id)),
    }
}

async fn post_rating(State(svc): State<Shared>, body: Bytes) -> Response {
    let rating: Rating = match decode(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let task_id = rating.task_id.clone();
    match svc.submit_rating(rating) {
        Ok(state) => ok(json!({"status": "accepted", "task_id": task_id, "state": state})),
        Err(e) => service_error(e),
    }
}

async fn post_vote(State(svc): State<Shared>, body: Bytes) -> Response {
    let vote: Vote = match decode(&body) {
        Ok(v) => v,
        Err(resp) => return resp,
    };
    let task_id = vote.task_id.clone();
    match svc.submit_vote(vote) {
        Ok(state) => ok(json!({"status": "accepted", "task_id": task_id, "state": state})),
        Err(e) => service_error(e),
    }
}

async fn create_tasks(State(svc): State<Shared>, body: Bytes) -> Response {
    let req: CreateTasksRequest = match decode(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let result = match req {
        CreateTasksRequest::Rating { stage, instance_ids } => {
            svc.create_rating_tasks_from_stage(&stage, instance_ids.as_deref())
        }
        CreateTasksRequest::Pairwise { items } => svc.create_pairwise_tasks(&items),
    };
    match result {
        Ok(ids) => ok(json!({"task_ids": ids})),
        Err(e) => service_error(e),
    }
}

async fn export(State(svc): State<Shared>) -> Response {
    match svc.export_labels() {
        Ok(summary) => ok(serde_json::to_value(summary).expect("summary serializes")),
        Err(e) => service_error(e),
    }
}

async fn status(State(svc): State<Shared>) -> Response {
    ok(serde_json::to_value(svc.counts()).expect("counts serialize"))
}

fn safe_file_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

async fn render(State(svc): State<Shared>, Path(name): Path<String>) -> Response {
    if !safe_file_name(&name) {
        return fail(StatusCode::BAD_REQUEST, "bad_request", "invalid file name");
    }
    match std::fs::read(svc.renders_dir().join(&name)) {
        Ok(bytes) => {
            let mime = if name.ends_with(".png") {
                "image/png"
            } else if name.ends_with(".jpg") || name.ends_with(".jpeg") {
                "image/jpeg"
            } else {
                "application/octet-stream"
            };
            ([(header::CONTENT_TYPE, mime)], bytes).into_response()
        }
        Err(_) => fail(StatusCode::NOT_FOUND, "not_found", format!("no render {name}")),
    }
}

async fn not_found() -> Response {
    fail(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/tasks/next", get(next_task))
        .route("/tasks/{id}", get(get_task))
        .route("/ratings", post(post_rating))
        .route("/votes", post(post_vote))
        .route("/admin/create_tasks", post(create_tasks))
        .route("/admin/export", get(export))
        .route("/admin/status", get(status))
        .route(&format!("/{RENDERS_DIR}/{{file}}"), get(render))
        .fallback(not_found)
        .with_state(service)
}
