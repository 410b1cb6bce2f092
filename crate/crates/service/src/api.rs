use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::{Mode, Service, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match self.kind() {
            "not_found" | "out_of_range" => StatusCode::NOT_FOUND,
            "bad_request" => StatusCode::BAD_REQUEST,
            "conflict" => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{self}");
        }
        (status, Json(json!({ "error": self.kind(), "message": self.to_string() }))).into_response()
    }
}

type Shared = State<Arc<Service>>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    grader: String,
    mode: Mode,
    source: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsBody {
    labels: Vec<String>,
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    ids: String,
}

/// Session work takes locks and may run inference, so it leaves the
/// async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ServiceError::Corrupt(format!("worker failed: {e}"))))
}

async fn create(State(svc): Shared, Json(b): Json<CreateBody>) -> Result<impl IntoResponse, ServiceError> {
    let s = blocking(move || svc.create_session(&b.grader, b.mode, &b.source)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn summary(State(svc): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(move || svc.summary(&id)).await?))
}

async fn item(State(svc): Shared, Path((id, i)): Path<(String, usize)>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(move || svc.get_item(&id, i)).await?))
}

async fn submit(
    State(svc): Shared,
    Path((id, i)): Path<(String, usize)>,
    Json(b): Json<LabelsBody>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(move || svc.submit(&id, i, b.labels)).await?))
}

async fn export(State(svc): Shared, Query(q): Query<ExportQuery>) -> Result<impl IntoResponse, ServiceError> {
    let ids: Vec<String> = q.ids.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
    Ok(Json(blocking(move || svc.export(&ids)).await?))
}

async fn sources(State(svc): Shared) -> impl IntoResponse {
    Json(svc.sources())
}

/// HTTP routes. `origin` restricts CORS to the grading UI; `None` allows any.
pub fn router(svc: Arc<Service>, origin: Option<&str>) -> Router {
    let allow = match origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Router::new()
        .route("/sources", get(sources))
        .route("/sessions", post(create))
        .route("/sessions/:id", get(summary))
        .route("/sessions/:id/items/:i", get(item))
        .route("/sessions/:id/items/:i/labels", post(submit))
        .route("/export", get(export))
        .layer(cors)
        .with_state(svc)
}

/// Serve until ctrl-c.
pub async fn serve(listener: TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
