//! HTTP+JSON routes. Every error is returned as `{"code": ..., "message": ...}`.

use std::path::PathBuf;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::services::{ServeDir, ServeFile};

use crate::error::ServiceError;
use crate::protocol::{ProtocolConfig, ValidationReport};
use crate::reviews::{ReviewRecord, Verdict};
use crate::service::{HitlService, ModelInfo, RetrainJob, ReviewPage};

const MAX_UPLOAD: usize = 8 * 1024 * 1024;

pub fn router(service: HitlService, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/predict", post(predict))
        .route("/api/reviews", get(list_reviews))
        .route("/api/reviews/{id}", get(get_review))
        .route("/api/reviews/{id}/feedback", post(feedback))
        .route("/api/retrain", post(retrain).get(list_jobs))
        .route("/api/retrain/{job_id}", get(get_job))
        .route("/api/model", get(model))
        .route("/api/experiments/validation", post(validation))
        .fallback(api_not_found)
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(service);
    match ui_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            api.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => api,
    }
}

async fn api_not_found() -> ServiceError {
    ServiceError::NotFound("no such endpoint".into())
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn predict(State(svc): State<HitlService>, mut form: Multipart) -> Result<Json<ReviewRecord>, ServiceError> {
    let mut bytes = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ServiceError::Validation(format!("malformed multipart body: {e}")))?
    {
        let is_file = field.name() == Some("image") || field.file_name().is_some();
        if is_file {
            let data = field
                .bytes()
                .await
                .map_err(|e| ServiceError::Validation(format!("reading upload: {e}")))?;
            bytes = Some(data);
            break;
        }
    }
    let bytes = bytes.ok_or_else(|| ServiceError::Validation("multipart field \"image\" is missing".into()))?;
    let record = blocking(move || svc.predict_image(&bytes)).await?;
    Ok(Json(record))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackBody {
    verdict: Verdict,
    #[serde(default)]
    corrected_label: Option<u8>,
}

async fn feedback(
    State(svc): State<HitlService>,
    Path(id): Path<String>,
    body: Result<Json<FeedbackBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<ReviewRecord>, ServiceError> {
    let Json(body) = body.map_err(|e| ServiceError::Validation(e.body_text()))?;
    Ok(Json(svc.record_feedback(&id, body.verdict, body.corrected_label)?))
}

async fn get_review(State(svc): State<HitlService>, Path(id): Path<String>) -> Result<Json<ReviewRecord>, ServiceError> {
    Ok(Json(svc.review(&id)?))
}

#[derive(Debug, Deserialize)]
struct ReviewQuery {
    status: Option<String>,
    page: Option<usize>,
    per_page: Option<usize>,
}

async fn list_reviews(
    State(svc): State<HitlService>,
    Query(q): Query<ReviewQuery>,
) -> Result<Json<ReviewPage>, ServiceError> {
    let status = q.status.as_deref().filter(|s| !s.is_empty()).map(str::parse).transpose()?;
    Ok(Json(svc.list_reviews(status, q.page.unwrap_or(1), q.per_page.unwrap_or(50))))
}

async fn retrain(State(svc): State<HitlService>) -> Result<(StatusCode, Json<RetrainJob>), ServiceError> {
    Ok((StatusCode::ACCEPTED, Json(svc.trigger_retrain()?)))
}

async fn list_jobs(State(svc): State<HitlService>) -> Json<Vec<RetrainJob>> {
    Json(svc.jobs())
}

async fn get_job(State(svc): State<HitlService>, Path(id): Path<String>) -> Result<Json<RetrainJob>, ServiceError> {
    Ok(Json(svc.job(&id)?))
}

async fn model(State(svc): State<HitlService>) -> Result<Json<ModelInfo>, ServiceError> {
    Ok(Json(svc.model_info()?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValidationBody {
    groups: Option<usize>,
    n_fp: Option<usize>,
    n_fn: Option<usize>,
    seed: Option<u64>,
}

async fn validation(
    State(svc): State<HitlService>,
    body: Result<Json<ValidationBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<ValidationReport>, ServiceError> {
    let Json(body) = body.map_err(|e| ServiceError::Validation(e.body_text()))?;
    let defaults = ProtocolConfig {
        training: svc.config().retrain.clone(),
        warm_start: svc.config().warm_start,
        duplication: svc.config().duplication,
        ..ProtocolConfig::default()
    };
    let cfg = ProtocolConfig {
        groups: body.groups.unwrap_or(defaults.groups),
        n_fp: body.n_fp.unwrap_or(defaults.n_fp),
        n_fn: body.n_fn.unwrap_or(defaults.n_fn),
        seed: body.seed.unwrap_or(defaults.seed),
        ..defaults
    };
    let report = blocking(move || svc.run_validation(&cfg)).await?;
    Ok(Json(report))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    service: HitlService,
    ui_dir: Option<PathBuf>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service, ui_dir)).with_graceful_shutdown(shutdown).await
}
