use std::path::Path;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("not a decodable image: {0}")]
    BadImage(String),
    #[error("service not ready: {0}")]
    NotReady(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        ServiceError::Internal(format!("{}: {e}", path.display()))
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Validation(_) => "validation_error",
            ServiceError::BadImage(_) => "bad_image",
            ServiceError::NotReady(_) => "not_ready",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::BadImage(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotReady(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Body of every error response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

impl From<idc_core::model::ModelError> for ServiceError {
    fn from(e: idc_core::model::ModelError) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

impl From<idc_core::model::CheckpointError> for ServiceError {
    fn from(e: idc_core::model::CheckpointError) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

impl From<idc_core::data::DataError> for ServiceError {
    fn from(e: idc_core::data::DataError) -> Self {
        ServiceError::Internal(e.to_string())
    }
}
