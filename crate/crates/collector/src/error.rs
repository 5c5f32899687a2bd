use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

pub type Result<T, E = CollectorError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CollectorError {
    #[error("registration requires consent to collection, use and publication")]
    ConsentRequired,
    #[error("missing or invalid session token")]
    Unauthorized,
    #[error("missing or invalid admin token")]
    AdminRequired,
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error(transparent)]
    Core(#[from] oddity_core::Error),
}

/// Error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl CollectorError {
    pub fn status(&self) -> StatusCode {
        match self {
            CollectorError::ConsentRequired | CollectorError::AdminRequired | CollectorError::Forbidden(_) => {
                StatusCode::FORBIDDEN
            }
            CollectorError::Unauthorized => StatusCode::UNAUTHORIZED,
            CollectorError::NotFound(_) => StatusCode::NOT_FOUND,
            CollectorError::Conflict(_) => StatusCode::CONFLICT,
            CollectorError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            CollectorError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
            CollectorError::Core(oddity_core::Error::Io { .. }) => StatusCode::INTERNAL_SERVER_ERROR,
            CollectorError::Core(_) => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CollectorError::ConsentRequired => "consent_required",
            CollectorError::Unauthorized => "unauthorized",
            CollectorError::AdminRequired => "admin_required",
            CollectorError::NotFound(_) => "not_found",
            CollectorError::Forbidden(_) => "forbidden",
            CollectorError::Conflict(_) => "conflict",
            CollectorError::Invalid(_) => "invalid",
            CollectorError::Storage(_) => "storage",
            CollectorError::Core(oddity_core::Error::Io { .. }) => "storage",
            CollectorError::Core(_) => "invalid",
        }
    }

    pub(crate) fn storage(e: impl std::fmt::Display) -> Self {
        CollectorError::Storage(e.to_string())
    }
}

impl IntoResponse for CollectorError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code().to_string(), message: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}
