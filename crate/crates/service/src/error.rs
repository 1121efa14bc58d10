use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use triplane_edit::Error;

/// Machine-readable error body: `{"error": {"code": ..., "message": ...}}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn no_selection() -> Self {
        Self::conflict("no_selection", "make a selection first (POST /select)")
    }
}

/// Status and code for a core error.
pub fn classify(e: &Error) -> (StatusCode, &'static str) {
    let unprocessable = StatusCode::UNPROCESSABLE_ENTITY;
    match e {
        Error::StaleProvenance { .. } => (StatusCode::GONE, "stale_provenance"),
        Error::Context(_) => (StatusCode::CONFLICT, "context_state"),
        Error::Cancelled { .. } => (StatusCode::CONFLICT, "cancelled"),
        Error::Diverged { .. } | Error::NonFiniteGradient(_) => (StatusCode::INTERNAL_SERVER_ERROR, "numerical_failure"),
        Error::Io(_) | Error::MissingFile(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
        Error::Empty(_) => (unprocessable, "empty_input"),
        Error::DimMismatch { .. } => (unprocessable, "dimension_mismatch"),
        Error::Corrupt { .. } | Error::Image(_) => (unprocessable, "corrupt_payload"),
        Error::TokenTooLarge { .. } => (unprocessable, "token_too_large"),
        Error::NonFinite(_)
        | Error::OutOfBounds { .. }
        | Error::PixelOutOfRange { .. }
        | Error::InvalidCamera(_)
        | Error::InvalidRange { .. }
        | Error::Config(_)
        | Error::Manifest { .. } => (unprocessable, "invalid_request"),
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = classify(&e);
        Self::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        #[derive(Serialize)]
        struct Envelope {
            error: ErrorBody,
        }
        (self.status, Json(Envelope { error: self.body })).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
