use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use ccrs_core::jobs::JobError;
use ccrs_core::model::WireError;
use ccrs_core::sites::SiteError;
use serde_json::json;

/// Error response: `{"error": code, "message": text}` with a matching status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_failed", message)
    }

    /// Same answer whether the job is missing or owned by someone else.
    pub fn no_such_job() -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", "no such job")
    }

    pub fn payload_too_large(message: impl Into<String>) -> Self {
        Self::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": self.code, "message": self.message }));
        (self.status, body).into_response()
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        use StatusCode as S;
        match e {
            JobError::ValidationFailed(_) => Self::new(S::UNPROCESSABLE_ENTITY, "validation_failed", e.to_string()),
            JobError::QuotaExceeded => Self::new(S::TOO_MANY_REQUESTS, "quota_exceeded", e.to_string()),
            JobError::NotOwner | JobError::UnknownJob(_) => Self::no_such_job(),
            JobError::UnknownAction(_) => Self::new(S::NOT_FOUND, "unknown_action", e.to_string()),
            JobError::Busy => Self::new(S::CONFLICT, "busy", e.to_string()),
            JobError::NotSession => Self::new(S::CONFLICT, "not_session", e.to_string()),
            JobError::PathEscape(_) => Self::new(S::UNPROCESSABLE_ENTITY, "path_escape", e.to_string()),
            JobError::ContextQuotaExceeded { .. } => Self::payload_too_large(e.to_string()),
            JobError::Backend(_) => Self::new(S::SERVICE_UNAVAILABLE, "backend_unavailable", e.to_string()),
            JobError::Internal(_) => Self::internal(e.to_string()),
        }
    }
}

impl From<SiteError> for ApiError {
    fn from(e: SiteError) -> Self {
        use StatusCode as S;
        match e {
            SiteError::UnknownKey | SiteError::SiteDisabled => {
                Self::new(S::UNAUTHORIZED, "unauthorized", e.to_string())
            }
            SiteError::OriginRejected => Self::new(S::FORBIDDEN, "origin_rejected", e.to_string()),
            SiteError::BadLogin
            | SiteError::InvalidPrefix(_)
            | SiteError::InvalidSiteId(_)
            | SiteError::InvalidOrigin(_)
            | SiteError::EmptyKey => Self::validation(e.to_string()),
            SiteError::DuplicateSiteId(_) | SiteError::DuplicatePrefix(_) => {
                Self::new(S::CONFLICT, "conflict", e.to_string())
            }
            SiteError::UnknownSite(_) => Self::new(S::NOT_FOUND, "not_found", e.to_string()),
            SiteError::Persist(_) => Self::internal(e.to_string()),
        }
    }
}

impl From<WireError> for ApiError {
    fn from(e: WireError) -> Self {
        Self::validation(format!("meta: {e}"))
    }
}
