use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use guidecot::Error as CoreError;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid configuration field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("no model is loaded")]
    Unavailable,
    #[error("{0}")]
    NotFound(String),
    #[error("invalid `{field}`: {msg}")]
    Validation { field: String, msg: String },
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("run log: {0}")]
    RunLog(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn config(field: &str, msg: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Validation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Core(e) => match e {
                CoreError::Parameter { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                CoreError::Reference(_) | CoreError::Input(_) | CoreError::DegenerateHeading => StatusCode::BAD_REQUEST,
                CoreError::Checkpoint { .. } => StatusCode::BAD_REQUEST,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// Offending request field, when there is one.
    pub fn field(&self) -> Option<String> {
        match self {
            Self::Validation { field, .. } | Self::Config { field, .. } => Some(field.clone()),
            Self::Core(CoreError::Parameter { name, .. }) => Some(name.to_string()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.to_string(),
            field: self.field(),
        };
        (self.status(), Json(body)).into_response()
    }
}
