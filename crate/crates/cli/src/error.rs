use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),

    #[error("{0}")]
    Invalid(String),

    #[error("a generation is already running for session {0}")]
    Busy(String),

    #[error("storage failure: {0}")]
    Storage(String),

    #[error("corrupt session log: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Core(#[from] stemflow::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Busy(_) => StatusCode::CONFLICT,
            ServiceError::Core(e) => match e {
                stemflow::Error::Shape(_)
                | stemflow::Error::Vocabulary(_)
                | stemflow::Error::InvalidArgument(_)
                | stemflow::Error::InvalidComposition(_)
                | stemflow::Error::SilentMix => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ServiceError::Storage(_) | ServiceError::Corrupt(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}
