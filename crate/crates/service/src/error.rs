use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use causal_voxel::Error as CoreError;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug, Clone, Serialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub details: Value,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>, details: Value) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
                details,
            },
        }
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message, Value::Null)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("unknown {what} `{id}`"),
            json!({ "id": id }),
        )
    }

    pub fn model_not_loaded() -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model_not_loaded",
            "no model bundle is loaded",
            Value::Null,
        )
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message, Value::Null)
    }

    /// Maps a library error raised while handling `code`-type input.
    pub fn from_core(code: &str, e: CoreError) -> Self {
        let message = e.to_string();
        match e {
            CoreError::OutOfBounds {
                name,
                value,
                lower,
                upper,
            } => Self::new(
                StatusCode::BAD_REQUEST,
                code,
                message,
                json!({ "variable": name, "value": value, "lower": lower, "upper": upper }),
            ),
            CoreError::UnknownVariable(name) => {
                Self::new(StatusCode::BAD_REQUEST, code, message, json!({ "variable": name }))
            }
            CoreError::NonFinite { .. } => Self::new(StatusCode::BAD_REQUEST, code, message, Value::Null),
            CoreError::MissingDemographics(missing) => Self::new(
                StatusCode::BAD_REQUEST,
                "invalid_demographics",
                message,
                json!({ "missing": missing }),
            ),
            CoreError::BadMagic(_)
            | CoreError::UnsupportedDatatype(_)
            | CoreError::Truncated { .. }
            | CoreError::BadHeader(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_volume", message, Value::Null),
            CoreError::Dimension { expected, got } => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "grid_mismatch",
                message,
                json!({ "expected": expected, "got": got }),
            ),
            CoreError::Collinear(a, b) => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "collinear_edit",
                message,
                json!({ "directions": [a, b] }),
            ),
            _ => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
