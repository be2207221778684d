//! Problem documents: every error response is `{"type", "title", "detail"}`
//! plus optional extension members.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dtds_core::assets::AssetError;
use dtds_core::federation::FederationError;
use dtds_core::model::{ModelError, ValidationReport};
use dtds_core::notify::NotifyError;
use dtds_core::resolve::ResolveError;
use dtds_core::store::StoreError;
use serde_json::{json, Map, Value};

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub title: String,
    pub detail: String,
    pub extra: Map<String, Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, title: &str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_string(),
            title: title.to_string(),
            detail: detail.into(),
            extra: Map::new(),
        }
    }

    pub fn bad_request(code: &str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, "Bad request", detail)
    }

    pub fn not_found(code: &str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, "Not found", detail)
    }

    pub fn conflict(code: &str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, "Conflict", detail)
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }

    pub fn invalid(report: &ValidationReport) -> Self {
        Self::bad_request(
            "VALIDATION_FAILED",
            format!("{} validation errors", report.error_count()),
        )
        .with("findings", json!(report.findings))
    }

    pub fn body(&self) -> Value {
        let mut doc = Map::new();
        doc.insert("type".into(), json!(self.code));
        doc.insert("title".into(), json!(self.title));
        doc.insert("detail".into(), json!(self.detail));
        doc.extend(self.extra.clone());
        Value::Object(doc)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::InvalidEntityId(_) => "INVALID_ID",
            ModelError::InvalidAttribute { .. } => "INVALID_ATTRIBUTE",
            _ => "MALFORMED",
        };
        ApiError::bad_request(code, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::AlreadyExists(_) => ApiError::conflict("ALREADY_EXISTS", e.to_string()),
            StoreError::NotFound(_) => ApiError::not_found("NOT_FOUND", e.to_string()),
            StoreError::ValidationFailed(ref r) => ApiError::invalid(r),
            StoreError::AllStale(ref names) => {
                ApiError::conflict("STALE_UPDATE", e.to_string()).with("notUpdated", json!(names))
            }
            StoreError::InvalidTenant(_) => ApiError::bad_request("INVALID_TENANT", e.to_string()),
            StoreError::EmptyFilter => ApiError::bad_request("EMPTY_FILTER", e.to_string()),
            StoreError::Model(m) => m.into(),
            StoreError::Journal(_) | StoreError::CorruptJournal { .. } => ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "STORAGE",
                "Storage failure",
                e.to_string(),
            ),
        }
    }
}

impl From<NotifyError> for ApiError {
    fn from(e: NotifyError) -> Self {
        match e {
            NotifyError::AlreadyExists(_) => ApiError::conflict("ALREADY_EXISTS", e.to_string()),
            NotifyError::NotFound(_) => ApiError::not_found("NOT_FOUND", e.to_string()),
            NotifyError::InvalidTarget { code, ref message } => ApiError::bad_request(code, message.clone()),
            NotifyError::EmptyBatch => ApiError::bad_request("MALFORMED", e.to_string()),
        }
    }
}

impl From<FederationError> for ApiError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::AlreadyExists(_) => ApiError::conflict("ALREADY_EXISTS", e.to_string()),
            FederationError::NotFound(_) => ApiError::not_found("NOT_FOUND", e.to_string()),
            FederationError::InvalidEndpoint(_) => ApiError::bad_request("BAD_SCHEME", e.to_string()),
            FederationError::NoCoveredTypes => ApiError::bad_request("MISSING_SCOPE", e.to_string()),
        }
    }
}

impl From<ResolveError> for ApiError {
    fn from(e: ResolveError) -> Self {
        match e {
            ResolveError::SceneNotFound(_) => ApiError::not_found("SCENE_NOT_FOUND", e.to_string()),
            ResolveError::SceneInvalid(ref r) => {
                ApiError::bad_request("SCENE_INVALID", e.to_string()).with("findings", json!(r.findings))
            }
        }
    }
}

impl From<AssetError> for ApiError {
    fn from(e: AssetError) -> Self {
        match e {
            AssetError::TooLarge { .. } => {
                ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "TOO_LARGE", "Payload too large", e.to_string())
            }
            AssetError::NotFound(_) => ApiError::not_found("NOT_FOUND", e.to_string()),
            AssetError::Integrity(_) => ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "INTEGRITY",
                "Stored asset is corrupt",
                e.to_string(),
            ),
            AssetError::Io(_) => ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "STORAGE",
                "Storage failure",
                e.to_string(),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dtds_core::EntityId;

    #[test]
    fn problem_document_shape() {
        let e = ApiError::not_found("NOT_FOUND", "nope").with("extra", json!(1));
        let v = e.body();
        assert_eq!(v["type"], "NOT_FOUND");
        assert_eq!(v["title"], "Not found");
        assert_eq!(v["detail"], "nope");
        assert_eq!(v["extra"], 1);
    }

    #[test]
    fn store_errors_map_to_statuses() {
        let id = EntityId::ngsi("T", "a").unwrap();
        assert_eq!(ApiError::from(StoreError::AlreadyExists(id.clone())).status, StatusCode::CONFLICT);
        assert_eq!(ApiError::from(StoreError::NotFound(id)).status, StatusCode::NOT_FOUND);
        assert_eq!(ApiError::from(StoreError::EmptyFilter).status, StatusCode::BAD_REQUEST);
        let stale = ApiError::from(StoreError::AllStale(vec!["position".into()]));
        assert_eq!(stale.status, StatusCode::CONFLICT);
        assert_eq!(stale.body()["notUpdated"], json!(["position"]));
    }
}
