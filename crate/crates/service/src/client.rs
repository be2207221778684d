//! Typed client for the HTTP API.

use std::collections::BTreeMap;
use std::time::Duration;

use dtds_core::assets::AssetMetadata;
use dtds_core::model::dtdo::ChannelDescriptor;
use dtds_core::model::{serialize_entity, serialize_fragment};
use dtds_core::resolve::ResolvedScene;
use dtds_core::store::ChangeEvent;
use dtds_core::{Attribute, Entity, EntityId};
use reqwest::{Method, RequestBuilder, StatusCode};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::api::TENANT_HEADER;
use crate::dispatch::DispatchStats;
use crate::federate::WARNING_HEADER;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("server unreachable: {0}")]
    Unreachable(String),
    #[error("{status}: {code}: {detail}")]
    Api {
        status: u16,
        code: String,
        detail: String,
        body: Value,
    },
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { code, .. } => Some(code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatchResult {
    Applied,
    /// Some attributes were stale and skipped.
    Partial { not_updated: Vec<String> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WatchResponse {
    pub subscription_id: EntityId,
    pub acm: ChannelDescriptor,
    pub watched_ids: Vec<EntityId>,
    pub watched_attributes: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChangesPage {
    pub events: Vec<ChangeEvent>,
    pub next_after: Option<u64>,
    pub latest_seq: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ServerStats {
    pub dispatch: DispatchStats,
    pub latest_seq: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub struct DtdsClient {
    base: String,
    tenant: String,
    http: reqwest::Client,
}

impl DtdsClient {
    pub fn new(base: &str, tenant: &str) -> Self {
        Self::with_timeout(base, tenant, Duration::from_secs(10))
    }

    pub fn with_timeout(base: &str, tenant: &str, timeout: Duration) -> Self {
        DtdsClient {
            base: base.trim_end_matches('/').to_string(),
            tenant: tenant.to_string(),
            http: reqwest::Client::builder()
                .timeout(timeout)
                .pool_max_idle_per_host(64)
                .build()
                .expect("http client"),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn tenant(&self) -> &str {
        &self.tenant
    }

    fn url(&self, path: &str, segment: Option<&str>, suffix: &str) -> reqwest::Url {
        let mut url = reqwest::Url::parse(&format!("{}{}", self.base, path)).expect("base url");
        if let Some(s) = segment {
            url.path_segments_mut().expect("base url").push(s);
        }
        if !suffix.is_empty() {
            url.path_segments_mut().expect("base url").extend(suffix.split('/'));
        }
        url
    }

    fn request(&self, method: Method, url: reqwest::Url) -> RequestBuilder {
        self.http.request(method, url).header(TENANT_HEADER, &self.tenant)
    }

    async fn send(&self, req: RequestBuilder) -> Result<reqwest::Response, ClientError> {
        let resp = req.send().await.map_err(|e| ClientError::Unreachable(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let body: Value = resp.json().await.unwrap_or(Value::Null);
        Err(ClientError::Api {
            status,
            code: body["type"].as_str().unwrap_or("UNKNOWN").to_string(),
            detail: body["detail"].as_str().unwrap_or_default().to_string(),
            body,
        })
    }

    async fn json<T: serde::de::DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ClientError> {
        self.send(req)
            .await?
            .json()
            .await
            .map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn create_entity(&self, e: &Entity) -> Result<(), ClientError> {
        let req = self
            .request(Method::POST, self.url("/ngsi-ld/v1/entities", None, ""))
            .header("content-type", "application/json")
            .body(serialize_entity(e));
        self.send(req).await.map(drop)
    }

    /// The entity and any federation warnings.
    pub async fn get_entity(&self, id: &EntityId) -> Result<(Entity, Vec<String>), ClientError> {
        let req = self.request(Method::GET, self.url("/ngsi-ld/v1/entities", Some(id.as_str()), ""));
        let resp = self.send(req).await?;
        let warnings = resp
            .headers()
            .get(WARNING_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(|s| s.split(", ").map(str::to_string).collect())
            .unwrap_or_default();
        let e = resp.json().await.map_err(|e| ClientError::Decode(e.to_string()))?;
        Ok((e, warnings))
    }

    pub async fn query(&self, params: &[(&str, &str)]) -> Result<Vec<Entity>, ClientError> {
        let mut url = self.url("/ngsi-ld/v1/entities", None, "");
        url.query_pairs_mut().extend_pairs(params);
        self.json(self.request(Method::GET, url)).await
    }

    pub async fn patch_attrs(&self, id: &EntityId, fragment: &BTreeMap<String, Attribute>) -> Result<PatchResult, ClientError> {
        self.patch_raw(id, serialize_fragment(fragment)).await
    }

    pub async fn patch_raw(&self, id: &EntityId, body: String) -> Result<PatchResult, ClientError> {
        let req = self
            .request(Method::PATCH, self.url("/ngsi-ld/v1/entities", Some(id.as_str()), "attrs"))
            .header("content-type", "application/json")
            .body(body);
        let resp = self.send(req).await?;
        if resp.status() == StatusCode::MULTI_STATUS {
            let v: Value = resp.json().await.map_err(|e| ClientError::Decode(e.to_string()))?;
            let not_updated = v["notUpdated"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|n| n["attributeName"].as_str().map(str::to_string))
                .collect();
            return Ok(PatchResult::Partial { not_updated });
        }
        Ok(PatchResult::Applied)
    }

    pub async fn delete_entity(&self, id: &EntityId) -> Result<(), ClientError> {
        let req = self.request(Method::DELETE, self.url("/ngsi-ld/v1/entities", Some(id.as_str()), ""));
        self.send(req).await.map(drop)
    }

    pub async fn create_subscription(&self, doc: &Value) -> Result<EntityId, ClientError> {
        let req = self
            .request(Method::POST, self.url("/ngsi-ld/v1/subscriptions", None, ""))
            .json(doc);
        let v: Value = self.json(req).await?;
        serde_json::from_value(v["id"].clone()).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn delete_subscription(&self, id: &EntityId) -> Result<(), ClientError> {
        let req = self.request(Method::DELETE, self.url("/ngsi-ld/v1/subscriptions", Some(id.as_str()), ""));
        self.send(req).await.map(drop)
    }

    pub async fn register_source(&self, doc: &Value) -> Result<EntityId, ClientError> {
        let req = self
            .request(Method::POST, self.url("/ngsi-ld/v1/csourceRegistrations", None, ""))
            .json(doc);
        let v: Value = self.json(req).await?;
        serde_json::from_value(v["id"].clone()).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn resolve_scene(
        &self,
        id: &EntityId,
        formats: Option<&str>,
        modalities: Option<&str>,
    ) -> Result<ResolvedScene, ClientError> {
        let mut url = self.url("/dtds/v1/scenes", Some(id.as_str()), "resolved");
        {
            let mut q = url.query_pairs_mut();
            if let Some(f) = formats {
                q.append_pair("formats", f);
            }
            if let Some(m) = modalities {
                q.append_pair("modalities", m);
            }
        }
        self.json(self.request(Method::GET, url)).await
    }

    pub async fn validate_scene(&self, id: &EntityId) -> Result<Value, ClientError> {
        let req = self.request(Method::POST, self.url("/dtds/v1/scenes", Some(id.as_str()), "validate"));
        self.json(req).await
    }

    pub async fn watch_scene(
        &self,
        id: &EntityId,
        endpoint: &str,
        topic: Option<&str>,
        qos: Option<u8>,
    ) -> Result<WatchResponse, ClientError> {
        let mut body = json!({ "endpoint": endpoint });
        if let Some(t) = topic {
            body["topic"] = json!(t);
        }
        if let Some(q) = qos {
            body["qos"] = json!(q);
        }
        let req = self
            .request(Method::POST, self.url("/dtds/v1/scenes", Some(id.as_str()), "watch"))
            .json(&body);
        self.json(req).await
    }

    pub async fn put_asset(
        &self,
        bytes: Vec<u8>,
        format: &str,
        modality: &str,
        name: Option<&str>,
    ) -> Result<String, ClientError> {
        let mut req = self
            .request(Method::POST, self.url("/dtds/v1/assets", None, ""))
            .header("X-DTDS-Format", format)
            .header("X-DTDS-Modality", modality)
            .header("content-type", "application/octet-stream")
            .body(bytes);
        if let Some(n) = name {
            req = req.header("X-DTDS-Name", n);
        }
        let v: Value = self.json(req).await?;
        v["resourceId"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ClientError::Decode("missing resourceId".into()))
    }

    pub async fn get_asset(&self, id: &str) -> Result<Vec<u8>, ClientError> {
        let req = self.request(Method::GET, self.url("/dtds/v1/assets", Some(id), ""));
        let resp = self.send(req).await?;
        resp.bytes()
            .await
            .map(|b| b.to_vec())
            .map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn asset_meta(&self, id: &str) -> Result<AssetMetadata, ClientError> {
        self.json(self.request(Method::GET, self.url("/dtds/v1/assets", Some(id), "meta")))
            .await
    }

    pub async fn changes(&self, after: u64, limit: usize) -> Result<ChangesPage, ClientError> {
        let mut url = self.url("/dtds/v1/changes", None, "");
        url.query_pairs_mut()
            .append_pair("after", &after.to_string())
            .append_pair("limit", &limit.to_string());
        self.json(self.request(Method::GET, url)).await
    }

    /// Every change after `after`, following pages.
    pub async fn all_changes(&self, mut after: u64) -> Result<Vec<ChangeEvent>, ClientError> {
        let mut out = Vec::new();
        loop {
            let page = self.changes(after, 10_000).await?;
            out.extend(page.events);
            match page.next_after {
                Some(n) => after = n,
                None => return Ok(out),
            }
        }
    }

    pub async fn latest_seq(&self) -> Result<u64, ClientError> {
        Ok(self.changes(u64::MAX / 2, 1).await?.latest_seq)
    }

    pub async fn stats(&self) -> Result<ServerStats, ClientError> {
        self.json(self.request(Method::GET, self.url("/dtds/v1/stats", None, "")))
            .await
    }
}
