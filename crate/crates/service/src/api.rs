//! HTTP routes.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dtds_core::federation::ContextSourceRegistration;
use dtds_core::model::dtdo::{ChannelDescriptor, ACM_PAYLOAD_FORMAT};
use dtds_core::model::{parse_entity, parse_fragment, validate_scene_graph, ModelError};
use dtds_core::notify::{Subscription, Target};
use dtds_core::resolve::{resolve_scene, scene_closure, watch_scope, ClientCapabilities, ResolvedScene};
use dtds_core::store::{QueryFilter, Tenant, DEFAULT_PAGE_SIZE};
use dtds_core::{Entity, EntityId};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::federate::{FederatedGetError, WARNING_HEADER};
use crate::server::AppState;

pub const TENANT_HEADER: &str = "NGSILD-Tenant";

type Shared = State<Arc<AppState>>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let asset_limit = usize::try_from(state.config.max_asset_bytes.saturating_add(1)).unwrap_or(usize::MAX);
    Router::new()
        .route("/ngsi-ld/v1/entities", post(create_entity).get(query_entities))
        .route("/ngsi-ld/v1/entities/{id}", get(get_entity).delete(delete_entity))
        .route("/ngsi-ld/v1/entities/{id}/attrs", axum::routing::patch(patch_attrs))
        .route("/ngsi-ld/v1/subscriptions", post(create_subscription).get(list_subscriptions))
        .route(
            "/ngsi-ld/v1/subscriptions/{id}",
            get(get_subscription).delete(delete_subscription),
        )
        .route("/ngsi-ld/v1/csourceRegistrations", post(register_source).get(list_sources))
        .route(
            "/ngsi-ld/v1/csourceRegistrations/{id}",
            axum::routing::delete(unregister_source),
        )
        .route("/dtds/v1/scenes/{id}/resolved", get(resolved_scene))
        .route("/dtds/v1/scenes/{id}/validate", post(validate_scene))
        .route("/dtds/v1/scenes/{id}/watch", post(watch_scene))
        .route(
            "/dtds/v1/assets",
            post(put_asset).layer(DefaultBodyLimit::max(asset_limit)),
        )
        .route("/dtds/v1/assets/{id}", get(get_asset))
        .route("/dtds/v1/assets/{id}/meta", get(asset_meta))
        .route("/dtds/v1/changes", get(changes))
        .route("/dtds/v1/stats", get(stats))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(state)
}

async fn not_found() -> ApiError {
    ApiError::not_found("NOT_FOUND", "no such route")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        "METHOD_NOT_ALLOWED",
        "Method not allowed",
        "the route does not support this method",
    )
}

fn tenant(headers: &HeaderMap) -> ApiResult<Tenant> {
    let raw = match headers.get(TENANT_HEADER) {
        None => "",
        Some(v) => v
            .to_str()
            .map_err(|_| ApiError::bad_request("INVALID_TENANT", "tenant header is not text"))?,
    };
    Tenant::new(raw).map_err(Into::into)
}

fn entity_id(raw: &str) -> ApiResult<EntityId> {
    EntityId::parse(raw).map_err(Into::into)
}

fn utf8(body: &Bytes) -> ApiResult<&str> {
    std::str::from_utf8(body).map_err(|_| ModelError::MalformedDocument("body is not UTF-8".into()).into())
}

fn json_body(body: &Bytes) -> ApiResult<Value> {
    serde_json::from_str(utf8(body)?).map_err(|e| ApiError::bad_request("MALFORMED", e.to_string()))
}

fn fresh_id(kind: &str) -> EntityId {
    EntityId::ngsi(kind, &uuid::Uuid::new_v4().to_string()).expect("uuid id")
}

fn created(location: String, body: Value) -> Response {
    let mut r = (StatusCode::CREATED, Json(body)).into_response();
    if let Ok(v) = HeaderValue::from_str(&location) {
        r.headers_mut().insert(header::LOCATION, v);
    }
    r
}

fn with_warnings(mut r: Response, warnings: &[String]) -> Response {
    if !warnings.is_empty() {
        if let Ok(v) = HeaderValue::from_str(&warnings.join(", ")) {
            r.headers_mut().insert(WARNING_HEADER, v);
        }
    }
    r
}

fn entity_json(e: &Entity) -> Response {
    (
        [(header::CONTENT_TYPE, "application/json")],
        dtds_core::model::serialize_entity(e),
    )
        .into_response()
}

async fn create_entity(State(st): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let tenant = tenant(&headers)?;
    let entity = parse_entity(utf8(&body)?)?;
    let id = entity.id.clone();
    st.store.create_entity(&tenant, entity)?;
    Ok(created(format!("/ngsi-ld/v1/entities/{id}"), json!({ "id": id })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ReadParams {
    #[serde(rename = "type")]
    entity_type: Option<String>,
    id_pattern: Option<String>,
    bbox: Option<String>,
    rel_name: Option<String>,
    rel_target: Option<String>,
    local: Option<bool>,
}

async fn get_entity(
    State(st): Shared,
    headers: HeaderMap,
    Path(raw): Path<String>,
    Query(p): Query<ReadParams>,
) -> ApiResult<Response> {
    let tenant = tenant(&headers)?;
    let id = entity_id(&raw)?;
    let local_only = p.local.unwrap_or(false);
    let cap = st.config.federation_cap;
    match st
        .federator
        .get(&st.store, &tenant, &id, p.entity_type.as_deref(), local_only, cap)
        .await
    {
        Ok(f) => Ok(with_warnings(entity_json(&f.value), &f.warnings)),
        Err(FederatedGetError::NotFound(w)) => Ok(with_warnings(
            ApiError::not_found("NOT_FOUND", format!("entity {id} not found")).into_response(),
            &w,
        )),
        Err(FederatedGetError::Unavailable(w)) => Ok(with_warnings(
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "FEDERATION_UNAVAILABLE",
                "Every context source failed",
                format!("entity {id} not found locally and no source answered"),
            )
            .into_response(),
            &w,
        )),
        Err(FederatedGetError::Store(e)) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "STORAGE",
            "Storage failure",
            e,
        )),
    }
}

fn parse_bbox(raw: &str) -> ApiResult<[f64; 4]> {
    let parts: Vec<f64> = raw
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ApiError::bad_request("MALFORMED", "bbox must be minLon,minLat,maxLon,maxLat"))?;
    match parts.as_slice() {
        &[a, b, c, d] if a <= c && b <= d => Ok([a, b, c, d]),
        _ => Err(ApiError::bad_request("MALFORMED", "bbox must be minLon,minLat,maxLon,maxLat")),
    }
}

async fn query_entities(State(st): Shared, headers: HeaderMap, Query(p): Query<ReadParams>) -> ApiResult<Response> {
    let tenant = tenant(&headers)?;
    let relationship = match (p.rel_name, p.rel_target) {
        (Some(n), Some(t)) => Some((n, entity_id(&t)?)),
        (None, None) => None,
        _ => return Err(ApiError::bad_request("MALFORMED", "relName and relTarget go together")),
    };
    let filter = QueryFilter {
        entity_type: p.entity_type,
        id_pattern: p.id_pattern,
        relationship,
        bbox: p.bbox.as_deref().map(parse_bbox).transpose()?,
    };
    let f = st
        .federator
        .query(&st.store, &tenant, &filter, p.local.unwrap_or(false), st.config.federation_cap)
        .await?;
    Ok(with_warnings(Json(f.value).into_response(), &f.warnings))
}

async fn patch_attrs(
    State(st): Shared,
    headers: HeaderMap,
    Path(raw): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let tenant = tenant(&headers)?;
    let id = entity_id(&raw)?;
    let fragment = parse_fragment(utf8(&body)?)?;
    let outcome = st.store.patch_attributes(&tenant, &id, fragment)?;
    if outcome.skipped.is_empty() {
        return Ok(StatusCode::NO_CONTENT.into_response());
    }
    let updated: Vec<&str> = outcome.events.iter().map(|e| e.attr_name.as_str()).collect();
    let not_updated: Vec<Value> = outcome
        .skipped
        .iter()
        .map(|n| json!({ "attributeName": n, "reason": "stale: observedAt older than stored value" }))
        .collect();
    Ok((
        StatusCode::MULTI_STATUS,
        Json(json!({ "updated": updated, "notUpdated": not_updated })),
    )
        .into_response())
}

async fn delete_entity(State(st): Shared, headers: HeaderMap, Path(raw): Path<String>) -> ApiResult<StatusCode> {
    let tenant = tenant(&headers)?;
    st.store.delete_entity(&tenant, &entity_id(&raw)?)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn create_subscription(State(st): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let tenant = tenant(&headers)?;
    let doc = json_body(&body)?;
    let sub = Subscription::from_wire(tenant, &doc, || fresh_id("Subscription"))?;
    let id = st.dispatcher.subscribe(sub)?;
    Ok(created(format!("/ngsi-ld/v1/subscriptions/{id}"), json!({ "id": id })))
}

async fn list_subscriptions(State(st): Shared, headers: HeaderMap) -> ApiResult<Json<Vec<Value>>> {
    let tenant = tenant(&headers)?;
    Ok(Json(
        st.dispatcher.registry().list(&tenant).iter().map(Subscription::to_wire).collect(),
    ))
}

async fn get_subscription(State(st): Shared, headers: HeaderMap, Path(raw): Path<String>) -> ApiResult<Json<Value>> {
    let tenant = tenant(&headers)?;
    let id = entity_id(&raw)?;
    st.dispatcher
        .registry()
        .get(&tenant, &id)
        .map(|s| Json(s.to_wire()))
        .ok_or_else(|| ApiError::not_found("NOT_FOUND", format!("subscription {id} not found")))
}

async fn delete_subscription(State(st): Shared, headers: HeaderMap, Path(raw): Path<String>) -> ApiResult<StatusCode> {
    let tenant = tenant(&headers)?;
    st.dispatcher.unsubscribe(&tenant, &entity_id(&raw)?)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn register_source(State(st): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let tenant = tenant(&headers)?;
    let mut doc = json_body(&body)?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| ApiError::bad_request("MALFORMED", "registration must be a JSON object"))?;
    obj.entry("id")
        .or_insert_with(|| json!(fresh_id("ContextSourceRegistration")));
    let mut reg: ContextSourceRegistration =
        serde_json::from_value(doc).map_err(|e| ApiError::bad_request("MALFORMED", e.to_string()))?;
    reg.tenant = tenant;
    let id = st.federator.registry().register(reg)?;
    Ok(created(format!("/ngsi-ld/v1/csourceRegistrations/{id}"), json!({ "id": id })))
}

async fn list_sources(State(st): Shared, headers: HeaderMap) -> ApiResult<Json<Vec<ContextSourceRegistration>>> {
    let tenant = tenant(&headers)?;
    Ok(Json(st.federator.registry().list(&tenant)))
}

async fn unregister_source(State(st): Shared, headers: HeaderMap, Path(raw): Path<String>) -> ApiResult<StatusCode> {
    let tenant = tenant(&headers)?;
    st.federator.registry().unregister(&tenant, &entity_id(&raw)?)?;
    Ok(StatusCode::NO_CONTENT)
}

fn closure(st: &AppState, tenant: &Tenant, scene: &EntityId) -> Vec<Entity> {
    scene_closure(scene, |id| st.store.get_entity(tenant, id).ok())
}

#[derive(Debug, Default, Deserialize)]
struct CapsParams {
    formats: Option<String>,
    modalities: Option<String>,
}

async fn resolved_scene(
    State(st): Shared,
    headers: HeaderMap,
    Path(raw): Path<String>,
    Query(p): Query<CapsParams>,
) -> ApiResult<Json<ResolvedScene>> {
    let tenant = tenant(&headers)?;
    let scene_id = entity_id(&raw)?;
    let entities = closure(&st, &tenant, &scene_id);
    let caps = ClientCapabilities::from_lists(p.formats.as_deref(), p.modalities.as_deref());
    let mut scene = resolve_scene(&scene_id, &entities, &caps)?;
    let sources = scene.binding_sources();
    if !sources.is_empty() {
        let (found, warnings) = st
            .federator
            .snapshots(
                &st.store,
                &tenant,
                &sources,
                st.config.snapshot_budget,
                st.config.snapshot_source_cap,
            )
            .await;
        scene.fill_snapshots(&found);
        scene.warnings.extend(warnings);
    }
    Ok(Json(scene))
}

async fn validate_scene(State(st): Shared, headers: HeaderMap, Path(raw): Path<String>) -> ApiResult<Json<Value>> {
    let tenant = tenant(&headers)?;
    let scene_id = entity_id(&raw)?;
    let entities = closure(&st, &tenant, &scene_id);
    let report = validate_scene_graph(&scene_id, &entities)
        .map_err(|e| ApiError::not_found("SCENE_NOT_FOUND", e.to_string()))?;
    Ok(Json(json!({
        "sceneId": scene_id,
        "valid": report.is_valid(),
        "errorCount": report.error_count(),
        "findings": report.findings,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct WatchRequest {
    endpoint: String,
    topic: Option<String>,
    qos: Option<u8>,
    #[serde(default)]
    throttling_ms: u64,
}

async fn watch_scene(
    State(st): Shared,
    headers: HeaderMap,
    Path(raw): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let tenant = tenant(&headers)?;
    let scene_id = entity_id(&raw)?;
    let req: WatchRequest = serde_json::from_value(json_body(&body)?)
        .map_err(|e| ApiError::bad_request("MISSING_TARGET", e.to_string()))?;
    let entities = closure(&st, &tenant, &scene_id);
    let scene = resolve_scene(&scene_id, &entities, &ClientCapabilities::default())?;
    let (ids, attrs) = watch_scope(&scene);
    let topic = req
        .topic
        .unwrap_or_else(|| format!("dtds/{tenant}/scene/{}", scene_id.local_name()));
    let qos = req.qos.unwrap_or(1);
    let sub = Subscription {
        id: fresh_id("Subscription"),
        tenant,
        watched_types: None,
        watched_ids: Some(ids.clone()),
        watched_attributes: attrs.clone(),
        target: Target::Mqtt {
            endpoint: req.endpoint.clone(),
            topic: topic.clone(),
            qos,
        },
        throttling_ms: req.throttling_ms,
    };
    let id = st.dispatcher.subscribe(sub)?;
    let acm = ChannelDescriptor {
        id: None,
        protocol: "mqtt".into(),
        endpoint: req.endpoint,
        topic: Some(topic),
        qos,
        payload_format: ACM_PAYLOAD_FORMAT.into(),
    };
    Ok(created(
        format!("/ngsi-ld/v1/subscriptions/{id}"),
        json!({
            "subscriptionId": id,
            "acm": acm,
            "watchedIds": ids,
            "watchedAttributes": attrs,
        }),
    ))
}

fn header_text<'a>(headers: &'a HeaderMap, name: &str) -> ApiResult<Option<&'a str>> {
    headers
        .get(name)
        .map(|v| v.to_str().map_err(|_| ApiError::bad_request("MALFORMED", format!("{name} is not text"))))
        .transpose()
}

async fn put_asset(
    State(st): Shared,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> ApiResult<Response> {
    let body = body.map_err(|e| {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "TOO_LARGE",
            "Payload too large",
            e.body_text(),
        )
    })?;
    let format = header_text(&headers, "X-DTDS-Format")?
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ApiError::bad_request("MISSING_FORMAT", "X-DTDS-Format header required"))?
        .to_lowercase();
    let modality = header_text(&headers, "X-DTDS-Modality")?
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ApiError::bad_request("MISSING_MODALITY", "X-DTDS-Modality header required"))?
        .to_lowercase();
    let name = header_text(&headers, "X-DTDS-Name")?.map(str::to_string);
    let st2 = st.clone();
    let id = tokio::task::spawn_blocking(move || st2.assets.put(&body, &format, &modality, name.as_deref()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "STORAGE", "Storage failure", e.to_string()))??;
    Ok(created(format!("/dtds/v1/assets/{id}"), json!({ "resourceId": id })))
}

async fn get_asset(State(st): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    let st2 = st.clone();
    let (bytes, meta) = tokio::task::spawn_blocking(move || st2.assets.get(&id))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "STORAGE", "Storage failure", e.to_string()))??;
    let mut r = (
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (header::HeaderName::from_static("x-dtds-format"), meta.format.clone()),
            (header::HeaderName::from_static("x-dtds-modality"), meta.modality.clone()),
        ],
        bytes,
    )
        .into_response();
    r.headers_mut().insert(header::CONTENT_LENGTH, HeaderValue::from(meta.size_bytes));
    Ok(r)
}

async fn asset_meta(State(st): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(st.assets.stat(&id)?).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct ChangeParams {
    after: Option<u64>,
    limit: Option<usize>,
}

async fn changes(State(st): Shared, headers: HeaderMap, Query(p): Query<ChangeParams>) -> ApiResult<Response> {
    let tenant = tenant(&headers)?;
    let limit = p.limit.unwrap_or(DEFAULT_PAGE_SIZE).clamp(1, 10 * DEFAULT_PAGE_SIZE);
    let page = st.store.changes_page(&tenant, p.after.unwrap_or(0), limit);
    Ok(Json(json!({
        "events": page.events,
        "nextAfter": page.next_after,
        "latestSeq": st.store.latest_seq(&tenant),
    }))
    .into_response())
}

async fn stats(State(st): Shared) -> Json<Value> {
    let d = st.dispatcher.stats();
    let mut tenants = BTreeMap::new();
    for t in st.store.tenants() {
        tenants.insert(t.to_string(), st.store.latest_seq(&t));
    }
    Json(json!({ "dispatch": d, "latestSeq": tenants }))
}
