//! Per-kind descriptor rules.
//!
//! Every rule emits a [`Finding`] with a stable machine-readable code. Entity
//! types outside the ontology are plain context entities and produce no
//! findings.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::dtdo::{
    attrs, has_mqtt_wildcard, is_mqtt_endpoint, kinds, AccessMethod, ACCESS_HTTP_TEMPLATE,
    ACCESS_INTERNAL, ACM_PAYLOAD_FORMAT, MODALITIES, RESOURCE_PLACEHOLDER,
};
use super::{AttrKind, Entity, EntityId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Finding {
    pub severity: Severity,
    pub code: String,
    pub entity_id: EntityId,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.error_count() == 0
    }

    pub fn error_count(&self) -> usize {
        self.errors().count()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.findings.extend(other.findings);
    }

    pub(crate) fn error(&mut self, code: &str, id: &EntityId, message: impl Into<String>) {
        self.push(Severity::Error, code, id, message);
    }

    pub(crate) fn warning(&mut self, code: &str, id: &EntityId, message: impl Into<String>) {
        self.push(Severity::Warning, code, id, message);
    }

    fn push(&mut self, severity: Severity, code: &str, id: &EntityId, message: impl Into<String>) {
        self.findings.push(Finding {
            severity,
            code: code.to_string(),
            entity_id: id.clone(),
            message: message.into(),
        });
    }
}

pub fn validate_entity(entity: &Entity) -> ValidationReport {
    let mut r = ValidationReport::default();
    match entity.entity_type.as_str() {
        kinds::SCENE_HEAD => scene_head(entity, &mut r),
        kinds::STATIC_ASSET | kinds::DYNAMIC_ASSET => asset(entity, &mut r),
        kinds::REPRESENTATION_REFERENCE => representation(entity, &mut r),
        kinds::CONTEXT_REFERENCE => context_reference(entity, &mut r),
        kinds::ACM => acm(entity, &mut r),
        kinds::ASSET_REPOSITORY => repository(entity, &mut r),
        _ => {}
    }
    r
}

fn expect_kind(e: &Entity, name: &str, kind: AttrKind, r: &mut ValidationReport) -> bool {
    match e.attr(name) {
        Some(a) if a.kind() != kind => {
            r.error(
                "ATTR_KIND",
                &e.id,
                format!("`{name}` must be a {}, found {}", kind.as_str(), a.kind().as_str()),
            );
            false
        }
        Some(_) => true,
        None => false,
    }
}

fn non_empty_str<'a>(e: &'a Entity, name: &str) -> Option<&'a str> {
    e.property_str(name).filter(|s| !s.trim().is_empty())
}

fn scene_head(e: &Entity, r: &mut ValidationReport) {
    if non_empty_str(e, attrs::NAME).is_none() {
        r.error("SH_NAME", &e.id, "scene head needs a non-empty `name`");
    }
    expect_kind(e, attrs::HAS_ASSET, AttrKind::Relationship, r);
    let origin = if expect_kind(e, attrs::AREA_ORIGIN, AttrKind::GeoProperty, r) {
        e.geo(attrs::AREA_ORIGIN).copied()
    } else {
        if e.attr(attrs::AREA_ORIGIN).is_none() {
            r.error("SH_ORIGIN", &e.id, "scene head needs an `areaOrigin` GeoProperty");
        }
        None
    };
    let bounds = e.property(attrs::AREA_BOUNDS).and_then(|v| {
        let arr = v.as_array()?;
        if arr.len() != 4 {
            return None;
        }
        let b: Vec<f64> = arr.iter().map(Value::as_f64).collect::<Option<_>>()?;
        let ok = b[0] <= b[2]
            && b[1] <= b[3]
            && (-180.0..=180.0).contains(&b[0])
            && (-180.0..=180.0).contains(&b[2])
            && (-90.0..=90.0).contains(&b[1])
            && (-90.0..=90.0).contains(&b[3]);
        ok.then_some([b[0], b[1], b[2], b[3]])
    });
    match (bounds, origin) {
        (None, _) => r.error(
            "SH_BOUNDS",
            &e.id,
            "`areaBounds` must be [minLon, minLat, maxLon, maxLat] degrees",
        ),
        (Some(b), Some(o)) => {
            if !(b[0] <= o.lon && o.lon <= b[2] && b[1] <= o.lat && o.lat <= b[3]) {
                r.error("SH_ORIGIN_OUTSIDE", &e.id, "`areaOrigin` lies outside `areaBounds`");
            }
        }
        (Some(_), None) => {}
    }
}

fn asset(e: &Entity, r: &mut ValidationReport) {
    let dynamic = e.entity_type == kinds::DYNAMIC_ASSET;
    for rel in [
        attrs::PARENT_ASSET,
        attrs::CHILD_ASSET,
        attrs::HAS_REPRESENTATION,
        attrs::HAS_CONTEXT_REF,
        attrs::SYNC_CHANNEL,
    ] {
        expect_kind(e, rel, AttrKind::Relationship, r);
    }
    if e.targets(attrs::PARENT_ASSET).len() > 1 {
        r.error("ASSET_MULTI_PARENT", &e.id, "`parentAsset` must have a single target");
    }
    match e.attr(attrs::POSITION) {
        None if dynamic => r.error("DA_NO_POSITION", &e.id, "dynamic asset without `position`"),
        None => {}
        Some(_) => {
            if expect_kind(e, attrs::POSITION, AttrKind::GeoProperty, r)
                && dynamic
                && e.attr(attrs::POSITION).and_then(|a| a.observed_at).is_none()
            {
                r.error(
                    "DA_POSITION_NO_OBSERVED_AT",
                    &e.id,
                    "dynamic asset position needs `observedAt`",
                );
            }
        }
    }
    for (name, orientation) in [
        (attrs::POSE, e.property(attrs::POSE).and_then(|p| p.get("orientation"))),
        (attrs::ORIENTATION, e.property(attrs::ORIENTATION)),
    ] {
        expect_kind(e, name, AttrKind::Property, r);
        let Some(o) = orientation else { continue };
        for angle in ["roll", "pitch", "yaw"] {
            match o.get(angle) {
                None => {}
                Some(v) => match v.as_f64() {
                    Some(x) if x.is_finite() => {
                        if angle == "yaw" && !(-180.0..180.0).contains(&x) {
                            r.error("ASSET_YAW_RANGE", &e.id, "yaw must lie in [-180, 180)");
                        }
                    }
                    _ => r.error(
                        "ASSET_BAD_ORIENTATION",
                        &e.id,
                        format!("`{name}` {angle} must be a finite number of degrees"),
                    ),
                },
            }
        }
    }
    if !dynamic && e.attr(attrs::HAS_CONTEXT_REF).is_some() {
        r.error(
            "SA_CONTEXT_REF",
            &e.id,
            "only dynamic assets may carry context references",
        );
    }
    if !dynamic && e.attr(attrs::SYNC_CHANNEL).is_some() {
        r.warning("SA_SYNC_CHANNEL", &e.id, "static assets have no position channel");
    }
}

fn representation(e: &Entity, r: &mut ValidationReport) {
    match non_empty_str(e, attrs::MODALITY) {
        None => r.error("RR_NO_MODALITY", &e.id, "`modality` is required"),
        Some(m) if !MODALITIES.contains(&m.to_ascii_lowercase().as_str()) => r.error(
            "RR_BAD_MODALITY",
            &e.id,
            format!("modality `{m}` is not one of {MODALITIES:?}"),
        ),
        Some(_) => {}
    }
    if non_empty_str(e, attrs::FORMAT).is_none() {
        r.error("RR_NO_FORMAT", &e.id, "`format` is required");
    }
    if e.targets(attrs::IN_REPOSITORY).is_empty() {
        r.error("RR_NO_REPOSITORY", &e.id, "`inRepository` relationship is required");
    }
    if non_empty_str(e, attrs::RESOURCE_ID).is_none() {
        r.error("RR_NO_RESOURCE_ID", &e.id, "`resourceId` is required");
    }
    if e.attr(attrs::LOD).is_some() && e.property(attrs::LOD).and_then(Value::as_u64).is_none() {
        r.error("RR_BAD_LOD", &e.id, "`lod` must be an integer >= 0");
    }
    if e.attr(attrs::SIZE_BYTES).is_some()
        && e.property(attrs::SIZE_BYTES).and_then(Value::as_u64).is_none()
    {
        r.error("RR_BAD_SIZE", &e.id, "`sizeBytes` must be an integer >= 0");
    }
}

fn context_reference(e: &Entity, r: &mut ValidationReport) {
    if e.targets(attrs::SOURCE_ENTITY).is_empty() {
        r.error("CR_NO_SOURCE", &e.id, "`sourceEntity` relationship is required");
    }
    expect_kind(e, attrs::VIA_CONTEXT_SOURCE, AttrKind::Relationship, r);
    expect_kind(e, attrs::SYNC_CHANNEL, AttrKind::Relationship, r);
    match e.property(attrs::ATTRIBUTE_MAP).and_then(Value::as_object) {
        None => r.error("CR_EMPTY_MAP", &e.id, "`attributeMap` must be a non-empty map"),
        Some(map) if map.is_empty() => {
            r.error("CR_EMPTY_MAP", &e.id, "`attributeMap` must be a non-empty map")
        }
        Some(map) => {
            for (local, remote) in map {
                if !remote.as_str().is_some_and(|s| !s.is_empty()) {
                    r.error(
                        "CR_BAD_MAP",
                        &e.id,
                        format!("`{local}` must map to a remote attribute name"),
                    );
                }
                if attrs::FIRST_ORDER.contains(&local.as_str()) {
                    r.error(
                        "CR_RESERVED_LOCAL",
                        &e.id,
                        format!("`{local}` is a first-order asset attribute"),
                    );
                }
            }
        }
    }
    if e.attr(attrs::METADATA).is_some()
        && !e.property(attrs::METADATA).is_some_and(Value::is_object)
    {
        r.error("CR_BAD_METADATA", &e.id, "`metadata` must be a map");
    }
}

fn acm(e: &Entity, r: &mut ValidationReport) {
    if e.property_str(attrs::PROTOCOL) != Some("mqtt") {
        r.error("ACM_PROTOCOL", &e.id, "`protocol` must be `mqtt`");
    }
    if !e.property_str(attrs::ENDPOINT).is_some_and(is_mqtt_endpoint) {
        r.error("ACM_ENDPOINT", &e.id, "`endpoint` must be mqtt://host:port");
    }
    match e.attr(attrs::TOPIC) {
        None => {}
        Some(_) => match non_empty_str(e, attrs::TOPIC) {
            None => r.error("ACM_TOPIC", &e.id, "`topic` must be a non-empty string"),
            Some(t) if has_mqtt_wildcard(t) => {
                r.error("ACM_WILDCARD_TOPIC", &e.id, format!("topic `{t}` contains a wildcard"))
            }
            Some(_) => {}
        },
    }
    if e.attr(attrs::QOS).is_some() && !matches!(e.property(attrs::QOS).and_then(Value::as_u64), Some(0 | 1)) {
        r.error("ACM_QOS", &e.id, "`qos` must be 0 or 1");
    }
    if e.attr(attrs::PAYLOAD_FORMAT).is_some()
        && e.property_str(attrs::PAYLOAD_FORMAT) != Some(ACM_PAYLOAD_FORMAT)
    {
        r.error(
            "ACM_PAYLOAD_FORMAT",
            &e.id,
            format!("`payloadFormat` must be `{ACM_PAYLOAD_FORMAT}`"),
        );
    }
}

fn repository(e: &Entity, r: &mut ValidationReport) {
    let base_ok = e
        .property_str(attrs::BASE_URI)
        .is_some_and(|u| u.starts_with("http://") || u.starts_with("https://"));
    if !base_ok {
        r.error("REPO_BASE_URI", &e.id, "`baseUri` must be an http(s) URI");
    }
    let methods: Option<Vec<AccessMethod>> = e
        .property(attrs::ACCESS_METHODS)
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let Some(methods) = methods else {
        r.error("REPO_NO_METHODS", &e.id, "`accessMethods` must be a list of access methods");
        return;
    };
    if methods.is_empty() {
        r.error("REPO_NO_METHODS", &e.id, "at least one access method is required");
    }
    let mut seen = BTreeSet::new();
    for m in &methods {
        if m.name.is_empty() || !seen.insert(m.name.as_str()) {
            r.error(
                "REPO_DUP_METHOD",
                &e.id,
                format!("access method name `{}` is empty or duplicated", m.name),
            );
        }
        match m.kind.as_str() {
            ACCESS_HTTP_TEMPLATE => {
                let ok = m
                    .url_template
                    .as_deref()
                    .is_some_and(|t| t.matches(RESOURCE_PLACEHOLDER).count() == 1);
                if !ok {
                    r.error(
                        "REPO_BAD_TEMPLATE",
                        &e.id,
                        format!("method `{}` needs `{{resourceId}}` exactly once", m.name),
                    );
                }
            }
            ACCESS_INTERNAL => {}
            other => r.warning(
                "REPO_UNKNOWN_KIND",
                &e.id,
                format!("access method kind `{other}` is not served by this service"),
            ),
        }
    }
}
