//! Typed read-only views over descriptor entities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Entity, EntityId};

pub mod kinds {
    pub const SCENE_HEAD: &str = "SceneHead";
    pub const STATIC_ASSET: &str = "StaticAsset";
    pub const DYNAMIC_ASSET: &str = "DynamicAsset";
    pub const REPRESENTATION_REFERENCE: &str = "RepresentationReference";
    pub const CONTEXT_REFERENCE: &str = "ContextReference";
    pub const ACM: &str = "ACM";
    pub const ASSET_REPOSITORY: &str = "AssetRepositoryDescriptor";

    pub fn is_asset(entity_type: &str) -> bool {
        entity_type == STATIC_ASSET || entity_type == DYNAMIC_ASSET
    }
}

/// Attribute names used by the ontology.
pub mod attrs {
    pub const NAME: &str = "name";
    pub const AREA_ORIGIN: &str = "areaOrigin";
    pub const AREA_BOUNDS: &str = "areaBounds";
    pub const HAS_ASSET: &str = "hasAsset";
    pub const POSITION: &str = "position";
    pub const POSE: &str = "pose";
    pub const ORIENTATION: &str = "orientation";
    pub const PARENT_ASSET: &str = "parentAsset";
    pub const CHILD_ASSET: &str = "childAsset";
    pub const HAS_REPRESENTATION: &str = "hasRepresentation";
    pub const HAS_CONTEXT_REF: &str = "hasContextRef";
    pub const SYNC_CHANNEL: &str = "syncChannel";
    pub const MODALITY: &str = "modality";
    pub const FORMAT: &str = "format";
    pub const SIZE_BYTES: &str = "sizeBytes";
    pub const LOD: &str = "lod";
    pub const IN_REPOSITORY: &str = "inRepository";
    pub const RESOURCE_ID: &str = "resourceId";
    pub const SOURCE_ENTITY: &str = "sourceEntity";
    pub const VIA_CONTEXT_SOURCE: &str = "viaContextSource";
    pub const ATTRIBUTE_MAP: &str = "attributeMap";
    pub const METADATA: &str = "metadata";
    pub const PROTOCOL: &str = "protocol";
    pub const ENDPOINT: &str = "endpoint";
    pub const TOPIC: &str = "topic";
    pub const QOS: &str = "qos";
    pub const PAYLOAD_FORMAT: &str = "payloadFormat";
    pub const BASE_URI: &str = "baseUri";
    pub const ACCESS_METHODS: &str = "accessMethods";
    pub const SPEED: &str = "speed";

    /// First-order attributes that context references may not shadow.
    pub const FIRST_ORDER: [&str; 3] = [POSE, POSITION, ORIENTATION];
}

pub const MODALITIES: [&str; 5] = ["mesh", "pointcloud", "gaussian-splat", "tiles", "other"];
pub const ACM_PAYLOAD_FORMAT: &str = "ngsi-ld-notification-json";

pub const ACCESS_HTTP_TEMPLATE: &str = "http-get-template";
pub const ACCESS_INTERNAL: &str = "internal";
pub const RESOURCE_PLACEHOLDER: &str = "{resourceId}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AccessMethod {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url_template: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepositoryDescriptor {
    pub id: EntityId,
    pub base_uri: String,
    pub access_methods: Vec<AccessMethod>,
}

impl RepositoryDescriptor {
    pub fn from_entity(e: &Entity) -> Option<Self> {
        let base_uri = e.property_str(attrs::BASE_URI)?.to_string();
        let access_methods = serde_json::from_value(e.property(attrs::ACCESS_METHODS)?.clone()).ok()?;
        Some(RepositoryDescriptor {
            id: e.id.clone(),
            base_uri,
            access_methods,
        })
    }
}

/// An MQTT channel descriptor, as exposed to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChannelDescriptor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<EntityId>,
    pub protocol: String,
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    pub qos: u8,
    pub payload_format: String,
}

impl ChannelDescriptor {
    pub fn from_acm(e: &Entity) -> Option<Self> {
        Some(ChannelDescriptor {
            id: Some(e.id.clone()),
            protocol: e.property_str(attrs::PROTOCOL)?.to_string(),
            endpoint: e.property_str(attrs::ENDPOINT)?.to_string(),
            topic: e.property_str(attrs::TOPIC).map(str::to_string),
            qos: e.property(attrs::QOS).and_then(Value::as_u64).unwrap_or(0) as u8,
            payload_format: ACM_PAYLOAD_FORMAT.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextReference {
    pub id: EntityId,
    pub source_entity: EntityId,
    pub via_context_source: Option<EntityId>,
    /// local attribute name -> remote attribute name
    pub attribute_map: BTreeMap<String, String>,
    pub sync_channels: Vec<EntityId>,
}

impl ContextReference {
    pub fn from_entity(e: &Entity) -> Option<Self> {
        let source_entity = e.targets(attrs::SOURCE_ENTITY).first()?.clone();
        let attribute_map = e
            .property(attrs::ATTRIBUTE_MAP)?
            .as_object()?
            .iter()
            .map(|(k, v)| Some((k.clone(), v.as_str()?.to_string())))
            .collect::<Option<_>>()?;
        Some(ContextReference {
            id: e.id.clone(),
            source_entity,
            via_context_source: e.targets(attrs::VIA_CONTEXT_SOURCE).first().cloned(),
            attribute_map,
            sync_channels: e.targets(attrs::SYNC_CHANNEL).to_vec(),
        })
    }
}

/// Checks an `mqtt://host:port` endpoint.
pub fn is_mqtt_endpoint(s: &str) -> bool {
    parse_mqtt_endpoint(s).is_some()
}

/// Splits `mqtt://host:port` into host and port (default 1883).
pub fn parse_mqtt_endpoint(s: &str) -> Option<(String, u16)> {
    let rest = s.strip_prefix("mqtt://")?;
    let rest = rest.trim_end_matches('/');
    if rest.is_empty() || rest.contains('/') {
        return None;
    }
    match rest.rsplit_once(':') {
        Some((host, port)) if !host.is_empty() => Some((host.to_string(), port.parse().ok()?)),
        Some(_) => None,
        None => Some((rest.to_string(), 1883)),
    }
}

pub fn has_mqtt_wildcard(topic: &str) -> bool {
    topic.contains('+') || topic.contains('#')
}
