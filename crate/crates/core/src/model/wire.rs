//! JSON wire format (NGSI-LD normalized representation, fixed core context).
//!
//! ```json
//! {"id":"urn:ngsi-ld:DynamicAsset:car1","type":"DynamicAsset",
//!  "position":{"type":"GeoProperty","value":{"type":"Point","coordinates":[23.75,38.25,0]},
//!              "observedAt":"2025-01-01T12:00:00.000Z"}}
//! ```
//!
//! Serialization writes `id`, `type`, then attributes in lexicographic order,
//! so equal entities always produce identical bytes.

use std::collections::BTreeMap;

use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use super::{check_attr_name, normalize_yaw, AttrValue, Attribute, Entity, EntityId, GeoPoint, ModelError};
use crate::time::Timestamp;

pub fn parse_entity(document: &str) -> Result<Entity, ModelError> {
    let value: Value =
        serde_json::from_str(document).map_err(|e| ModelError::MalformedDocument(e.to_string()))?;
    entity_from_value(value)
}

pub fn serialize_entity(entity: &Entity) -> String {
    serde_json::to_string(entity).expect("entity serialization is infallible")
}

/// Parses a PATCH body: a map of attribute name to attribute. `id` and
/// `type` members, when present, are ignored.
pub fn parse_fragment(document: &str) -> Result<BTreeMap<String, Attribute>, ModelError> {
    let value: Value =
        serde_json::from_str(document).map_err(|e| ModelError::MalformedDocument(e.to_string()))?;
    fragment_from_value(value)
}

pub fn fragment_from_value(value: Value) -> Result<BTreeMap<String, Attribute>, ModelError> {
    let Value::Object(map) = value else {
        return Err(ModelError::MalformedDocument("fragment must be a JSON object".into()));
    };
    let mut out = BTreeMap::new();
    for (name, raw) in map {
        if name == "id" || name == "type" || name == "@context" {
            continue;
        }
        check_attr_name(&name)?;
        let attr = attribute_from_value(&name, raw)?;
        out.insert(name, attr);
    }
    Ok(out)
}

pub fn serialize_fragment(attrs: &BTreeMap<String, Attribute>) -> String {
    serde_json::to_string(attrs).expect("fragment serialization is infallible")
}

pub fn entity_from_value(value: Value) -> Result<Entity, ModelError> {
    let Value::Object(mut map) = value else {
        return Err(ModelError::MalformedDocument("entity must be a JSON object".into()));
    };
    // An attribute-shaped `id`/`type` member is an attempt to use a reserved name.
    for reserved in ["id", "type"] {
        if matches!(map.get(reserved), Some(Value::Object(_))) {
            return Err(invalid(reserved, "reserved attribute name"));
        }
    }
    let id = match map.remove("id") {
        Some(Value::String(s)) => EntityId::parse(&s)?,
        _ => return Err(ModelError::MissingIdOrType),
    };
    let entity_type = match map.remove("type") {
        Some(Value::String(s)) if !s.is_empty() => s,
        _ => return Err(ModelError::MissingIdOrType),
    };
    map.remove("@context");
    let mut entity = Entity::new(id, entity_type);
    for (name, raw) in map {
        check_attr_name(&name)?;
        let attr = attribute_from_value(&name, raw)?;
        entity.attributes.insert(name, attr);
    }
    Ok(entity)
}

fn invalid(name: &str, reason: impl Into<String>) -> ModelError {
    ModelError::InvalidAttribute {
        name: name.to_string(),
        reason: reason.into(),
    }
}

pub fn attribute_from_value(name: &str, raw: Value) -> Result<Attribute, ModelError> {
    let Value::Object(mut obj) = raw else {
        return Err(invalid(name, "attribute must be an object"));
    };
    let kind = match obj.remove("type") {
        Some(Value::String(s)) => s,
        _ => return Err(invalid(name, "missing attribute type")),
    };
    let observed_at = match obj.remove("observedAt") {
        None => None,
        Some(Value::String(s)) => {
            Some(Timestamp::parse(&s).map_err(|e| invalid(name, format!("bad observedAt: {e}")))?)
        }
        Some(_) => return Err(invalid(name, "observedAt must be a string")),
    };
    let unit_code = match obj.remove("unitCode") {
        None => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(invalid(name, "unitCode must be a string")),
    };
    let value = obj.remove("value");
    let object = obj.remove("object");
    let attr_value = match kind.as_str() {
        "Relationship" => {
            if value.is_some() {
                return Err(invalid(name, "Relationship carries `value`"));
            }
            let targets = match object {
                Some(Value::String(s)) => vec![EntityId::parse(&s)?],
                Some(Value::Array(items)) if !items.is_empty() => items
                    .into_iter()
                    .map(|item| match item {
                        Value::String(s) => EntityId::parse(&s),
                        _ => Err(invalid(name, "relationship object must be URIs")),
                    })
                    .collect::<Result<_, _>>()?,
                _ => return Err(invalid(name, "Relationship without `object`")),
            };
            AttrValue::Relationship(targets)
        }
        "Property" | "GeoProperty" => {
            if object.is_some() {
                return Err(invalid(name, format!("{kind} carries `object`")));
            }
            let value = match value {
                Some(Value::Null) | None => return Err(invalid(name, format!("{kind} without `value`"))),
                Some(v) => v,
            };
            if kind == "GeoProperty" {
                AttrValue::Geo(geo_from_value(name, &value)?)
            } else {
                AttrValue::Property(normalize_pose(name, value))
            }
        }
        other => return Err(invalid(name, format!("unknown attribute type `{other}`"))),
    };
    Ok(Attribute {
        value: attr_value,
        observed_at,
        unit_code,
    })
}

fn geo_from_value(name: &str, value: &Value) -> Result<GeoPoint, ModelError> {
    if value.get("type").and_then(Value::as_str) != Some("Point") {
        return Err(invalid(name, "GeoProperty value must be a Point"));
    }
    let coords = value
        .get("coordinates")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid(name, "Point without coordinates"))?;
    if !(2..=3).contains(&coords.len()) {
        return Err(invalid(name, "Point needs [lon, lat] or [lon, lat, alt]"));
    }
    let nums: Vec<f64> = coords
        .iter()
        .map(|c| c.as_f64().ok_or_else(|| invalid(name, "non-numeric coordinate")))
        .collect::<Result<_, _>>()?;
    GeoPoint::new(nums[0], nums[1], nums.get(2).copied().unwrap_or(0.0)).map_err(|e| invalid(name, e))
}

/// Canonicalizes yaw in `pose.orientation` and `orientation` properties.
fn normalize_pose(name: &str, mut value: Value) -> Value {
    let orientation = match name {
        "pose" => value.get_mut("orientation"),
        "orientation" => Some(&mut value),
        _ => None,
    };
    if let Some(yaw) = orientation.and_then(|o| o.get_mut("yaw")) {
        if let Some(raw) = yaw.as_f64() {
            let norm = normalize_yaw(raw);
            if norm != raw {
                if let Some(n) = serde_json::Number::from_f64(norm) {
                    *yaw = Value::Number(n);
                }
            }
        }
    }
    value
}

fn geo_to_value(p: &GeoPoint) -> Value {
    serde_json::json!({"type": "Point", "coordinates": [p.lon, p.lat, p.alt]})
}

impl Serialize for Attribute {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(None)?;
        map.serialize_entry("type", self.kind().as_str())?;
        match &self.value {
            AttrValue::Property(v) => map.serialize_entry("value", v)?,
            AttrValue::Geo(p) => map.serialize_entry("value", &geo_to_value(p))?,
            AttrValue::Relationship(targets) => match targets.as_slice() {
                [single] => map.serialize_entry("object", single)?,
                many => map.serialize_entry("object", many)?,
            },
        }
        if let Some(t) = &self.observed_at {
            map.serialize_entry("observedAt", t)?;
        }
        if let Some(u) = &self.unit_code {
            map.serialize_entry("unitCode", u)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Attribute {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        attribute_from_value("attr", v).map_err(serde::de::Error::custom)
    }
}

impl Serialize for Entity {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(2 + self.attributes.len()))?;
        map.serialize_entry("id", &self.id)?;
        map.serialize_entry("type", &self.entity_type)?;
        for (name, attr) in &self.attributes {
            map.serialize_entry(name, attr)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Entity {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        entity_from_value(v).map_err(serde::de::Error::custom)
    }
}

/// Converts an entity into a JSON object value (same member order rules do
/// not survive `serde_json::Map`, use [`serialize_entity`] for bytes).
pub fn entity_to_value(entity: &Entity) -> Value {
    let mut map = Map::new();
    map.insert("id".into(), Value::String(entity.id.to_string()));
    map.insert("type".into(), Value::String(entity.entity_type.clone()));
    for (name, attr) in &entity.attributes {
        map.insert(name.clone(), serde_json::to_value(attr).expect("attribute to value"));
    }
    Value::Object(map)
}
