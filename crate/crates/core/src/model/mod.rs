//! Entity data model and the descriptor ontology built on top of it.
//!
//! An [`Entity`] is an NGSI-LD style record: an id, a type and a map of
//! typed attributes. Descriptor kinds (scene heads, assets, representation
//! and context references, communication channels, repositories) are plain
//! entities whose type and attributes follow the rules in [`validate`].

use std::collections::BTreeMap;
use std::fmt;

use serde_json::Value;
use thiserror::Error;

use crate::time::Timestamp;

pub mod dtdo;
pub mod scene;
pub mod validate;
pub mod wire;

pub use dtdo::kinds;
pub use scene::{validate_scene_graph, validate_scene_graphs};
pub use validate::{validate_entity, Finding, Severity, ValidationReport};
pub use wire::{parse_entity, parse_fragment, serialize_entity, serialize_fragment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("invalid attribute `{name}`: {reason}")]
    InvalidAttribute { name: String, reason: String },
    #[error("document lacks a string `id` or `type`")]
    MissingIdOrType,
    #[error("invalid entity id `{0}`")]
    InvalidEntityId(String),
    #[error("entity ids differ: `{left}` vs `{right}`")]
    IdMismatch { left: String, right: String },
    #[error("scene head `{0}` is missing or not a SceneHead")]
    SceneHeadMissing(String),
    #[error("nothing to merge")]
    NothingToMerge,
}

/// Attribute names that can never be used on an entity.
pub const RESERVED_ATTR_NAMES: [&str; 2] = ["id", "type"];

/// Checks an attribute name against the reserved words and the `@` prefix
/// kept for synthetic change-log markers.
pub fn check_attr_name(name: &str) -> Result<(), ModelError> {
    let reason = if name.is_empty() {
        "empty attribute name"
    } else if RESERVED_ATTR_NAMES.contains(&name) {
        "reserved attribute name"
    } else if name.starts_with('@') {
        "`@` prefix is reserved"
    } else {
        return Ok(());
    };
    Err(ModelError::InvalidAttribute {
        name: name.to_string(),
        reason: reason.to_string(),
    })
}

/// `urn:<namespace>:<Type>:<name>` entity identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(String);

impl EntityId {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let rest = s
            .strip_prefix("urn:")
            .ok_or_else(|| ModelError::InvalidEntityId(s.to_string()))?;
        let mut segments = rest.splitn(3, ':');
        let ok = (0..3).all(|_| segments.next().is_some_and(|seg| !seg.is_empty()));
        if !ok || s.chars().any(char::is_whitespace) {
            return Err(ModelError::InvalidEntityId(s.to_string()));
        }
        Ok(EntityId(s.to_string()))
    }

    /// Builds `urn:ngsi-ld:<type>:<name>`.
    pub fn ngsi(entity_type: &str, name: &str) -> Result<Self, ModelError> {
        Self::parse(&format!("urn:ngsi-ld:{entity_type}:{name}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The type segment embedded in the URN (`DynamicAsset` for
    /// `urn:ngsi-ld:DynamicAsset:car1`).
    pub fn type_segment(&self) -> &str {
        self.0.splitn(4, ':').nth(2).unwrap_or_default()
    }

    /// Everything after the type segment (`car1` above).
    pub fn local_name(&self) -> &str {
        self.0.splitn(4, ':').nth(3).unwrap_or_default()
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for EntityId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityId::parse(s)
    }
}

impl serde::Serialize for EntityId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> serde::Deserialize<'de> for EntityId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        EntityId::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Geographic point in `[lon, lat, alt]` order; altitude in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
    pub alt: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64, alt: f64) -> Result<Self, String> {
        if !(lon.is_finite() && lat.is_finite() && alt.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(format!("latitude {lat} outside [-90, 90]"));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(format!("longitude {lon} outside [-180, 180]"));
        }
        Ok(GeoPoint { lon, lat, alt })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttrKind {
    Property,
    Relationship,
    GeoProperty,
}

impl AttrKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttrKind::Property => "Property",
            AttrKind::Relationship => "Relationship",
            AttrKind::GeoProperty => "GeoProperty",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Property(Value),
    Geo(GeoPoint),
    /// One or more target entities; single targets are written as a string.
    Relationship(Vec<EntityId>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub value: AttrValue,
    pub observed_at: Option<Timestamp>,
    pub unit_code: Option<String>,
}

impl Attribute {
    pub fn property(value: impl Into<Value>) -> Self {
        Self::from_value(AttrValue::Property(value.into()))
    }

    pub fn geo(point: GeoPoint) -> Self {
        Self::from_value(AttrValue::Geo(point))
    }

    pub fn relationship(target: EntityId) -> Self {
        Self::from_value(AttrValue::Relationship(vec![target]))
    }

    pub fn relationships(targets: Vec<EntityId>) -> Self {
        Self::from_value(AttrValue::Relationship(targets))
    }

    fn from_value(value: AttrValue) -> Self {
        Attribute {
            value,
            observed_at: None,
            unit_code: None,
        }
    }

    pub fn observed(mut self, at: Timestamp) -> Self {
        self.observed_at = Some(at);
        self
    }

    pub fn unit(mut self, code: impl Into<String>) -> Self {
        self.unit_code = Some(code.into());
        self
    }

    pub fn kind(&self) -> AttrKind {
        match self.value {
            AttrValue::Property(_) => AttrKind::Property,
            AttrValue::Geo(_) => AttrKind::GeoProperty,
            AttrValue::Relationship(_) => AttrKind::Relationship,
        }
    }

    pub fn as_property(&self) -> Option<&Value> {
        match &self.value {
            AttrValue::Property(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_geo(&self) -> Option<&GeoPoint> {
        match &self.value {
            AttrValue::Geo(p) => Some(p),
            _ => None,
        }
    }

    pub fn targets(&self) -> &[EntityId] {
        match &self.value {
            AttrValue::Relationship(t) => t,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: EntityId,
    pub entity_type: String,
    pub attributes: BTreeMap<String, Attribute>,
}

impl Entity {
    pub fn new(id: EntityId, entity_type: impl Into<String>) -> Self {
        Entity {
            id,
            entity_type: entity_type.into(),
            attributes: BTreeMap::new(),
        }
    }

    /// Builder-style insert. Panics on a reserved name, so only use it with
    /// literal names.
    pub fn with(mut self, name: &str, attr: Attribute) -> Self {
        check_attr_name(name).expect("reserved attribute name");
        self.attributes.insert(name.to_string(), attr);
        self
    }

    pub fn set(&mut self, name: &str, attr: Attribute) -> Result<(), ModelError> {
        check_attr_name(name)?;
        self.attributes.insert(name.to_string(), attr);
        Ok(())
    }

    pub fn attr(&self, name: &str) -> Option<&Attribute> {
        self.attributes.get(name)
    }

    pub fn property(&self, name: &str) -> Option<&Value> {
        self.attr(name).and_then(Attribute::as_property)
    }

    pub fn property_str(&self, name: &str) -> Option<&str> {
        self.property(name).and_then(Value::as_str)
    }

    pub fn geo(&self, name: &str) -> Option<&GeoPoint> {
        self.attr(name).and_then(Attribute::as_geo)
    }

    /// Relationship targets of `name`, empty when absent or not a relationship.
    pub fn targets(&self, name: &str) -> &[EntityId] {
        self.attr(name).map(Attribute::targets).unwrap_or(&[])
    }
}

/// Attributes of `new` that were added or changed relative to `old`.
pub fn diff_entity(old: &Entity, new: &Entity) -> Result<Vec<(String, Attribute)>, ModelError> {
    if old.id != new.id {
        return Err(ModelError::IdMismatch {
            left: old.id.to_string(),
            right: new.id.to_string(),
        });
    }
    Ok(new
        .attributes
        .iter()
        .filter(|(name, attr)| old.attributes.get(*name) != Some(*attr))
        .map(|(name, attr)| (name.clone(), attr.clone()))
        .collect())
}

/// Maps a yaw angle in degrees onto `[-180, 180)`. Values already in range
/// are returned untouched so that normalization is bit-exact idempotent.
pub fn normalize_yaw(yaw: f64) -> f64 {
    if (-180.0..180.0).contains(&yaw) {
        return yaw;
    }
    let wrapped = (yaw + 180.0).rem_euclid(360.0) - 180.0;
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn car() -> Entity {
        Entity::new(EntityId::ngsi("DynamicAsset", "car1").unwrap(), "DynamicAsset").with(
            "position",
            Attribute::geo(GeoPoint::new(23.75, 38.25, 0.0).unwrap())
                .observed(Timestamp::from_millis(1_000)),
        )
    }

    #[test]
    fn entity_id_segments() {
        let id = EntityId::parse("urn:ngsi-ld:DynamicAsset:car:1").unwrap();
        assert_eq!(id.type_segment(), "DynamicAsset");
        assert_eq!(id.local_name(), "car:1");
        for bad in ["", "urn:", "urn:ngsi-ld:Car", "urn:ngsi-ld::x", "car1", "urn:a:b:c d"] {
            assert!(EntityId::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn diff_identity_is_empty() {
        let e = car();
        assert!(diff_entity(&e, &e).unwrap().is_empty());
    }

    #[test]
    fn diff_reports_single_change_and_additions() {
        let old = car();
        let moved = Attribute::geo(GeoPoint::new(23.76, 38.25, 0.0).unwrap())
            .observed(Timestamp::from_millis(2_000));
        let new = old
            .clone()
            .with("position", moved.clone())
            .with("speed", Attribute::property(json!(3.0)));
        let d = diff_entity(&old, &new).unwrap();
        assert_eq!(
            d,
            vec![
                ("position".to_string(), moved),
                ("speed".to_string(), Attribute::property(json!(3.0)))
            ]
        );
    }

    #[test]
    fn diff_rejects_other_ids() {
        let other = Entity::new(EntityId::ngsi("DynamicAsset", "car2").unwrap(), "DynamicAsset");
        assert!(matches!(diff_entity(&car(), &other), Err(ModelError::IdMismatch { .. })));
    }

    #[test]
    fn yaw_normalization() {
        assert_eq!(normalize_yaw(90.0), 90.0);
        assert_eq!(normalize_yaw(180.0), -180.0);
        assert_eq!(normalize_yaw(270.0), -90.0);
        assert_eq!(normalize_yaw(-190.0), 170.0);
        assert_eq!(normalize_yaw(0.1), 0.1);
        assert_eq!(normalize_yaw(720.0), 0.0);
    }

    #[test]
    fn reserved_names() {
        assert!(check_attr_name("id").is_err());
        assert!(check_attr_name("type").is_err());
        assert!(check_attr_name("@created").is_err());
        assert!(check_attr_name("").is_err());
        assert!(check_attr_name("position").is_ok());
    }
}
