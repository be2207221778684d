use serde::Deserialize;

use crate::model::{dtdo::attrs, Entity, EntityId};

/// Conjunctive entity filter.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QueryFilter {
    pub entity_type: Option<String>,
    /// Substring of the entity id.
    pub id_pattern: Option<String>,
    /// Relationship name and target that must be among its objects.
    pub relationship: Option<(String, EntityId)>,
    /// `[minLon, minLat, maxLon, maxLat]`, applied to `position`.
    pub bbox: Option<[f64; 4]>,
}

impl QueryFilter {
    pub fn by_type(t: &str) -> Self {
        QueryFilter {
            entity_type: Some(t.to_string()),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entity_type.is_none()
            && self.id_pattern.is_none()
            && self.relationship.is_none()
            && self.bbox.is_none()
    }

    pub fn matches(&self, e: &Entity) -> bool {
        if self.entity_type.as_deref().is_some_and(|t| t != e.entity_type) {
            return false;
        }
        if self.id_pattern.as_deref().is_some_and(|p| !e.id.as_str().contains(p)) {
            return false;
        }
        if let Some((rel, target)) = &self.relationship {
            if !e.targets(rel).contains(target) {
                return false;
            }
        }
        if let Some([min_lon, min_lat, max_lon, max_lat]) = self.bbox {
            match e.geo(attrs::POSITION) {
                Some(p) if p.lon >= min_lon && p.lon <= max_lon && p.lat >= min_lat && p.lat <= max_lat => {}
                _ => return false,
            }
        }
        true
    }
}
