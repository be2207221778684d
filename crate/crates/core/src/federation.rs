//! Context source registrations and the federated merge rule.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::store::Tenant;
use crate::{Attribute, Entity, EntityId, Timestamp};

pub const DEFAULT_TIMEOUT_MS: u64 = 2000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FederationError {
    #[error("registration `{0}` already exists")]
    AlreadyExists(String),
    #[error("invalid endpoint `{0}`: must be an http(s) URI")]
    InvalidEndpoint(String),
    #[error("registration must cover at least one entity type")]
    NoCoveredTypes,
    #[error("registration `{0}` not found")]
    NotFound(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContextSourceRegistration {
    pub id: EntityId,
    #[serde(skip)]
    pub tenant: Tenant,
    pub covered_types: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covered_id_pattern: Option<String>,
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

impl ContextSourceRegistration {
    pub fn validate(&self) -> Result<(), FederationError> {
        if self.covered_types.is_empty() {
            return Err(FederationError::NoCoveredTypes);
        }
        let rest = self
            .endpoint
            .strip_prefix("http://")
            .or_else(|| self.endpoint.strip_prefix("https://"));
        match rest {
            Some(host) if !host.is_empty() && !host.starts_with('/') => Ok(()),
            _ => Err(FederationError::InvalidEndpoint(self.endpoint.clone())),
        }
    }

    /// Base URL without a trailing slash.
    pub fn base_url(&self) -> &str {
        self.endpoint.trim_end_matches('/')
    }
}

/// What a federated read is looking for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdScope {
    /// A single entity.
    Id(EntityId),
    /// An id substring pattern, or every id when `None`.
    Pattern(Option<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FederationFilter {
    pub entity_type: String,
    pub scope: IdScope,
}

fn scope_matches(pattern: &str, scope: &IdScope) -> bool {
    match scope {
        IdScope::Id(id) => id.as_str().contains(pattern),
        IdScope::Pattern(None) => true,
        IdScope::Pattern(Some(p)) => p.contains(pattern) || pattern.contains(p.as_str()),
    }
}

pub fn registration_matches(reg: &ContextSourceRegistration, tenant: &Tenant, filter: &FederationFilter) -> bool {
    reg.tenant == *tenant
        && reg.covered_types.contains(&filter.entity_type)
        && reg
            .covered_id_pattern
            .as_deref()
            .is_none_or(|p| scope_matches(p, &filter.scope))
}

pub fn match_registrations<'a>(
    regs: &'a [ContextSourceRegistration],
    tenant: &Tenant,
    filter: &FederationFilter,
) -> Vec<&'a ContextSourceRegistration> {
    regs.iter().filter(|r| registration_matches(r, tenant, filter)).collect()
}

#[derive(Default)]
pub struct RegistrationRegistry {
    regs: RwLock<Vec<ContextSourceRegistration>>,
}

impl RegistrationRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, reg: ContextSourceRegistration) -> Result<EntityId, FederationError> {
        reg.validate()?;
        let mut regs = self.regs.write().unwrap();
        if regs.iter().any(|r| r.tenant == reg.tenant && r.id == reg.id) {
            return Err(FederationError::AlreadyExists(reg.id.to_string()));
        }
        let id = reg.id.clone();
        regs.push(reg);
        Ok(id)
    }

    pub fn unregister(&self, tenant: &Tenant, id: &EntityId) -> Result<(), FederationError> {
        let mut regs = self.regs.write().unwrap();
        let before = regs.len();
        regs.retain(|r| !(r.tenant == *tenant && r.id == *id));
        if regs.len() == before {
            return Err(FederationError::NotFound(id.to_string()));
        }
        Ok(())
    }

    /// Matching registrations in registration order.
    pub fn matching(&self, tenant: &Tenant, filter: &FederationFilter) -> Vec<ContextSourceRegistration> {
        let regs = self.regs.read().unwrap();
        match_registrations(&regs, tenant, filter).into_iter().cloned().collect()
    }

    /// Registrations of `tenant` covering `entity_type`, ignoring id patterns.
    pub fn covering_type(&self, tenant: &Tenant, entity_type: &str) -> Vec<ContextSourceRegistration> {
        self.regs
            .read()
            .unwrap()
            .iter()
            .filter(|r| r.tenant == *tenant && r.covered_types.contains(entity_type))
            .cloned()
            .collect()
    }

    pub fn list(&self, tenant: &Tenant) -> Vec<ContextSourceRegistration> {
        self.regs.read().unwrap().iter().filter(|r| r.tenant == *tenant).cloned().collect()
    }
}

/// Attribute-wise union; the greatest observedAt wins, a missing observedAt
/// ranks lowest, exact ties go to `local` and then to the earliest remote.
pub fn merge_entities(local: Option<&Entity>, remotes: &[Entity]) -> Result<Entity, ModelError> {
    let mut sources = local.into_iter().chain(remotes.iter());
    let first = sources.next().ok_or(ModelError::NothingToMerge)?;
    let mut merged = Entity {
        id: first.id.clone(),
        entity_type: first.entity_type.clone(),
        attributes: BTreeMap::new(),
    };
    for src in local.into_iter().chain(remotes.iter()) {
        if src.id != merged.id {
            return Err(ModelError::IdMismatch {
                left: merged.id.to_string(),
                right: src.id.to_string(),
            });
        }
        if src.entity_type != merged.entity_type {
            return Err(ModelError::IdMismatch {
                left: format!("{} ({})", merged.id, merged.entity_type),
                right: format!("{} ({})", src.id, src.entity_type),
            });
        }
        for (name, attr) in &src.attributes {
            match merged.attributes.get(name) {
                Some(cur) if rank(attr) <= rank(cur) => {}
                _ => {
                    merged.attributes.insert(name.clone(), attr.clone());
                }
            }
        }
    }
    Ok(merged)
}

fn rank(a: &Attribute) -> Option<Timestamp> {
    a.observed_at
}

/// Merges id-keyed result sets from several sources, sorted by id.
pub fn merge_result_sets(local: Vec<Entity>, remotes: Vec<Vec<Entity>>) -> Vec<Entity> {
    struct Slot {
        local: Option<Entity>,
        remote: Vec<Entity>,
    }
    let mut by_id: BTreeMap<EntityId, Slot> = BTreeMap::new();
    for e in local {
        let id = e.id.clone();
        by_id.entry(id).or_insert(Slot { local: None, remote: vec![] }).local = Some(e);
    }
    for set in remotes {
        for e in set {
            by_id
                .entry(e.id.clone())
                .or_insert(Slot { local: None, remote: vec![] })
                .remote
                .push(e);
        }
    }
    by_id
        .into_values()
        .filter_map(|slot| {
            // a remote reporting a different type for a known id is ignored
            let ty = slot.local.as_ref().or(slot.remote.first())?.entity_type.clone();
            let remote: Vec<_> = slot.remote.into_iter().filter(|e| e.entity_type == ty).collect();
            merge_entities(slot.local.as_ref(), &remote).ok()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(types: &[&str], pattern: Option<&str>, endpoint: &str) -> ContextSourceRegistration {
        ContextSourceRegistration {
            id: EntityId::ngsi("ContextSourceRegistration", "r1").unwrap(),
            tenant: Tenant::default(),
            covered_types: types.iter().map(|s| s.to_string()).collect(),
            covered_id_pattern: pattern.map(str::to_string),
            endpoint: endpoint.into(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }

    fn ent(name: &str, attrs: &[(&str, i64, Option<i64>)]) -> Entity {
        let mut e = Entity::new(EntityId::ngsi("Vehicle", name).unwrap(), "Vehicle");
        for (k, v, at) in attrs {
            let mut a = Attribute::property(*v);
            a.observed_at = at.map(Timestamp::from_millis);
            e = e.with(k, a);
        }
        e
    }

    #[test]
    fn registration_validation() {
        assert_eq!(reg(&["Vehicle"], None, "http://remote:8080").validate(), Ok(()));
        assert!(matches!(
            reg(&["Vehicle"], None, "ftp://remote").validate(),
            Err(FederationError::InvalidEndpoint(_))
        ));
        assert_eq!(reg(&[], None, "http://remote").validate(), Err(FederationError::NoCoveredTypes));
        let r = RegistrationRegistry::new();
        r.register(reg(&["Vehicle"], None, "http://a")).unwrap();
        assert!(matches!(
            r.register(reg(&["Vehicle"], None, "http://a")),
            Err(FederationError::AlreadyExists(_))
        ));
    }

    #[test]
    fn matching() {
        let regs = vec![reg(&["Vehicle"], Some("car"), "http://a")];
        let t = Tenant::default();
        let f = |ty: &str, scope| FederationFilter {
            entity_type: ty.into(),
            scope,
        };
        let car = EntityId::ngsi("Vehicle", "car1").unwrap();
        let bus = EntityId::ngsi("Vehicle", "bus1").unwrap();
        assert_eq!(match_registrations(&regs, &t, &f("Vehicle", IdScope::Id(car))).len(), 1);
        assert!(match_registrations(&regs, &t, &f("Vehicle", IdScope::Id(bus))).is_empty());
        assert!(match_registrations(&regs, &t, &f("Building", IdScope::Pattern(None))).is_empty());
        assert!(match_registrations(&regs, &Tenant::new("x").unwrap(), &f("Vehicle", IdScope::Pattern(None))).is_empty());
    }

    #[test]
    fn merge_rules() {
        let local = ent("a", &[("speed", 1, Some(1000)), ("only_local", 0, None)]);
        let remote = ent("a", &[("speed", 2, Some(2000)), ("only_remote", 0, None)]);
        let m = merge_entities(Some(&local), &[remote.clone()]).unwrap();
        assert_eq!(m.property("speed"), Some(&2.into()));
        assert_eq!(m.attributes.len(), 3);

        let tie = ent("a", &[("speed", 9, Some(1000))]);
        assert_eq!(merge_entities(Some(&local), &[tie.clone()]).unwrap().property("speed"), Some(&1.into()));
        let tie2 = ent("a", &[("speed", 7, Some(1000))]);
        assert_eq!(merge_entities(None, &[tie2, tie]).unwrap().property("speed"), Some(&7.into()));

        let timed = ent("a", &[("x", 1, Some(0))]);
        let untimed = ent("a", &[("x", 2, None)]);
        assert_eq!(merge_entities(Some(&untimed), &[timed]).unwrap().property("x"), Some(&1.into()));

        assert!(matches!(merge_entities(Some(&local), &[ent("b", &[])]), Err(ModelError::IdMismatch { .. })));
        assert_eq!(merge_entities(None, &[]), Err(ModelError::NothingToMerge));
        assert_eq!(merge_entities(Some(&m), &[m.clone()]).unwrap(), m);
    }

    #[test]
    fn result_set_union() {
        let merged = merge_result_sets(
            vec![ent("b", &[("v", 1, Some(1))])],
            vec![vec![ent("a", &[]), ent("b", &[("v", 2, Some(2))])]],
        );
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].id.local_name(), "a");
        assert_eq!(merged[1].property("v"), Some(&2.into()));
    }
}
