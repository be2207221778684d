//! Tenant-scoped in-memory entity store with a sequenced change log.
//!
//! Every accepted mutation is recorded as one or more [`ChangeEvent`]s whose
//! `seq` is gapless per tenant. The log append, the optional journal write,
//! the state mutation and listener fan-out all happen under the tenant's log
//! lock, so listeners observe events in commit order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    check_attr_name, serialize_entity, validate_entity, Attribute, Entity, EntityId, ModelError,
    ValidationReport,
};
use crate::time::Timestamp;

mod journal;
mod query;

pub use journal::{read_journal, Journal};
pub use query::QueryFilter;

pub const CREATED_MARKER: &str = "@created";
pub const DELETED_MARKER: &str = "@deleted";
pub const DEFAULT_PAGE_SIZE: usize = 1000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("entity {0} already exists")]
    AlreadyExists(EntityId),
    #[error("entity {0} not found")]
    NotFound(EntityId),
    #[error("entity failed validation")]
    ValidationFailed(ValidationReport),
    #[error("every attribute in the fragment was stale: {0:?}")]
    AllStale(Vec<String>),
    #[error("invalid tenant name `{0}`")]
    InvalidTenant(String),
    #[error("query filter is empty")]
    EmptyFilter,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("journal: {0}")]
    Journal(#[from] std::io::Error),
    #[error("journal line {line}: {reason}")]
    CorruptJournal { line: usize, reason: String },
}

/// Isolation namespace. The default tenant is the empty string.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Tenant(String);

impl Tenant {
    pub fn new(name: &str) -> Result<Self, StoreError> {
        if name.len() > 64 || name.contains('/') {
            return Err(StoreError::InvalidTenant(name.to_string()));
        }
        Ok(Tenant(name.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Tenant {
    type Error = StoreError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Tenant::new(&s)
    }
}

impl From<Tenant> for String {
    fn from(t: Tenant) -> String {
        t.0
    }
}

impl fmt::Display for Tenant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChangeEvent {
    pub seq: u64,
    pub tenant: Tenant,
    pub entity_id: EntityId,
    pub entity_type: String,
    pub attr_name: String,
    /// `None` for the synthetic `@created` / `@deleted` markers.
    pub attr: Option<Attribute>,
    pub committed_at: Timestamp,
}

impl ChangeEvent {
    pub fn is_synthetic(&self) -> bool {
        self.attr_name.starts_with('@')
    }
}

/// Receives committed events, in seq order per tenant, while the tenant's
/// log lock is held. Implementations must not block.
pub trait ChangeListener: Send + Sync {
    fn on_commit(&self, events: &[ChangeEvent]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchOutcome {
    pub events: Vec<ChangeEvent>,
    /// Attribute names rejected because their observedAt was older than the
    /// stored value.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ChangePage {
    pub events: Vec<ChangeEvent>,
    /// Pass as `after_seq` to fetch the next page; `None` when caught up.
    pub next_after: Option<u64>,
}

type Slot = Arc<Mutex<Option<Entity>>>;

#[derive(Default)]
struct TenantLog {
    events: Vec<ChangeEvent>,
    last_committed: Timestamp,
}

#[derive(Default)]
struct TenantState {
    entities: RwLock<HashMap<EntityId, Slot>>,
    log: Mutex<TenantLog>,
}

pub struct ContextStore {
    tenants: RwLock<HashMap<Tenant, Arc<TenantState>>>,
    journal: Option<Mutex<Journal>>,
    listeners: RwLock<Vec<Arc<dyn ChangeListener>>>,
    page_size: usize,
}

impl Default for ContextStore {
    fn default() -> Self {
        Self::new()
    }
}

struct PendingEvent {
    attr_name: String,
    attr: Option<Attribute>,
}

impl ContextStore {
    pub fn new() -> Self {
        ContextStore {
            tenants: RwLock::new(HashMap::new()),
            journal: None,
            listeners: RwLock::new(Vec::new()),
            page_size: DEFAULT_PAGE_SIZE,
        }
    }

    pub fn with_page_size(mut self, page_size: usize) -> Self {
        self.page_size = page_size.max(1);
        self
    }

    /// Opens (or creates) a journal file, replays it, and keeps appending to it.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let events = if path.exists() { read_journal(path)? } else { Vec::new() };
        let mut store = Self::replay(&events)?;
        store.journal = Some(Mutex::new(Journal::append_to(path)?));
        Ok(store)
    }

    /// Rebuilds a store from a change log.
    pub fn replay(events: &[ChangeEvent]) -> Result<Self, StoreError> {
        let store = Self::new();
        for ev in events {
            let state = store.tenant_state(&ev.tenant);
            let mut entities = state.entities.write().unwrap();
            match ev.attr_name.as_str() {
                CREATED_MARKER => {
                    entities.insert(
                        ev.entity_id.clone(),
                        Arc::new(Mutex::new(Some(Entity::new(ev.entity_id.clone(), ev.entity_type.clone())))),
                    );
                }
                DELETED_MARKER => {
                    entities.remove(&ev.entity_id);
                }
                name => {
                    let attr = ev.attr.clone().ok_or_else(|| StoreError::CorruptJournal {
                        line: ev.seq as usize,
                        reason: "attribute event without attr".into(),
                    })?;
                    let slot = entities.get(&ev.entity_id).ok_or_else(|| StoreError::CorruptJournal {
                        line: ev.seq as usize,
                        reason: format!("event for unknown entity {}", ev.entity_id),
                    })?;
                    let mut guard = slot.lock().unwrap();
                    if let Some(e) = guard.as_mut() {
                        e.attributes.insert(name.to_string(), attr);
                    }
                }
            }
            drop(entities);
            let mut log = state.log.lock().unwrap();
            let expected = log.events.len() as u64 + 1;
            if ev.seq != expected {
                return Err(StoreError::CorruptJournal {
                    line: ev.seq as usize,
                    reason: format!("seq gap: expected {expected}, found {}", ev.seq),
                });
            }
            log.last_committed = log.last_committed.max(ev.committed_at);
            log.events.push(ev.clone());
        }
        Ok(store)
    }

    pub fn add_listener(&self, listener: Arc<dyn ChangeListener>) {
        self.listeners.write().unwrap().push(listener);
    }

    fn tenant_state(&self, tenant: &Tenant) -> Arc<TenantState> {
        if let Some(s) = self.tenants.read().unwrap().get(tenant) {
            return s.clone();
        }
        self.tenants
            .write()
            .unwrap()
            .entry(tenant.clone())
            .or_default()
            .clone()
    }

    fn existing_tenant(&self, tenant: &Tenant) -> Option<Arc<TenantState>> {
        self.tenants.read().unwrap().get(tenant).cloned()
    }

    /// Assigns seqs, journals, and publishes. `apply` runs after the events
    /// are durable in the log and before the log lock is released.
    fn commit(
        &self,
        tenant: &Tenant,
        state: &TenantState,
        entity: (&EntityId, &str),
        pending: Vec<PendingEvent>,
        apply: impl FnOnce(),
    ) -> Result<Vec<ChangeEvent>, StoreError> {
        let mut log = state.log.lock().unwrap();
        let committed_at = Timestamp::now().max(log.last_committed);
        let first = log.events.len() as u64 + 1;
        let events: Vec<ChangeEvent> = pending
            .into_iter()
            .enumerate()
            .map(|(i, p)| ChangeEvent {
                seq: first + i as u64,
                tenant: tenant.clone(),
                entity_id: entity.0.clone(),
                entity_type: entity.1.to_string(),
                attr_name: p.attr_name,
                attr: p.attr,
                committed_at,
            })
            .collect();
        if let Some(j) = &self.journal {
            j.lock().unwrap().append(&events)?;
        }
        apply();
        log.last_committed = committed_at;
        log.events.extend(events.iter().cloned());
        for l in self.listeners.read().unwrap().iter() {
            l.on_commit(&events);
        }
        Ok(events)
    }

    /// Creates an entity; returns the seq of its first change event.
    pub fn create_entity(&self, tenant: &Tenant, entity: Entity) -> Result<u64, StoreError> {
        let report = validate_entity(&entity);
        if !report.is_valid() {
            return Err(StoreError::ValidationFailed(report));
        }
        for name in entity.attributes.keys() {
            check_attr_name(name)?;
        }
        let state = self.tenant_state(tenant);
        let mut entities = state.entities.write().unwrap();
        if entities.contains_key(&entity.id) {
            return Err(StoreError::AlreadyExists(entity.id));
        }
        let mut pending = vec![PendingEvent {
            attr_name: CREATED_MARKER.into(),
            attr: None,
        }];
        pending.extend(entity.attributes.iter().map(|(n, a)| PendingEvent {
            attr_name: n.clone(),
            attr: Some(a.clone()),
        }));
        let id = entity.id.clone();
        let ty = entity.entity_type.clone();
        let events = self.commit(tenant, &state, (&id, &ty), pending, || {
            entities.insert(id.clone(), Arc::new(Mutex::new(Some(entity))));
        })?;
        Ok(events[0].seq)
    }

    pub fn get_entity(&self, tenant: &Tenant, id: &EntityId) -> Result<Entity, StoreError> {
        self.existing_tenant(tenant)
            .and_then(|s| s.entities.read().unwrap().get(id).cloned())
            .and_then(|slot| slot.lock().unwrap().clone())
            .ok_or_else(|| StoreError::NotFound(id.clone()))
    }

    /// All entities of a tenant, ordered by id.
    pub fn all_entities(&self, tenant: &Tenant) -> Vec<Entity> {
        let Some(state) = self.existing_tenant(tenant) else {
            return Vec::new();
        };
        let slots: Vec<Slot> = state.entities.read().unwrap().values().cloned().collect();
        let mut out: Vec<Entity> = slots.iter().filter_map(|s| s.lock().unwrap().clone()).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn query_entities(&self, tenant: &Tenant, filter: &QueryFilter) -> Result<Vec<Entity>, StoreError> {
        if filter.is_empty() {
            return Err(StoreError::EmptyFilter);
        }
        Ok(self
            .all_entities(tenant)
            .into_iter()
            .filter(|e| filter.matches(e))
            .collect())
    }

    /// Last-write-wins upsert keyed on observedAt. Attributes without
    /// observedAt are stamped with the receipt time before comparison.
    pub fn patch_attributes(
        &self,
        tenant: &Tenant,
        id: &EntityId,
        fragment: BTreeMap<String, Attribute>,
    ) -> Result<PatchOutcome, StoreError> {
        for name in fragment.keys() {
            check_attr_name(name)?;
        }
        let received = Timestamp::now();
        let slot = self
            .existing_tenant(tenant)
            .and_then(|s| s.entities.read().unwrap().get(id).cloned())
            .ok_or_else(|| StoreError::NotFound(id.clone()))?;
        let state = self.tenant_state(tenant);
        let mut guard = slot.lock().unwrap();
        let entity = guard.as_mut().ok_or_else(|| StoreError::NotFound(id.clone()))?;
        let mut accepted = Vec::new();
        let mut skipped = Vec::new();
        for (name, mut attr) in fragment {
            let incoming = *attr.observed_at.get_or_insert(received);
            let stored = entity.attributes.get(&name).and_then(|a| a.observed_at);
            if stored.is_some_and(|s| incoming < s) {
                skipped.push(name);
            } else {
                accepted.push((name, attr));
            }
        }
        if accepted.is_empty() {
            return Err(StoreError::AllStale(skipped));
        }
        let pending = accepted
            .iter()
            .map(|(n, a)| PendingEvent {
                attr_name: n.clone(),
                attr: Some(a.clone()),
            })
            .collect();
        let ty = entity.entity_type.clone();
        let events = self.commit(tenant, &state, (id, &ty), pending, || {
            for (n, a) in accepted {
                entity.attributes.insert(n, a);
            }
        })?;
        Ok(PatchOutcome { events, skipped })
    }

    pub fn delete_entity(&self, tenant: &Tenant, id: &EntityId) -> Result<(), StoreError> {
        let state = self
            .existing_tenant(tenant)
            .ok_or_else(|| StoreError::NotFound(id.clone()))?;
        let mut entities = state.entities.write().unwrap();
        let slot = entities.get(id).cloned().ok_or_else(|| StoreError::NotFound(id.clone()))?;
        let mut guard = slot.lock().unwrap();
        let ty = guard
            .as_ref()
            .map(|e| e.entity_type.clone())
            .ok_or_else(|| StoreError::NotFound(id.clone()))?;
        let pending = vec![PendingEvent {
            attr_name: DELETED_MARKER.into(),
            attr: None,
        }];
        self.commit(tenant, &state, (id, &ty), pending, || {
            *guard = None;
            entities.remove(id);
        })?;
        Ok(())
    }

    /// Events with `seq > after_seq`, at most one page.
    pub fn changes_since(&self, tenant: &Tenant, after_seq: u64) -> ChangePage {
        self.changes_page(tenant, after_seq, self.page_size)
    }

    pub fn changes_page(&self, tenant: &Tenant, after_seq: u64, limit: usize) -> ChangePage {
        let Some(state) = self.existing_tenant(tenant) else {
            return ChangePage { events: Vec::new(), next_after: None };
        };
        let log = state.log.lock().unwrap();
        let start = (after_seq as usize).min(log.events.len());
        let end = start.saturating_add(limit.max(1)).min(log.events.len());
        let events = log.events[start..end].to_vec();
        let next_after = (end < log.events.len()).then(|| end as u64);
        ChangePage { events, next_after }
    }

    pub fn latest_seq(&self, tenant: &Tenant) -> u64 {
        self.existing_tenant(tenant)
            .map(|s| s.log.lock().unwrap().events.len() as u64)
            .unwrap_or(0)
    }

    /// Every event of every tenant, tenants in name order.
    pub fn full_log(&self) -> Vec<ChangeEvent> {
        let mut tenants: Vec<(Tenant, Arc<TenantState>)> = self
            .tenants
            .read()
            .unwrap()
            .iter()
            .map(|(t, s)| (t.clone(), s.clone()))
            .collect();
        tenants.sort_by(|a, b| a.0.cmp(&b.0));
        tenants
            .iter()
            .flat_map(|(_, s)| s.log.lock().unwrap().events.clone())
            .collect()
    }

    pub fn tenants(&self) -> Vec<Tenant> {
        let mut t: Vec<Tenant> = self.tenants.read().unwrap().keys().cloned().collect();
        t.sort();
        t
    }

    /// Deterministic serialization of the full state, for equality checks.
    pub fn dump_state(&self) -> String {
        let mut out = String::new();
        for tenant in self.tenants() {
            for e in self.all_entities(&tenant) {
                out.push_str(&format!("{:?}\t", tenant.as_str()));
                out.push_str(&serialize_entity(&e));
                out.push('\n');
            }
        }
        out
    }

    pub fn flush(&self) -> Result<(), StoreError> {
        if let Some(j) = &self.journal {
            j.lock().unwrap().flush()?;
        }
        Ok(())
    }
}
