//! Subscriptions, event matching and notification documents.
//!
//! Transport (HTTP POST, MQTT publish) lives in the service crate; this
//! module owns everything that can be decided without I/O.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::model::dtdo::{has_mqtt_wildcard, is_mqtt_endpoint};
use crate::model::wire::entity_to_value;
use crate::par::{self, ExecMode};
use crate::store::{ChangeEvent, Tenant};
use crate::{Attribute, Entity, EntityId, Timestamp};

pub const DEFAULT_QUEUE_CAPACITY: usize = 10_000;
pub const CREATED: &str = "@created";
pub const DELETED: &str = "@deleted";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NotifyError {
    #[error("subscription `{0}` already exists")]
    AlreadyExists(String),
    #[error("subscription `{0}` not found")]
    NotFound(String),
    #[error("invalid subscription ({code}): {message}")]
    InvalidTarget { code: &'static str, message: String },
    #[error("no events to notify")]
    EmptyBatch,
}

fn invalid(code: &'static str, message: impl Into<String>) -> NotifyError {
    NotifyError::InvalidTarget {
        code,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Http { uri: String },
    Mqtt { endpoint: String, topic: String, qos: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub id: EntityId,
    pub tenant: Tenant,
    pub watched_types: Option<BTreeSet<String>>,
    pub watched_ids: Option<BTreeSet<EntityId>>,
    /// Empty means every attribute.
    pub watched_attributes: BTreeSet<String>,
    pub target: Target,
    pub throttling_ms: u64,
}

pub fn default_topic(tenant: &Tenant, subscription: &EntityId) -> String {
    format!("dtds/{tenant}/notify/{}", subscription.local_name())
}

impl Subscription {
    pub fn validate(&self) -> Result<(), NotifyError> {
        let empty_types = self.watched_types.as_ref().is_none_or(BTreeSet::is_empty);
        let empty_ids = self.watched_ids.as_ref().is_none_or(BTreeSet::is_empty);
        if empty_types && empty_ids {
            return Err(invalid("MISSING_SCOPE", "watch at least one entity type or id"));
        }
        match &self.target {
            Target::Http { uri } => {
                if !(uri.starts_with("http://") || uri.starts_with("https://")) || uri.len() < 10 {
                    return Err(invalid("BAD_SCHEME", format!("`{uri}` is not an http(s) URI")));
                }
            }
            Target::Mqtt { endpoint, topic, qos } => {
                if !is_mqtt_endpoint(endpoint) {
                    return Err(invalid("BAD_SCHEME", format!("`{endpoint}` is not an mqtt://host:port endpoint")));
                }
                if topic.is_empty() || has_mqtt_wildcard(topic) {
                    return Err(invalid("WILDCARD_TOPIC", format!("topic `{topic}` must be concrete")));
                }
                if *qos > 1 {
                    return Err(invalid("BAD_QOS", "qos must be 0 or 1"));
                }
            }
        }
        Ok(())
    }

    /// Parses the subscription document accepted by the HTTP API. `fresh_id`
    /// supplies an id when the document has none.
    pub fn from_wire(tenant: Tenant, doc: &Value, fresh_id: impl FnOnce() -> EntityId) -> Result<Self, NotifyError> {
        let obj = doc
            .as_object()
            .ok_or_else(|| invalid("MALFORMED", "subscription must be a JSON object"))?;
        let id = match obj.get("id") {
            Some(Value::String(s)) => EntityId::parse(s).map_err(|e| invalid("MALFORMED", e.to_string()))?,
            Some(_) => return Err(invalid("MALFORMED", "id must be a string")),
            None => fresh_id(),
        };
        let mut types = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for sel in obj.get("entities").and_then(Value::as_array).into_iter().flatten() {
            match (sel.get("id").and_then(Value::as_str), sel.get("type").and_then(Value::as_str)) {
                (Some(i), _) => {
                    ids.insert(EntityId::parse(i).map_err(|e| invalid("MALFORMED", e.to_string()))?);
                }
                (None, Some(t)) => {
                    types.insert(t.to_string());
                }
                (None, None) => return Err(invalid("MALFORMED", "entity selector needs id or type")),
            }
        }
        let watched_attributes = match obj.get("watchedAttributes") {
            None | Some(Value::Null) => BTreeSet::new(),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<_>>()
                .ok_or_else(|| invalid("MALFORMED", "watchedAttributes must be strings"))?,
            Some(_) => return Err(invalid("MALFORMED", "watchedAttributes must be an array")),
        };
        let throttling_ms = match obj.get("throttlingMs") {
            None => 0,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| invalid("MALFORMED", "throttlingMs must be a non-negative integer"))?,
        };
        let notification = obj
            .get("notification")
            .ok_or_else(|| invalid("MISSING_TARGET", "notification target required"))?;
        let target = if let Some(uri) = notification.pointer("/endpoint/uri").and_then(Value::as_str) {
            Target::Http { uri: uri.to_string() }
        } else if let Some(m) = notification.get("mqtt") {
            let endpoint = m
                .get("endpoint")
                .and_then(Value::as_str)
                .ok_or_else(|| invalid("MISSING_TARGET", "mqtt.endpoint required"))?;
            let qos = match m.get("qos") {
                None => 0,
                Some(q) => q.as_u64().filter(|q| *q <= 1).ok_or_else(|| invalid("BAD_QOS", "qos must be 0 or 1"))? as u8,
            };
            Target::Mqtt {
                endpoint: endpoint.to_string(),
                topic: m
                    .get("topic")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| default_topic(&tenant, &id)),
                qos,
            }
        } else {
            return Err(invalid("MISSING_TARGET", "notification needs endpoint.uri or mqtt"));
        };
        let sub = Subscription {
            id,
            tenant,
            watched_types: (!types.is_empty()).then_some(types),
            watched_ids: (!ids.is_empty()).then_some(ids),
            watched_attributes,
            target,
            throttling_ms,
        };
        sub.validate()?;
        Ok(sub)
    }

    pub fn to_wire(&self) -> Value {
        let mut entities: Vec<Value> = Vec::new();
        for t in self.watched_types.iter().flatten() {
            entities.push(json!({ "type": t }));
        }
        for i in self.watched_ids.iter().flatten() {
            entities.push(json!({ "id": i }));
        }
        let notification = match &self.target {
            Target::Http { uri } => json!({ "endpoint": { "uri": uri } }),
            Target::Mqtt { endpoint, topic, qos } => {
                json!({ "mqtt": { "endpoint": endpoint, "topic": topic, "qos": qos } })
            }
        };
        json!({
            "id": self.id,
            "type": "Subscription",
            "entities": entities,
            "watchedAttributes": self.watched_attributes,
            "notification": notification,
            "throttlingMs": self.throttling_ms,
        })
    }
}

pub fn matches(sub: &Subscription, ev: &ChangeEvent) -> bool {
    sub.tenant == ev.tenant
        && sub.watched_ids.as_ref().is_none_or(|ids| ids.contains(&ev.entity_id))
        && sub.watched_types.as_ref().is_none_or(|ts| ts.contains(&ev.entity_type))
        && if ev.is_synthetic() {
            sub.watched_attributes.is_empty()
        } else {
            sub.watched_attributes.is_empty() || sub.watched_attributes.contains(&ev.attr_name)
        }
}

pub fn match_subscriptions<'a>(event: &ChangeEvent, subs: &'a [Subscription]) -> Vec<&'a Subscription> {
    subs.iter().filter(|s| matches(s, event)).collect()
}

/// Indices of matching subscriptions for every event.
pub fn match_batch(events: &[ChangeEvent], subs: &[Subscription], mode: ExecMode) -> Vec<Vec<usize>> {
    par::map(events, mode, |ev| {
        subs.iter()
            .enumerate()
            .filter(|(_, s)| matches(s, ev))
            .map(|(i, _)| i)
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Notification {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub subscription_id: EntityId,
    pub notified_at: Timestamp,
    pub data: Vec<Value>,
}

impl Notification {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("notification serialization")
    }
}

struct Fragment {
    entity_type: String,
    attrs: BTreeMap<String, Attribute>,
    deleted: bool,
}

/// One fragment per entity in order of first appearance, carrying the newest
/// value of each changed attribute. A deletion that is not followed by a
/// re-creation yields `{"id", "type", "@deleted": true}`.
pub fn build_notification(subscription_id: &EntityId, events: &[ChangeEvent]) -> Result<Notification, NotifyError> {
    if events.is_empty() {
        return Err(NotifyError::EmptyBatch);
    }
    let mut order: Vec<&EntityId> = Vec::new();
    let mut frags: HashMap<&EntityId, Fragment> = HashMap::new();
    for ev in events {
        let frag = frags.entry(&ev.entity_id).or_insert_with(|| {
            order.push(&ev.entity_id);
            Fragment {
                entity_type: ev.entity_type.clone(),
                attrs: BTreeMap::new(),
                deleted: false,
            }
        });
        match (ev.attr_name.as_str(), &ev.attr) {
            (DELETED, _) => {
                frag.deleted = true;
                frag.attrs.clear();
            }
            (CREATED, _) => frag.deleted = false,
            (name, Some(attr)) => {
                frag.deleted = false;
                frag.attrs.insert(name.to_string(), attr.clone());
            }
            (_, None) => {}
        }
    }
    let data = order
        .into_iter()
        .map(|id| {
            let f = frags.remove(id).expect("fragment for every ordered id");
            let mut v = entity_to_value(&Entity {
                id: id.clone(),
                entity_type: f.entity_type,
                attributes: f.attrs,
            });
            if f.deleted {
                if let Value::Object(m) = &mut v {
                    m.insert(DELETED.to_string(), Value::Bool(true));
                }
            }
            v
        })
        .collect();
    Ok(Notification {
        id: format!("urn:ngsi-ld:Notification:{}", uuid::Uuid::new_v4()),
        kind: "Notification".to_string(),
        subscription_id: subscription_id.clone(),
        notified_at: Timestamp::now(),
        data,
    })
}

/// Strips the notification envelope to `id -> fragment` for consumers.
pub fn fragments_by_id(n: &Notification) -> BTreeMap<String, Map<String, Value>> {
    n.data
        .iter()
        .filter_map(|v| {
            let m = v.as_object()?;
            Some((m.get("id")?.as_str()?.to_string(), m.clone()))
        })
        .collect()
}

/// Bounded FIFO that evicts the oldest entry when full.
#[derive(Debug)]
pub struct EventQueue {
    items: VecDeque<ChangeEvent>,
    capacity: usize,
    overflow: u64,
}

impl EventQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        EventQueue {
            items: VecDeque::new(),
            capacity,
            overflow: 0,
        }
    }

    pub fn push(&mut self, ev: ChangeEvent) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
            self.overflow += 1;
        }
        self.items.push_back(ev);
    }

    pub fn drain(&mut self) -> Vec<ChangeEvent> {
        self.items.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn overflow(&self) -> u64 {
        self.overflow
    }
}

impl Default for EventQueue {
    fn default() -> Self {
        EventQueue::new(DEFAULT_QUEUE_CAPACITY)
    }
}

/// Exponential backoff between delivery attempts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub base_ms: u64,
    pub factor: u64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_ms: 100,
            factor: 2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `n` (1-based); zero for the first attempt.
    pub fn delay_before(&self, attempt: u32) -> u64 {
        if attempt <= 1 {
            0
        } else {
            self.base_ms * self.factor.pow(attempt - 2)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryResult {
    Ok,
    Retriable,
    Dropped,
}

#[derive(Default)]
pub struct SubscriptionRegistry {
    subs: RwLock<BTreeMap<(Tenant, EntityId), Subscription>>,
}

impl SubscriptionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&self, sub: Subscription) -> Result<EntityId, NotifyError> {
        sub.validate()?;
        let mut subs = self.subs.write().unwrap();
        let key = (sub.tenant.clone(), sub.id.clone());
        if subs.contains_key(&key) {
            return Err(NotifyError::AlreadyExists(sub.id.to_string()));
        }
        let id = sub.id.clone();
        subs.insert(key, sub);
        Ok(id)
    }

    pub fn delete(&self, tenant: &Tenant, id: &EntityId) -> Result<Subscription, NotifyError> {
        self.subs
            .write()
            .unwrap()
            .remove(&(tenant.clone(), id.clone()))
            .ok_or_else(|| NotifyError::NotFound(id.to_string()))
    }

    pub fn get(&self, tenant: &Tenant, id: &EntityId) -> Option<Subscription> {
        self.subs.read().unwrap().get(&(tenant.clone(), id.clone())).cloned()
    }

    pub fn list(&self, tenant: &Tenant) -> Vec<Subscription> {
        self.subs
            .read()
            .unwrap()
            .iter()
            .filter(|((t, _), _)| t == tenant)
            .map(|(_, s)| s.clone())
            .collect()
    }

    /// Ids of subscriptions matching `ev`.
    pub fn matching(&self, ev: &ChangeEvent) -> Vec<EntityId> {
        self.subs
            .read()
            .unwrap()
            .iter()
            .filter(|(_, s)| matches(s, ev))
            .map(|((_, id), _)| id.clone())
            .collect()
    }
}
