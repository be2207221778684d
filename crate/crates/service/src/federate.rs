//! Forwarding reads to registered context sources.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use dtds_core::federation::{
    merge_entities, merge_result_sets, ContextSourceRegistration, FederationFilter, IdScope, RegistrationRegistry,
};
use dtds_core::model::wire::entity_from_value;
use dtds_core::store::{ContextStore, QueryFilter, StoreError, Tenant};
use dtds_core::{Entity, EntityId};
use futures::future::join_all;
use reqwest::{StatusCode, Url};
use serde_json::Value;

pub const WARNING_HEADER: &str = "X-DTDS-Warning";

/// A federated result with the sources that could not contribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Federated<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FederatedGetError {
    NotFound(Vec<String>),
    /// Nothing found locally and every matching source failed.
    Unavailable(Vec<String>),
    Store(String),
}

enum Remote<T> {
    Found(T),
    Missing,
    Failed(String),
}

pub struct Federator {
    registry: Arc<RegistrationRegistry>,
    http: reqwest::Client,
}

impl Federator {
    pub fn new(registry: Arc<RegistrationRegistry>) -> Self {
        Federator {
            registry,
            http: reqwest::Client::new(),
        }
    }

    pub fn registry(&self) -> &RegistrationRegistry {
        &self.registry
    }

    fn entity_url(reg: &ContextSourceRegistration, id: &EntityId) -> Option<Url> {
        let mut url = Url::parse(&format!("{}/ngsi-ld/v1/entities", reg.base_url())).ok()?;
        url.path_segments_mut().ok()?.push(id.as_str());
        url.query_pairs_mut().append_pair("local", "true");
        Some(url)
    }

    async fn fetch(&self, reg: &ContextSourceRegistration, tenant: &Tenant, url: Url, cap: Duration) -> Remote<Value> {
        let limit = cap.min(Duration::from_millis(reg.timeout_ms));
        let req = self.http.get(url).header("NGSILD-Tenant", tenant.as_str()).timeout(limit).send();
        let resp = match req.await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Remote::Failed(format!("FEDERATION_TIMEOUT:{}", reg.id)),
            Err(_) => return Remote::Failed(format!("FEDERATION_UNREACHABLE:{}", reg.id)),
        };
        match resp.status() {
            StatusCode::OK => match resp.json::<Value>().await {
                Ok(v) => Remote::Found(v),
                Err(_) => Remote::Failed(format!("FEDERATION_MALFORMED:{}", reg.id)),
            },
            StatusCode::NOT_FOUND => Remote::Missing,
            s => Remote::Failed(format!("FEDERATION_STATUS_{}:{}", s.as_u16(), reg.id)),
        }
    }

    async fn fetch_entity(
        &self,
        reg: &ContextSourceRegistration,
        tenant: &Tenant,
        id: &EntityId,
        cap: Duration,
    ) -> Remote<Entity> {
        let Some(url) = Self::entity_url(reg, id) else {
            return Remote::Failed(format!("FEDERATION_UNREACHABLE:{}", reg.id));
        };
        match self.fetch(reg, tenant, url, cap).await {
            Remote::Found(v) => match entity_from_value(v) {
                Ok(e) if e.id == *id => Remote::Found(e),
                _ => Remote::Failed(format!("FEDERATION_MALFORMED:{}", reg.id)),
            },
            Remote::Missing => Remote::Missing,
            Remote::Failed(w) => Remote::Failed(w),
        }
    }

    /// Local entity merged with every matching source. `type_hint` selects
    /// registrations; without it the id's type segment is used.
    pub async fn get(
        &self,
        store: &ContextStore,
        tenant: &Tenant,
        id: &EntityId,
        type_hint: Option<&str>,
        local_only: bool,
        cap: Duration,
    ) -> Result<Federated<Entity>, FederatedGetError> {
        let local = match store.get_entity(tenant, id) {
            Ok(e) => Some(e),
            Err(StoreError::NotFound(_)) => None,
            Err(e) => return Err(FederatedGetError::Store(e.to_string())),
        };
        let regs = if local_only {
            Vec::new()
        } else {
            let entity_type = local
                .as_ref()
                .map(|e| e.entity_type.clone())
                .or_else(|| type_hint.map(str::to_string))
                .unwrap_or_else(|| id.type_segment().to_string());
            self.registry.matching(
                tenant,
                &FederationFilter {
                    entity_type,
                    scope: IdScope::Id(id.clone()),
                },
            )
        };
        if regs.is_empty() {
            return local
                .map(|value| Federated { value, warnings: Vec::new() })
                .ok_or(FederatedGetError::NotFound(Vec::new()));
        }
        let results = join_all(regs.iter().map(|r| self.fetch_entity(r, tenant, id, cap))).await;
        let mut remotes = Vec::new();
        let mut warnings = Vec::new();
        let mut failed = 0;
        for r in results {
            match r {
                Remote::Found(e) => remotes.push(e),
                Remote::Missing => {}
                Remote::Failed(w) => {
                    failed += 1;
                    warnings.push(w);
                }
            }
        }
        if local.is_none() && remotes.is_empty() {
            return Err(if failed == regs.len() {
                FederatedGetError::Unavailable(warnings)
            } else {
                FederatedGetError::NotFound(warnings)
            });
        }
        let value = merge_entities(local.as_ref(), &remotes).map_err(|e| FederatedGetError::Store(e.to_string()))?;
        Ok(Federated { value, warnings })
    }

    /// Local query plus every source registered for the filter's type. A
    /// filter without a type is answered locally.
    pub async fn query(
        &self,
        store: &ContextStore,
        tenant: &Tenant,
        filter: &QueryFilter,
        local_only: bool,
        cap: Duration,
    ) -> Result<Federated<Vec<Entity>>, StoreError> {
        let local = store.query_entities(tenant, filter)?;
        let regs = match (&filter.entity_type, local_only) {
            (Some(t), false) => self.registry.matching(
                tenant,
                &FederationFilter {
                    entity_type: t.clone(),
                    scope: IdScope::Pattern(filter.id_pattern.clone()),
                },
            ),
            _ => Vec::new(),
        };
        if regs.is_empty() {
            return Ok(Federated {
                value: local,
                warnings: Vec::new(),
            });
        }
        let calls = regs.iter().map(|reg| async move {
            let Ok(mut url) = Url::parse(&format!("{}/ngsi-ld/v1/entities", reg.base_url())) else {
                return Remote::Failed(format!("FEDERATION_UNREACHABLE:{}", reg.id));
            };
            {
                let mut q = url.query_pairs_mut();
                if let Some(t) = &filter.entity_type {
                    q.append_pair("type", t);
                }
                if let Some(p) = &filter.id_pattern {
                    q.append_pair("idPattern", p);
                }
                if let Some(b) = filter.bbox {
                    q.append_pair("bbox", &b.map(|x| x.to_string()).join(","));
                }
                if let Some((name, target)) = &filter.relationship {
                    q.append_pair("relName", name);
                    q.append_pair("relTarget", target.as_str());
                }
                q.append_pair("local", "true");
            }
            match self.fetch(reg, tenant, url, cap).await {
                Remote::Found(Value::Array(items)) => {
                    let parsed: Result<Vec<Entity>, _> = items.into_iter().map(entity_from_value).collect();
                    match parsed {
                        Ok(v) => Remote::Found(v.into_iter().filter(|e| filter.matches(e)).collect()),
                        Err(_) => Remote::Failed(format!("FEDERATION_MALFORMED:{}", reg.id)),
                    }
                }
                Remote::Found(_) => Remote::Failed(format!("FEDERATION_MALFORMED:{}", reg.id)),
                Remote::Missing => Remote::Found(Vec::new()),
                Remote::Failed(w) => Remote::Failed(w),
            }
        });
        let mut remotes = Vec::new();
        let mut warnings = Vec::new();
        for r in join_all(calls).await {
            match r {
                Remote::Found(v) => remotes.push(v),
                Remote::Missing => {}
                Remote::Failed(w) => warnings.push(w),
            }
        }
        Ok(Federated {
            value: merge_result_sets(local, remotes),
            warnings,
        })
    }

    /// Source entities for context bindings: local first, otherwise the
    /// named registration or every source covering the id's type. The whole
    /// lookup is bounded by `total`; each remote call by `per_source`.
    pub async fn snapshots(
        &self,
        store: &ContextStore,
        tenant: &Tenant,
        sources: &[(EntityId, Option<EntityId>)],
        total: Duration,
        per_source: Duration,
    ) -> (HashMap<EntityId, Entity>, Vec<String>) {
        let mut found = HashMap::new();
        let mut remote_calls = Vec::new();
        for (id, via) in sources {
            if let Ok(e) = store.get_entity(tenant, id) {
                found.insert(id.clone(), e);
                continue;
            }
            let regs: Vec<ContextSourceRegistration> = match via {
                Some(reg_id) => self.registry.list(tenant).into_iter().filter(|r| &r.id == reg_id).collect(),
                None => self.registry.matching(
                    tenant,
                    &FederationFilter {
                        entity_type: id.type_segment().to_string(),
                        scope: IdScope::Id(id.clone()),
                    },
                ),
            };
            if regs.is_empty() {
                continue;
            }
            remote_calls.push(async move {
                let results = join_all(regs.iter().map(|r| self.fetch_entity(r, tenant, id, per_source))).await;
                let mut remotes = Vec::new();
                let mut warnings = Vec::new();
                for r in results {
                    match r {
                        Remote::Found(e) => remotes.push(e),
                        Remote::Missing => {}
                        Remote::Failed(w) => warnings.push(w),
                    }
                }
                let merged = (!remotes.is_empty()).then(|| merge_entities(None, &remotes).ok()).flatten();
                (id.clone(), merged, warnings)
            });
        }
        let mut warnings = Vec::new();
        let n = remote_calls.len();
        match tokio::time::timeout(total, join_all(remote_calls)).await {
            Ok(results) => {
                for (id, merged, w) in results {
                    warnings.extend(w);
                    if let Some(e) = merged {
                        found.insert(id, e);
                    }
                }
            }
            Err(_) => warnings.push(format!("SNAPSHOT_BUDGET_EXCEEDED:{n}")),
        }
        (found, warnings)
    }
}
