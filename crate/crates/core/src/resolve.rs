//! Scene resolution: the fused, client-filtered descriptor tree.
//!
//! Resolution is split in two so that the synchronous part stays pure:
//! [`resolve_scene`] builds the tree with empty context snapshots, and the
//! caller dereferences [`ResolvedScene::binding_sources`] (locally or through
//! federation) and hands the results to [`ResolvedScene::fill_snapshots`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::render_access_url;
use crate::model::dtdo::{attrs, kinds, ChannelDescriptor, ContextReference, RepositoryDescriptor};
use crate::model::scene::validate_scene_graph;
use crate::model::validate::{Severity, ValidationReport};
use crate::model::ModelError;
use crate::{Attribute, Entity, EntityId, Timestamp};

/// Relationships followed when collecting a scene's entities.
const CLOSURE_EDGES: [&str; 7] = [
    attrs::HAS_ASSET,
    attrs::CHILD_ASSET,
    attrs::PARENT_ASSET,
    attrs::HAS_REPRESENTATION,
    attrs::HAS_CONTEXT_REF,
    attrs::SYNC_CHANNEL,
    attrs::IN_REPOSITORY,
];

/// Validation codes that degrade to warnings during resolution.
const DEGRADABLE: [&str; 3] = ["RR_UNRESOLVED", "REPO_UNRESOLVED", "ACM_UNRESOLVED"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResolveError {
    #[error("scene `{0}` not found")]
    SceneNotFound(String),
    #[error("scene is invalid ({} errors)", .0.error_count())]
    SceneInvalid(ValidationReport),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientCapabilities {
    pub formats: Option<BTreeSet<String>>,
    pub modalities: Option<BTreeSet<String>>,
}

fn tag_set(list: Option<&str>) -> Option<BTreeSet<String>> {
    list.map(|l| {
        l.split(',')
            .map(|t| t.trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect()
    })
}

impl ClientCapabilities {
    /// Parses comma-separated tag lists; `None` accepts everything.
    pub fn from_lists(formats: Option<&str>, modalities: Option<&str>) -> Self {
        ClientCapabilities {
            formats: tag_set(formats),
            modalities: tag_set(modalities),
        }
    }

    pub fn accepts(&self, format: &str, modality: &str) -> bool {
        self.formats.as_ref().is_none_or(|f| f.contains(&format.to_lowercase()))
            && self.modalities.as_ref().is_none_or(|m| m.contains(&modality.to_lowercase()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetKind {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResolvedRepresentation {
    pub id: EntityId,
    pub modality: String,
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lod: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<u64>,
    /// access method name -> URL
    pub fetch_urls: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContextBinding {
    pub context_ref: EntityId,
    pub local_attr: String,
    pub source_entity: EntityId,
    pub remote_attr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via_context_source: Option<EntityId>,
    pub channels: Vec<ChannelDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Attribute>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResolvedAsset {
    pub entity_id: EntityId,
    pub kind: AssetKind,
    /// First-order pose attributes (`position`, `pose`, `orientation`).
    #[serde(default)]
    pub pose: BTreeMap<String, Attribute>,
    #[serde(default)]
    pub representations: Vec<ResolvedRepresentation>,
    #[serde(default)]
    pub context_bindings: Vec<ContextBinding>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<ChannelDescriptor>,
    #[serde(default)]
    pub children: Vec<ResolvedAsset>,
    /// Set on every occurrence after the first of an asset reachable along
    /// several paths; such stubs carry no payload or children.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResolvedScene {
    pub scene_id: EntityId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub resolved_at: Timestamp,
    pub assets: Vec<ResolvedAsset>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ResolvedScene {
    fn walk<'a>(&'a self, mut f: impl FnMut(Option<&'a ResolvedAsset>, &'a ResolvedAsset)) {
        let mut stack: Vec<(Option<&ResolvedAsset>, &ResolvedAsset)> =
            self.assets.iter().rev().map(|a| (None, a)).collect();
        while let Some((parent, node)) = stack.pop() {
            f(parent, node);
            stack.extend(node.children.iter().rev().map(|c| (Some(node), c)));
        }
    }

    /// Distinct asset ids in the tree.
    pub fn node_ids(&self) -> BTreeSet<EntityId> {
        let mut out = BTreeSet::new();
        self.walk(|_, n| {
            out.insert(n.entity_id.clone());
        });
        out
    }

    /// Distinct (parent, child) edges; roots hang off the scene id.
    pub fn edges(&self) -> BTreeSet<(EntityId, EntityId)> {
        let mut out = BTreeSet::new();
        self.walk(|p, n| {
            let parent = p.map_or(&self.scene_id, |p| &p.entity_id);
            out.insert((parent.clone(), n.entity_id.clone()));
        });
        out
    }

    pub fn representation_ids(&self) -> BTreeSet<(EntityId, EntityId)> {
        let mut out = BTreeSet::new();
        self.walk(|_, n| {
            for r in &n.representations {
                out.insert((n.entity_id.clone(), r.id.clone()));
            }
        });
        out
    }

    /// Source entities whose attributes back the context bindings, with the
    /// context source registration named by the first binding.
    pub fn binding_sources(&self) -> Vec<(EntityId, Option<EntityId>)> {
        let mut seen = BTreeMap::new();
        self.walk(|_, n| {
            for b in &n.context_bindings {
                seen.entry(b.source_entity.clone()).or_insert(b.via_context_source.clone());
            }
        });
        seen.into_iter().collect()
    }

    /// Copies the bound remote attributes from `sources` into the bindings.
    pub fn fill_snapshots(&mut self, sources: &HashMap<EntityId, Entity>) {
        fn fill(node: &mut ResolvedAsset, sources: &HashMap<EntityId, Entity>) {
            for b in &mut node.context_bindings {
                b.snapshot = sources
                    .get(&b.source_entity)
                    .and_then(|e| e.attr(&b.remote_attr))
                    .cloned();
            }
            for c in &mut node.children {
                fill(c, sources);
            }
        }
        for a in &mut self.assets {
            fill(a, sources);
        }
    }

    /// All assets in depth-first order, stubs excluded.
    pub fn assets_flat(&self) -> Vec<&ResolvedAsset> {
        let mut out = Vec::new();
        self.walk(|_, n| {
            if !n.shared {
                out.push(n);
            }
        });
        out
    }
}

/// Collects the scene rooted at `head` by following descriptor relationships.
/// The head comes first, then entities in breadth-first discovery order;
/// unresolvable targets are skipped (validation reports them).
pub fn scene_closure(head: &EntityId, mut lookup: impl FnMut(&EntityId) -> Option<Entity>) -> Vec<Entity> {
    let mut out = Vec::new();
    let mut seen: HashSet<EntityId> = HashSet::new();
    let mut queue = VecDeque::from([head.clone()]);
    seen.insert(head.clone());
    while let Some(id) = queue.pop_front() {
        let Some(e) = lookup(&id) else { continue };
        for rel in CLOSURE_EDGES {
            for t in e.targets(rel) {
                if seen.insert(t.clone()) {
                    queue.push_back(t.clone());
                }
            }
        }
        out.push(e);
    }
    out
}

/// Validation with resolution's degradation rules: dangling representation,
/// repository and channel references stop blocking.
pub fn blocking_report(scene_id: &EntityId, entities: &[Entity]) -> Result<ValidationReport, ResolveError> {
    let report = validate_scene_graph(scene_id, entities).map_err(|e| match e {
        ModelError::SceneHeadMissing(id) => ResolveError::SceneNotFound(id),
        other => ResolveError::SceneNotFound(other.to_string()),
    })?;
    let blocking = ValidationReport {
        findings: report
            .findings
            .iter()
            .filter(|f| f.severity == Severity::Error && !DEGRADABLE.contains(&f.code.as_str()))
            .cloned()
            .collect(),
    };
    if blocking.is_valid() {
        Ok(report)
    } else {
        Err(ResolveError::SceneInvalid(blocking))
    }
}

struct Resolver<'a> {
    index: HashMap<&'a EntityId, &'a Entity>,
    caps: &'a ClientCapabilities,
    warnings: Vec<String>,
    emitted: HashSet<&'a EntityId>,
}

impl<'a> Resolver<'a> {
    fn get(&self, id: &EntityId, kind: &str) -> Option<&'a Entity> {
        self.index.get(id).copied().filter(|e| e.entity_type == kind)
    }

    fn warn(&mut self, w: String) {
        if !self.warnings.contains(&w) {
            self.warnings.push(w);
        }
    }

    fn channels(&mut self, owner: &Entity) -> Vec<ChannelDescriptor> {
        let mut out = Vec::new();
        for id in owner.targets(attrs::SYNC_CHANNEL) {
            match self.get(id, kinds::ACM).and_then(ChannelDescriptor::from_acm) {
                Some(c) => out.push(c),
                None => self.warn(format!("ACM_UNRESOLVED:{id}")),
            }
        }
        out
    }

    fn representation(&mut self, rr_id: &EntityId) -> Option<ResolvedRepresentation> {
        let Some(rr) = self.get(rr_id, kinds::REPRESENTATION_REFERENCE) else {
            self.warn(format!("RR_UNRESOLVED:{rr_id}"));
            return None;
        };
        let modality = rr.property_str(attrs::MODALITY).unwrap_or_default().to_string();
        let format = rr.property_str(attrs::FORMAT).unwrap_or_default().to_string();
        if !self.caps.accepts(&format, &modality) {
            return None;
        }
        let repo = rr
            .targets(attrs::IN_REPOSITORY)
            .first()
            .and_then(|id| self.get(id, kinds::ASSET_REPOSITORY))
            .and_then(RepositoryDescriptor::from_entity);
        let (Some(repo), Some(resource_id)) = (repo, rr.property_str(attrs::RESOURCE_ID)) else {
            self.warn(format!("RR_UNRESOLVED:{rr_id}"));
            return None;
        };
        let mut fetch_urls = BTreeMap::new();
        for m in &repo.access_methods {
            match render_access_url(&repo, &m.name, resource_id) {
                Ok(url) => {
                    fetch_urls.insert(m.name.clone(), url);
                }
                Err(e) => self.warn(format!("ACCESS_METHOD:{}:{e}", repo.id)),
            }
        }
        Some(ResolvedRepresentation {
            id: rr.id.clone(),
            modality,
            format,
            lod: rr.property(attrs::LOD).and_then(|v| v.as_u64()),
            size_bytes: rr.property(attrs::SIZE_BYTES).and_then(|v| v.as_u64()),
            fetch_urls,
        })
    }

    fn bindings(&mut self, asset: &Entity) -> Vec<ContextBinding> {
        let mut out = Vec::new();
        for cr_id in asset.targets(attrs::HAS_CONTEXT_REF) {
            let Some(cr_entity) = self.get(cr_id, kinds::CONTEXT_REFERENCE) else {
                self.warn(format!("CR_UNRESOLVED:{cr_id}"));
                continue;
            };
            let Some(cr) = ContextReference::from_entity(cr_entity) else {
                self.warn(format!("CR_INVALID:{cr_id}"));
                continue;
            };
            let channels = self.channels(cr_entity);
            for (local, remote) in &cr.attribute_map {
                out.push(ContextBinding {
                    context_ref: cr.id.clone(),
                    local_attr: local.clone(),
                    source_entity: cr.source_entity.clone(),
                    remote_attr: remote.clone(),
                    via_context_source: cr.via_context_source.clone(),
                    channels: channels.clone(),
                    snapshot: None,
                });
            }
        }
        out
    }

    fn asset(&mut self, id: &'a EntityId) -> Option<ResolvedAsset> {
        let e = self.index.get(id).copied()?;
        let kind = match e.entity_type.as_str() {
            kinds::STATIC_ASSET => AssetKind::Static,
            kinds::DYNAMIC_ASSET => AssetKind::Dynamic,
            _ => return None,
        };
        if !self.emitted.insert(id) {
            return Some(ResolvedAsset {
                entity_id: id.clone(),
                kind,
                pose: BTreeMap::new(),
                representations: vec![],
                context_bindings: vec![],
                channels: vec![],
                children: vec![],
                shared: true,
            });
        }
        let pose = attrs::FIRST_ORDER
            .iter()
            .filter_map(|n| e.attr(n).map(|a| (n.to_string(), a.clone())))
            .collect();
        let representations = e
            .targets(attrs::HAS_REPRESENTATION)
            .iter()
            .filter_map(|rr| self.representation(rr))
            .collect();
        let context_bindings = self.bindings(e);
        let channels = self.channels(e);
        let children = e
            .targets(attrs::CHILD_ASSET)
            .iter()
            .filter_map(|c| self.asset(c))
            .collect();
        Some(ResolvedAsset {
            entity_id: id.clone(),
            kind,
            pose,
            representations,
            context_bindings,
            channels,
            children,
            shared: false,
        })
    }
}

/// Builds the resolved tree for a scene whose entities are `entities`
/// (typically [`scene_closure`] output). Roots are the head's `hasAsset`
/// targets; children follow `childAsset`.
pub fn resolve_scene(
    scene_id: &EntityId,
    entities: &[Entity],
    caps: &ClientCapabilities,
) -> Result<ResolvedScene, ResolveError> {
    blocking_report(scene_id, entities)?;
    let index: HashMap<&EntityId, &Entity> = entities.iter().rev().map(|e| (&e.id, e)).collect();
    let head = index[scene_id];
    let mut r = Resolver {
        index,
        caps,
        warnings: Vec::new(),
        emitted: HashSet::new(),
    };
    let assets = head
        .targets(attrs::HAS_ASSET)
        .iter()
        .filter_map(|a| r.asset(a))
        .collect();
    Ok(ResolvedScene {
        scene_id: scene_id.clone(),
        name: head.property_str(attrs::NAME).map(str::to_string),
        resolved_at: Timestamp::now(),
        assets,
        warnings: r.warnings,
    })
}

/// Entity ids and attribute names a scene watch subscribes to: the head, every
/// asset, and every context source; first-order pose attributes plus every
/// bound local and remote attribute name.
pub fn watch_scope(scene: &ResolvedScene) -> (BTreeSet<EntityId>, BTreeSet<String>) {
    let mut ids = scene.node_ids();
    ids.insert(scene.scene_id.clone());
    let mut names: BTreeSet<String> = [attrs::POSITION, attrs::POSE].iter().map(|s| s.to_string()).collect();
    for a in scene.assets_flat() {
        for b in &a.context_bindings {
            ids.insert(b.source_entity.clone());
            names.insert(b.local_attr.clone());
            names.insert(b.remote_attr.clone());
        }
    }
    (ids, names)
}
