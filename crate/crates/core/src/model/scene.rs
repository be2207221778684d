//! Whole-graph checks over a scene's entity set.

use std::collections::HashMap;

use super::dtdo::{attrs, kinds};
use super::validate::{validate_entity, ValidationReport};
use super::{Entity, EntityId, ModelError};
use crate::par::{self, ExecMode};

/// Reference rules: which relationship on which owner kinds must point at
/// which target kinds, and the code reported when the target is absent.
struct RefRule {
    owners: &'static [&'static str],
    attr: &'static str,
    targets: &'static [&'static str],
    unresolved: &'static str,
}

const ASSETS: &[&str] = &[kinds::STATIC_ASSET, kinds::DYNAMIC_ASSET];

const REF_RULES: &[RefRule] = &[
    RefRule {
        owners: &[kinds::SCENE_HEAD],
        attr: attrs::HAS_ASSET,
        targets: ASSETS,
        unresolved: "ASSET_UNRESOLVED",
    },
    RefRule {
        owners: ASSETS,
        attr: attrs::HAS_REPRESENTATION,
        targets: &[kinds::REPRESENTATION_REFERENCE],
        unresolved: "RR_UNRESOLVED",
    },
    RefRule {
        owners: ASSETS,
        attr: attrs::HAS_CONTEXT_REF,
        targets: &[kinds::CONTEXT_REFERENCE],
        unresolved: "CR_UNRESOLVED",
    },
    RefRule {
        owners: &[kinds::STATIC_ASSET, kinds::DYNAMIC_ASSET, kinds::CONTEXT_REFERENCE],
        attr: attrs::SYNC_CHANNEL,
        targets: &[kinds::ACM],
        unresolved: "ACM_UNRESOLVED",
    },
    RefRule {
        owners: &[kinds::REPRESENTATION_REFERENCE],
        attr: attrs::IN_REPOSITORY,
        targets: &[kinds::ASSET_REPOSITORY],
        unresolved: "REPO_UNRESOLVED",
    },
];

/// Validates the scene rooted at `scene_id` over `entities`.
///
/// Checks, for every entity in the set: reference resolution and target
/// kinds, acyclicity of the parent/child asset graph, same-kind parent/child
/// links, parent/child symmetry, and the per-entity rules.
pub fn validate_scene_graph(scene_id: &EntityId, entities: &[Entity]) -> Result<ValidationReport, ModelError> {
    let index: HashMap<&EntityId, &Entity> = entities.iter().rev().map(|e| (&e.id, e)).collect();
    match index.get(scene_id) {
        Some(head) if head.entity_type == kinds::SCENE_HEAD => {}
        _ => return Err(ModelError::SceneHeadMissing(scene_id.to_string())),
    }
    let mut report = ValidationReport::default();
    for e in entities {
        report.merge(validate_entity(e));
        check_references(e, &index, &mut report);
        if kinds::is_asset(&e.entity_type) {
            check_family(e, &index, &mut report);
        }
    }
    check_cycles(entities, &index, &mut report);
    Ok(report)
}

/// Validates many independent scenes, in parallel when enabled.
pub fn validate_scene_graphs(
    scenes: &[(EntityId, Vec<Entity>)],
    mode: ExecMode,
) -> Vec<Result<ValidationReport, ModelError>> {
    par::map(scenes, mode, |(id, entities)| validate_scene_graph(id, entities))
}

fn check_references(e: &Entity, index: &HashMap<&EntityId, &Entity>, r: &mut ValidationReport) {
    for rule in REF_RULES {
        if !rule.owners.contains(&e.entity_type.as_str()) {
            continue;
        }
        for target in e.targets(rule.attr) {
            match index.get(target) {
                None => r.error(
                    rule.unresolved,
                    &e.id,
                    format!("`{}` target {target} is not part of the scene", rule.attr),
                ),
                Some(t) if !rule.targets.contains(&t.entity_type.as_str()) => r.error(
                    "REF_KIND",
                    &e.id,
                    format!(
                        "`{}` target {target} has type {}, expected one of {:?}",
                        rule.attr, t.entity_type, rule.targets
                    ),
                ),
                Some(_) => {}
            }
        }
    }
    if e.entity_type == kinds::CONTEXT_REFERENCE {
        for source in e.targets(attrs::SOURCE_ENTITY) {
            if !index.contains_key(source) {
                r.warning(
                    "CR_SOURCE_UNRESOLVED",
                    &e.id,
                    format!("source entity {source} is not local; it may be served remotely"),
                );
            }
        }
    }
}

fn check_family(e: &Entity, index: &HashMap<&EntityId, &Entity>, r: &mut ValidationReport) {
    for rel in [attrs::PARENT_ASSET, attrs::CHILD_ASSET] {
        for target in e.targets(rel) {
            match index.get(target) {
                None => r.error(
                    "ASSET_UNRESOLVED",
                    &e.id,
                    format!("`{rel}` target {target} is not part of the scene"),
                ),
                Some(t) if t.entity_type != e.entity_type => r.error(
                    "KIND_MISMATCH",
                    &e.id,
                    format!("`{rel}` target {target} is a {}, not a {}", t.entity_type, e.entity_type),
                ),
                Some(_) => {}
            }
        }
    }
    for child in e.targets(attrs::CHILD_ASSET) {
        let Some(c) = index.get(child) else { continue };
        if let Some(parent) = c.targets(attrs::PARENT_ASSET).first() {
            if parent != &e.id {
                r.error(
                    "PARENT_CHILD_ASYMMETRY",
                    &e.id,
                    format!("child {child} names {parent} as its parent"),
                );
            }
        }
    }
}

/// Parent -> child edges among resolved assets, from `childAsset` and the
/// reverse of `parentAsset`. Exposed for resolution and tests.
pub fn family_edges<'a>(
    entities: impl IntoIterator<Item = &'a Entity>,
    index: &HashMap<&EntityId, &Entity>,
) -> Vec<(EntityId, EntityId)> {
    let mut edges = Vec::new();
    for e in entities {
        if !kinds::is_asset(&e.entity_type) {
            continue;
        }
        let is_asset = |id: &EntityId| index.get(id).is_some_and(|t| kinds::is_asset(&t.entity_type));
        for child in e.targets(attrs::CHILD_ASSET).iter().filter(|c| is_asset(c)) {
            edges.push((e.id.clone(), child.clone()));
        }
        for parent in e.targets(attrs::PARENT_ASSET).iter().filter(|p| is_asset(p)) {
            edges.push((parent.clone(), e.id.clone()));
        }
    }
    edges.sort();
    edges.dedup();
    edges
}

fn check_cycles(entities: &[Entity], index: &HashMap<&EntityId, &Entity>, r: &mut ValidationReport) {
    let edges = family_edges(entities, index);
    let mut ids: Vec<&EntityId> = edges.iter().flat_map(|(a, b)| [a, b]).collect();
    ids.sort();
    ids.dedup();
    let pos: HashMap<&EntityId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut adj = vec![Vec::new(); ids.len()];
    for (a, b) in &edges {
        adj[pos[a]].push(pos[b]);
    }
    for component in strongly_connected(&adj) {
        let cyclic = component.len() > 1 || adj[component[0]].contains(&component[0]);
        if cyclic {
            let mut members: Vec<&EntityId> = component.iter().map(|&i| ids[i]).collect();
            members.sort();
            r.error(
                "SCENE_CYCLE",
                members[0],
                format!(
                    "parent/child cycle through {}",
                    members.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ")
                ),
            );
        }
    }
}

/// Iterative Tarjan SCC.
fn strongly_connected(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNSEEN: usize = usize::MAX;
    let n = adj.len();
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let mut next = 0;
    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut edge)) = call.last_mut() {
            if let Some(&w) = adj[v].get(*edge) {
                *edge += 1;
                if index[w] == UNSEEN {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                out.push(comp);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Attribute, GeoPoint};
    use serde_json::json;

    fn id(t: &str, n: &str) -> EntityId {
        EntityId::ngsi(t, n).unwrap()
    }

    fn minimal() -> Vec<Entity> {
        let head = Entity::new(id("SceneHead", "s"), kinds::SCENE_HEAD)
            .with("name", Attribute::property("s"))
            .with("areaOrigin", Attribute::geo(GeoPoint::new(21.73, 38.25, 0.0).unwrap()))
            .with("areaBounds", Attribute::property(json!([21.7, 38.2, 21.8, 38.3])))
            .with("hasAsset", Attribute::relationship(id("StaticAsset", "road")));
        let road = Entity::new(id("StaticAsset", "road"), kinds::STATIC_ASSET)
            .with("hasRepresentation", Attribute::relationship(id("RepresentationReference", "road-gltf")));
        let rr = Entity::new(id("RepresentationReference", "road-gltf"), kinds::REPRESENTATION_REFERENCE)
            .with("modality", Attribute::property("mesh"))
            .with("format", Attribute::property("gltf"))
            .with("resourceId", Attribute::property("abc"))
            .with("inRepository", Attribute::relationship(id("AssetRepositoryDescriptor", "local")));
        let repo = Entity::new(id("AssetRepositoryDescriptor", "local"), kinds::ASSET_REPOSITORY)
            .with("baseUri", Attribute::property("http://localhost:8080"))
            .with("accessMethods", Attribute::property(json!([{"name": "local", "kind": "internal"}])));
        vec![head, road, rr, repo]
    }

    #[test]
    fn minimal_graph_is_clean() {
        let r = validate_scene_graph(&id("SceneHead", "s"), &minimal()).unwrap();
        assert!(r.findings.is_empty(), "{:?}", r.findings);
    }

    #[test]
    fn missing_head() {
        assert!(matches!(
            validate_scene_graph(&id("SceneHead", "nope"), &minimal()),
            Err(ModelError::SceneHeadMissing(_))
        ));
        assert!(matches!(
            validate_scene_graph(&id("StaticAsset", "road"), &minimal()),
            Err(ModelError::SceneHeadMissing(_))
        ));
    }

    #[test]
    fn self_parent_is_a_cycle() {
        let mut set = minimal();
        set[1] = set[1].clone().with("parentAsset", Attribute::relationship(id("StaticAsset", "road")));
        let r = validate_scene_graph(&id("SceneHead", "s"), &set).unwrap();
        assert!(r.has_code("SCENE_CYCLE"));
    }

    #[test]
    fn static_child_of_dynamic_kind_is_mismatch() {
        let mut set = minimal();
        set[1] = set[1].clone().with("childAsset", Attribute::relationship(id("DynamicAsset", "car")));
        set.push(
            Entity::new(id("DynamicAsset", "car"), kinds::DYNAMIC_ASSET).with(
                "position",
                Attribute::geo(GeoPoint::new(21.73, 38.25, 0.0).unwrap())
                    .observed(crate::Timestamp::from_millis(0)),
            ),
        );
        let r = validate_scene_graph(&id("SceneHead", "s"), &set).unwrap();
        assert!(r.has_code("KIND_MISMATCH"));
    }

    #[test]
    fn dangling_representation() {
        let set: Vec<Entity> = minimal().into_iter().filter(|e| e.entity_type != kinds::REPRESENTATION_REFERENCE).collect();
        let r = validate_scene_graph(&id("SceneHead", "s"), &set).unwrap();
        assert!(r.has_code("RR_UNRESOLVED"));
        assert!(!r.is_valid());
    }

    #[test]
    fn asymmetric_parent() {
        let mut set = minimal();
        set[0] = set[0].clone().with(
            "hasAsset",
            Attribute::relationships(vec![id("StaticAsset", "road"), id("StaticAsset", "b"), id("StaticAsset", "c")]),
        );
        set[1] = set[1].clone().with("childAsset", Attribute::relationship(id("StaticAsset", "b")));
        set.push(Entity::new(id("StaticAsset", "b"), kinds::STATIC_ASSET).with("parentAsset", Attribute::relationship(id("StaticAsset", "c"))));
        set.push(Entity::new(id("StaticAsset", "c"), kinds::STATIC_ASSET));
        let r = validate_scene_graph(&id("SceneHead", "s"), &set).unwrap();
        assert!(r.has_code("PARENT_CHILD_ASYMMETRY"));
        assert!(!r.has_code("SCENE_CYCLE"));
    }

    #[test]
    fn tarjan_components() {
        let adj = vec![vec![1], vec![2], vec![0], vec![3], vec![]];
        let mut comps: Vec<Vec<usize>> = strongly_connected(&adj)
            .into_iter()
            .map(|mut c| {
                c.sort();
                c
            })
            .collect();
        comps.sort();
        assert_eq!(comps, vec![vec![0, 1, 2], vec![3], vec![4]]);
    }
}
