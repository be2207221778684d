//! Random scene graphs and brute-force reference checkers for them.
//!
//! The checkers re-derive validity and reachability from first principles
//! (explicit DFS, exhaustive reference enumeration) without calling into the
//! library's graph code.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};

use dtds_core::{Attribute, Entity, EntityId, GeoPoint, Timestamp};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const FORMATS: [&str; 5] = ["gltf", "glb", "las", "splat", "3dtiles"];
pub const MODALITIES: [&str; 4] = ["mesh", "pointcloud", "gaussian-splat", "tiles"];

const HEAD: &str = "SceneHead";
const SA: &str = "StaticAsset";
const DA: &str = "DynamicAsset";
const RR: &str = "RepresentationReference";
const CR: &str = "ContextReference";
const ACM: &str = "ACM";
const REPO: &str = "AssetRepositoryDescriptor";

fn id(t: &str, n: impl std::fmt::Display) -> EntityId {
    EntityId::ngsi(t, &n.to_string()).unwrap()
}

fn rel(targets: Vec<EntityId>) -> Attribute {
    Attribute::relationships(targets)
}

pub struct GeneratedScene {
    pub head: EntityId,
    pub entities: Vec<Entity>,
}

/// A scene of at most 50 entities. Roughly half of the seeds introduce at
/// least one structural defect (dangling or mis-typed reference, cycle,
/// cross-kind family link, asymmetric family link, missing dynamic position,
/// multi-parent, context reference on a static asset, wildcard topic).
pub fn generate(seed: u64) -> GeneratedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let defect_rate = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.01..0.08) };
    let defect = |rng: &mut ChaCha8Rng| defect_rate > 0.0 && rng.gen_bool(defect_rate);

    let n_sa = rng.gen_range(0..12);
    let n_da = rng.gen_range(0..10);
    let n_rr = rng.gen_range(0..10);
    let n_repo = rng.gen_range(1..4);
    let n_cr = rng.gen_range(0..6);
    let n_acm = rng.gen_range(0..4);

    let sas: Vec<EntityId> = (0..n_sa).map(|i| id(SA, format!("s{i}"))).collect();
    let das: Vec<EntityId> = (0..n_da).map(|i| id(DA, format!("d{i}"))).collect();
    let rrs: Vec<EntityId> = (0..n_rr).map(|i| id(RR, format!("r{i}"))).collect();
    let repos: Vec<EntityId> = (0..n_repo).map(|i| id(REPO, format!("p{i}"))).collect();
    let crs: Vec<EntityId> = (0..n_cr).map(|i| id(CR, format!("c{i}"))).collect();
    let acms: Vec<EntityId> = (0..n_acm).map(|i| id(ACM, format!("a{i}"))).collect();
    let head = id(HEAD, format!("scene{seed}"));

    let all_ids: Vec<EntityId> = [&sas, &das, &rrs, &repos, &crs, &acms]
        .iter()
        .flat_map(|v| v.iter().cloned())
        .chain([head.clone()])
        .collect();
    let dangling = |rng: &mut ChaCha8Rng| id("Missing", format!("m{}", rng.gen_range(0..1000)));
    let any = |rng: &mut ChaCha8Rng| all_ids.choose(rng).unwrap().clone();

    // family forest per kind: each asset may pick a parent among earlier ones
    let mut parent: HashMap<EntityId, EntityId> = HashMap::new();
    let mut children: HashMap<EntityId, Vec<EntityId>> = HashMap::new();
    for group in [&sas, &das] {
        for (i, a) in group.iter().enumerate() {
            if i > 0 && rng.gen_bool(0.4) {
                let p = group[rng.gen_range(0..i)].clone();
                parent.insert(a.clone(), p.clone());
                children.entry(p).or_default().push(a.clone());
            }
        }
    }

    let mut entities = Vec::new();

    let mut top: Vec<EntityId> = sas
        .iter()
        .chain(das.iter())
        .filter(|a| !parent.contains_key(*a) || rng.gen_bool(0.1))
        .cloned()
        .collect();
    if defect(&mut rng) {
        top.push(if rng.gen_bool(0.5) { dangling(&mut rng) } else { any(&mut rng) });
    }
    let mut h = Entity::new(head.clone(), HEAD)
        .with("name", Attribute::property(format!("scene {seed}")))
        .with("areaOrigin", Attribute::geo(GeoPoint::new(21.73, 38.25, 0.0).unwrap()))
        .with("areaBounds", Attribute::property(json!([21.7, 38.2, 21.8, 38.3])));
    if !top.is_empty() {
        h = h.with("hasAsset", rel(top));
    }
    entities.push(h);

    for a in sas.iter().chain(das.iter()) {
        let dynamic = a.type_segment() == DA;
        let kind = if dynamic { DA } else { SA };
        let mut e = Entity::new(a.clone(), kind);
        let mut kids = children.get(a).cloned().unwrap_or_default();
        if defect(&mut rng) {
            // cycle: adopt an ancestor or itself
            let mut anc = vec![a.clone()];
            let mut cur = a.clone();
            while let Some(p) = parent.get(&cur) {
                anc.push(p.clone());
                cur = p.clone();
            }
            kids.push(anc.choose(&mut rng).unwrap().clone());
        }
        if defect(&mut rng) {
            // cross-kind child, dangling child, or child of another asset's subtree
            kids.push(match rng.gen_range(0..3) {
                0 => {
                    let other = if dynamic { &sas } else { &das };
                    other.choose(&mut rng).cloned().unwrap_or_else(|| dangling(&mut rng))
                }
                1 => dangling(&mut rng),
                _ => any(&mut rng),
            });
        }
        if !kids.is_empty() {
            e = e.with("childAsset", rel(kids));
        }
        let mut par: Vec<EntityId> = parent.get(a).cloned().into_iter().collect();
        if defect(&mut rng) {
            match rng.gen_range(0..3) {
                0 => par = vec![dangling(&mut rng)],
                1 => par.push(any(&mut rng)),
                _ => par = vec![any(&mut rng)],
            }
        }
        if !par.is_empty() {
            e = e.with("parentAsset", rel(par));
        }
        if dynamic && !defect(&mut rng) {
            let mut pos = Attribute::geo(GeoPoint::new(21.73, 38.25, 0.0).unwrap());
            if !defect(&mut rng) {
                pos = pos.observed(Timestamp::from_millis(seed as i64));
            }
            e = e.with("position", pos);
        }
        let mut reps: Vec<EntityId> = rrs
            .iter()
            .filter(|_| rng.gen_bool(0.25))
            .cloned()
            .collect();
        if defect(&mut rng) {
            reps.push(if rng.gen_bool(0.5) { dangling(&mut rng) } else { any(&mut rng) });
        }
        if !reps.is_empty() {
            e = e.with("hasRepresentation", rel(reps));
        }
        if dynamic || defect(&mut rng) {
            let mut cr_targets: Vec<EntityId> = crs.iter().filter(|_| rng.gen_bool(0.3)).cloned().collect();
            if defect(&mut rng) {
                cr_targets.push(if rng.gen_bool(0.5) { dangling(&mut rng) } else { any(&mut rng) });
            }
            if !cr_targets.is_empty() {
                e = e.with("hasContextRef", rel(cr_targets));
            }
        }
        if dynamic && !acms.is_empty() && rng.gen_bool(0.3) {
            let mut ch = vec![acms.choose(&mut rng).unwrap().clone()];
            if defect(&mut rng) {
                ch = vec![dangling(&mut rng)];
            }
            e = e.with("syncChannel", rel(ch));
        }
        entities.push(e);
    }

    for r in &rrs {
        let mut repo = repos.choose(&mut rng).unwrap().clone();
        if defect(&mut rng) {
            repo = if rng.gen_bool(0.5) { dangling(&mut rng) } else { any(&mut rng) };
        }
        entities.push(
            Entity::new(r.clone(), RR)
                .with("modality", Attribute::property(*MODALITIES.choose(&mut rng).unwrap()))
                .with("format", Attribute::property(*FORMATS.choose(&mut rng).unwrap()))
                .with("resourceId", Attribute::property(format!("{:064x}", rng.gen::<u128>())))
                .with("inRepository", rel(vec![repo])),
        );
    }
    for p in &repos {
        entities.push(
            Entity::new(p.clone(), REPO)
                .with("baseUri", Attribute::property("http://localhost:8080"))
                .with(
                    "accessMethods",
                    Attribute::property(json!([
                        {"name": "local", "kind": "internal"},
                        {"name": "cdn", "kind": "http-get-template", "urlTemplate": "https://cdn.example/{resourceId}"}
                    ])),
                ),
        );
    }
    for c in &crs {
        let source = if rng.gen_bool(0.5) {
            id("Vehicle", format!("remote{}", rng.gen_range(0..5)))
        } else {
            das.choose(&mut rng).cloned().unwrap_or_else(|| id("Vehicle", "remote0"))
        };
        let mut e = Entity::new(c.clone(), CR)
            .with("sourceEntity", rel(vec![source]))
            .with("attributeMap", Attribute::property(json!({"speed": "velocity"})));
        if !acms.is_empty() && rng.gen_bool(0.3) {
            let mut ch = vec![acms.choose(&mut rng).unwrap().clone()];
            if defect(&mut rng) {
                ch = vec![if rng.gen_bool(0.5) { dangling(&mut rng) } else { any(&mut rng) }];
            }
            e = e.with("syncChannel", rel(ch));
        }
        entities.push(e);
    }
    for a in &acms {
        let topic = if defect(&mut rng) { "dtds/#".to_string() } else { format!("dtds/t/{}", a.local_name()) };
        entities.push(
            Entity::new(a.clone(), ACM)
                .with("protocol", Attribute::property("mqtt"))
                .with("endpoint", Attribute::property("mqtt://localhost:1883"))
                .with("topic", Attribute::property(topic))
                .with("qos", Attribute::property(1)),
        );
    }
    entities.shuffle(&mut rng);
    GeneratedScene { head, entities }
}

fn type_of<'a>(index: &'a HashMap<&EntityId, &Entity>, id: &EntityId) -> Option<&'a str> {
    index.get(id).map(|e| e.entity_type.as_str())
}

fn is_asset_type(t: &str) -> bool {
    t == SA || t == DA
}

/// Valid/invalid classification by exhaustive rule enumeration.
pub fn oracle_valid(head: &EntityId, entities: &[Entity]) -> bool {
    let index: HashMap<&EntityId, &Entity> = entities.iter().map(|e| (&e.id, e)).collect();
    if type_of(&index, head) != Some(HEAD) {
        return false;
    }
    let must = |id: &EntityId, allowed: &[&str]| type_of(&index, id).is_some_and(|t| allowed.contains(&t));
    for e in entities {
        let t = e.entity_type.as_str();
        let ok = match t {
            HEAD => e.targets("hasAsset").iter().all(|a| must(a, &[SA, DA])),
            SA | DA => {
                let fam_ok = e.targets("childAsset").iter().chain(e.targets("parentAsset")).all(|x| must(x, &[t]));
                let single_parent = e.targets("parentAsset").len() <= 1;
                let reps_ok = e.targets("hasRepresentation").iter().all(|x| must(x, &[RR]));
                let crs_ok = e.targets("hasContextRef").iter().all(|x| must(x, &[CR]));
                let cr_allowed = t == DA || e.attr("hasContextRef").is_none();
                let ch_ok = e.targets("syncChannel").iter().all(|x| must(x, &[ACM]));
                let pos_ok = t == SA || e.attr("position").is_some_and(|p| p.observed_at.is_some());
                let symmetric = e.targets("childAsset").iter().all(|c| match index.get(c) {
                    Some(child) => child.targets("parentAsset").first().is_none_or(|p| p == &e.id),
                    None => true,
                });
                fam_ok && single_parent && reps_ok && crs_ok && cr_allowed && ch_ok && pos_ok && symmetric
            }
            RR => e.targets("inRepository").iter().all(|x| must(x, &[REPO])),
            CR => e.targets("syncChannel").iter().all(|x| must(x, &[ACM])),
            ACM => !e.property_str("topic").unwrap_or("").contains(['#', '+']),
            _ => true,
        };
        if !ok {
            return false;
        }
    }
    !has_family_cycle(entities, &index)
}

/// Explicit three-colour DFS over parent -> child links between assets.
fn has_family_cycle(entities: &[Entity], index: &HashMap<&EntityId, &Entity>) -> bool {
    let mut adj: HashMap<&EntityId, Vec<&EntityId>> = HashMap::new();
    let asset = |id: &EntityId| type_of(index, id).is_some_and(is_asset_type);
    for e in entities.iter().filter(|e| is_asset_type(&e.entity_type)) {
        for c in e.targets("childAsset").iter().filter(|c| asset(c)) {
            adj.entry(&e.id).or_default().push(c);
        }
        for p in e.targets("parentAsset").iter().filter(|p| asset(p)) {
            adj.entry(p).or_default().push(&e.id);
        }
    }
    fn visit<'a>(
        n: &'a EntityId,
        adj: &HashMap<&'a EntityId, Vec<&'a EntityId>>,
        colour: &mut HashMap<&'a EntityId, u8>,
    ) -> bool {
        colour.insert(n, 1);
        for &m in adj.get(n).map(Vec::as_slice).unwrap_or(&[]) {
            match colour.get(m).copied().unwrap_or(0) {
                1 => return true,
                0 if visit(m, adj, colour) => return true,
                _ => {}
            }
        }
        colour.insert(n, 2);
        false
    }
    let mut colour = HashMap::new();
    let nodes: Vec<&EntityId> = adj.keys().copied().collect();
    nodes.into_iter().any(|n| colour.get(n).copied().unwrap_or(0) == 0 && visit(n, &adj, &mut colour))
}

/// Assets reachable from the head over hasAsset then childAsset links, and
/// the (parent, child) edges used along the way.
pub fn oracle_reachability(head: &EntityId, entities: &[Entity]) -> (BTreeSet<EntityId>, BTreeSet<(EntityId, EntityId)>) {
    let index: HashMap<&EntityId, &Entity> = entities.iter().map(|e| (&e.id, e)).collect();
    let asset = |id: &EntityId| type_of(&index, id).is_some_and(is_asset_type);
    let mut nodes = BTreeSet::new();
    let mut edges = BTreeSet::new();
    let mut seen: HashSet<EntityId> = HashSet::new();
    let mut frontier: Vec<EntityId> = Vec::new();
    for a in index[head].targets("hasAsset").iter().filter(|a| asset(a)) {
        edges.insert((head.clone(), a.clone()));
        frontier.push(a.clone());
    }
    while let Some(n) = frontier.pop() {
        if !seen.insert(n.clone()) {
            continue;
        }
        nodes.insert(n.clone());
        for c in index[&n].targets("childAsset").iter().filter(|c| asset(c)) {
            edges.insert((n.clone(), c.clone()));
            frontier.push(c.clone());
        }
    }
    (nodes, edges)
}

/// A random capability pair `(wide, narrow)` with `narrow ⊆ wide`
/// component-wise; `None` means "accept everything".
pub fn caps_pair(seed: u64) -> (Option<Vec<&'static str>>, Option<Vec<&'static str>>, Option<Vec<&'static str>>, Option<Vec<&'static str>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let pick = |pool: &[&'static str], rng: &mut ChaCha8Rng| -> (Option<Vec<&'static str>>, Option<Vec<&'static str>>) {
        let wide: Option<Vec<&'static str>> = if rng.gen_bool(0.3) {
            None
        } else {
            Some(pool.iter().copied().filter(|_| rng.gen_bool(0.6)).collect())
        };
        let base: Vec<&'static str> = wide.clone().unwrap_or_else(|| pool.to_vec());
        let narrow = if wide.is_none() && rng.gen_bool(0.3) {
            None
        } else {
            Some(base.into_iter().filter(|_| rng.gen_bool(0.6)).collect())
        };
        (wide, narrow)
    };
    let (fw, fnarrow) = pick(&FORMATS, &mut rng);
    let (mw, mnarrow) = pick(&MODALITIES, &mut rng);
    (fw, fnarrow, mw, mnarrow)
}
