//! Reference implementations used to cross-check the library.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dtds_core::geo::{Lane, LocalPoint, RoadNetwork, GeoPosition};
use dtds_core::{Attribute, Entity, EntityId, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per attribute: sort every candidate by observedAt descending (missing
/// last), then by source rank ascending (local = 0, remotes in order), and
/// keep the first.
pub fn merge_by_sorting(local: Option<&Entity>, remotes: &[Entity]) -> BTreeMap<String, Attribute> {
    let mut candidates: BTreeMap<String, Vec<(i64, usize, Attribute)>> = BTreeMap::new();
    let offset = usize::from(local.is_none());
    for (rank, src) in local.into_iter().chain(remotes.iter()).enumerate() {
        for (name, a) in &src.attributes {
            let key = a.observed_at.map_or(i64::MIN, Timestamp::as_millis);
            candidates.entry(name.clone()).or_default().push((key, rank + offset, a.clone()));
        }
    }
    candidates
        .into_iter()
        .map(|(name, mut c)| {
            c.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            (name, c.swap_remove(0).2)
        })
        .collect()
}

/// A random merge case: same id and type everywhere, attributes drawn from a
/// small name pool, observedAt from a small pool to force ties.
pub fn merge_case(seed: u64) -> (Option<Entity>, Vec<Entity>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = EntityId::ngsi("Vehicle", "v1").unwrap();
    let names = ["speed", "position", "heading", "fuel", "status"];
    let make = |rng: &mut ChaCha8Rng, tag: usize| {
        let mut e = Entity::new(id.clone(), "Vehicle");
        for n in names {
            if rng.gen_bool(0.6) {
                let mut a = Attribute::property(format!("{n}-{tag}-{}", rng.gen_range(0..100)));
                if rng.gen_bool(0.8) {
                    a = a.observed(Timestamp::from_millis(rng.gen_range(0..4) * 1000));
                }
                e = e.with(n, a);
            }
        }
        e
    };
    let local = rng.gen_bool(0.7).then(|| make(&mut rng, 0));
    let n_remote = rng.gen_range(usize::from(local.is_none())..5);
    let remotes = (0..n_remote).map(|k| make(&mut rng, k + 1)).collect();
    (local, remotes)
}

/// Random polyline network in a 200 m square; lane ids are sortable.
pub fn random_network(seed: u64) -> RoadNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_lanes = rng.gen_range(1..=4);
    let lanes = (0..n_lanes)
        .map(|k| {
            let n_pts = rng.gen_range(2..=6);
            let mut pts: Vec<LocalPoint> = Vec::new();
            while pts.len() < n_pts {
                let p = LocalPoint::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
                if pts.last().is_none_or(|q: &LocalPoint| (q.x - p.x).hypot(q.y - p.y) > 1.0) {
                    pts.push(p);
                }
            }
            Lane::new(format!("lane{k}"), pts, 13.9).unwrap()
        })
        .collect();
    RoadNetwork::new(GeoPosition::new(38.25, 21.73), lanes, vec![]).unwrap()
}

/// Minimum distance from `p` to any lane, found by sampling every lane at 1 cm
/// arc-length spacing (plus each vertex).
pub fn sampled_distance(net: &RoadNetwork, p: LocalPoint) -> f64 {
    const STEP: f64 = 0.01;
    let mut best = f64::INFINITY;
    for lane in net.lanes() {
        for w in lane.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = (b.x - a.x).hypot(b.y - a.y);
            let n = (len / STEP).ceil() as usize;
            for i in 0..=n {
                let t = (i as f64 * STEP / len).min(1.0);
                let q = (a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
                best = best.min((q.0 - p.x).hypot(q.1 - p.y));
            }
        }
    }
    best
}

pub fn ids(v: &[Entity]) -> BTreeSet<EntityId> {
    v.iter().map(|e| e.id.clone()).collect()
}
