mod support;

use std::collections::HashMap;

use dtds_core::model::{parse_entity, serialize_entity, validate_scene_graph, validate_scene_graphs};
use dtds_core::par::ExecMode;
use dtds_core::resolve::{resolve_scene, scene_closure, ClientCapabilities, ResolveError};
use support::scenegen::{caps_pair, generate, oracle_reachability, oracle_valid};

const CORPUS: u64 = 2_000;

#[test]
fn validation_agrees_with_reference_checker() {
    let mut valid = 0;
    for seed in 0..CORPUS {
        let g = generate(seed);
        let report = validate_scene_graph(&g.head, &g.entities).unwrap();
        let expected = oracle_valid(&g.head, &g.entities);
        assert_eq!(report.is_valid(), expected, "seed {seed}: {:#?}", report.findings);
        valid += usize::from(expected);
    }
    // both classes must be well represented
    assert!(valid > CORPUS as usize / 4 && valid < CORPUS as usize * 3 / 4, "{valid} valid");
}

#[test]
fn resolution_matches_reachability() {
    let caps = ClientCapabilities::default();
    for seed in 0..CORPUS {
        let g = generate(seed);
        let expected = oracle_valid(&g.head, &g.entities);
        match resolve_scene(&g.head, &g.entities, &caps) {
            Ok(scene) => {
                let (nodes, edges) = oracle_reachability(&g.head, &g.entities);
                assert_eq!(scene.node_ids(), nodes, "seed {seed}");
                assert_eq!(scene.edges(), edges, "seed {seed}");
            }
            Err(ResolveError::SceneInvalid(_)) => assert!(!expected, "seed {seed} valid but rejected"),
            Err(e) => panic!("seed {seed}: {e}"),
        }
    }
}

#[test]
fn closure_of_a_valid_scene_resolves_identically() {
    for seed in 0..500 {
        let g = generate(seed);
        if !oracle_valid(&g.head, &g.entities) {
            continue;
        }
        let by_id: HashMap<_, _> = g.entities.iter().map(|e| (e.id.clone(), e.clone())).collect();
        let closure = scene_closure(&g.head, |id| by_id.get(id).cloned());
        assert_eq!(closure[0].id, g.head);
        let caps = ClientCapabilities::default();
        let a = resolve_scene(&g.head, &g.entities, &caps).unwrap();
        let b = resolve_scene(&g.head, &closure, &caps).unwrap();
        assert_eq!(a.node_ids(), b.node_ids());
        assert_eq!(a.edges(), b.edges());
        assert_eq!(a.representation_ids(), b.representation_ids());
    }
}

#[test]
fn capability_filter_is_monotone() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 1_000 {
        let g = generate(seed);
        let (fw, fnarrow, mw, mnarrow) = caps_pair(seed);
        seed += 1;
        let join = |v: &Option<Vec<&str>>| v.as_ref().map(|v| v.join(","));
        let wide = ClientCapabilities::from_lists(join(&fw).as_deref(), join(&mw).as_deref());
        let narrow = ClientCapabilities::from_lists(join(&fnarrow).as_deref(), join(&mnarrow).as_deref());
        let (Ok(w), Ok(n)) = (
            resolve_scene(&g.head, &g.entities, &wide),
            resolve_scene(&g.head, &g.entities, &narrow),
        ) else {
            continue;
        };
        assert!(n.representation_ids().is_subset(&w.representation_ids()), "seed {}", seed - 1);
        assert_eq!(n.node_ids(), w.node_ids());
        checked += 1;
    }
}

#[test]
fn batch_modes_agree() {
    let scenes: Vec<_> = (0..200).map(generate).map(|g| (g.head, g.entities)).collect();
    let seq = validate_scene_graphs(&scenes, ExecMode::Sequential);
    let par = validate_scene_graphs(&scenes, ExecMode::Parallel);
    assert_eq!(seq, par);
}

#[test]
fn generated_entities_round_trip_through_the_wire_format() {
    for seed in 0..300 {
        for e in generate(seed).entities {
            let text = serialize_entity(&e);
            let back = parse_entity(&text).unwrap();
            assert_eq!(back, e);
            assert_eq!(serialize_entity(&back), text);
        }
    }
}
