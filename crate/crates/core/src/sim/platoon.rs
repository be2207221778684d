//! Randomized platoon scenarios for the no-collision property.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{sim_step, virtual_vehicle_id, GapMonitor, RealObstacle, SimConfig, SimState, Vehicle};
use crate::geo::{Connection, GeoPosition, Lane, LocalPoint, RoadNetwork};
use crate::par::{self, ExecMode};

#[derive(Debug, Clone, PartialEq)]
pub enum LeaderProfile {
    /// The platoon head is an ordinary virtual vehicle.
    Virtual,
    /// The platoon head is the real car; its speed changes every `hold` steps
    /// to a value drawn from `[0, v_max]`, including full stops.
    Real { seed: u64, hold: u32, v_max: f64 },
}

#[derive(Debug, Clone)]
pub struct PlatoonCase {
    pub cfg: SimConfig,
    pub network: RoadNetwork,
    pub initial: SimState,
    pub leader: LeaderProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PlatoonOutcome {
    pub min_gap: Option<f64>,
    pub violations: u64,
    /// Steps where a virtual vehicle left `[0, min(vMax, limit)]`.
    pub speed_excursions: u64,
    pub final_speeds: Vec<f64>,
}

/// A random single-lane platoon with every initial gap at least `gMin`.
pub fn random_case(seed: u64) -> PlatoonCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = rng.gen_range(0.05..0.5);
    let cfg = SimConfig {
        dt,
        tau: rng.gen_range(dt..2.0),
        g_min: rng.gen_range(0.5..5.0),
        a_accel: rng.gen_range(0.5..4.0),
        v_max: rng.gen_range(5.0..30.0),
        length: rng.gen_range(3.0..12.0),
        seed,
        ..SimConfig::default()
    };
    // real-car heads only on open lanes
    let real_head = rng.gen_bool(0.5);
    let looped = !real_head && rng.gen_bool(0.5);
    let n = rng.gen_range(2..9usize);
    let limit = rng.gen_range(5.0..35.0);
    let mut gaps = Vec::with_capacity(n);
    for _ in 0..n {
        gaps.push(cfg.g_min + rng.gen_range(0.0..30.0));
    }
    let occupied: f64 = gaps.iter().sum::<f64>() + n as f64 * cfg.length;
    let lane_len = if looped {
        occupied + rng.gen_range(0.0..50.0)
    } else {
        occupied + rng.gen_range(200.0..2000.0)
    };
    let network = RoadNetwork::new(
        GeoPosition::new(0.0, 0.0),
        vec![Lane::new("P", vec![LocalPoint::new(0.0, 0.0), LocalPoint::new(lane_len, 0.0)], limit).unwrap()],
        if looped {
            vec![Connection {
                from: "P".into(),
                to: "P".into(),
            }]
        } else {
            vec![]
        },
    )
    .unwrap();

    // the head sits first; followers are laid out behind it
    let mut s = occupied;
    let mut vehicles = Vec::new();
    let mut real = None;
    for (k, gap) in gaps.iter().enumerate() {
        if k == 0 && real_head {
            real = Some(RealObstacle {
                lane_id: "P".into(),
                s,
                length: cfg.length,
            });
        } else {
            vehicles.push(Vehicle {
                id: virtual_vehicle_id(k),
                lane_id: "P".into(),
                s,
                v: rng.gen_range(0.0..cfg.v_max.min(limit)),
                length: cfg.length,
                v_max: cfg.v_max,
                active: true,
            });
        }
        s -= cfg.length + gap;
    }
    let leader = if real_head {
        LeaderProfile::Real {
            seed: rng.gen(),
            hold: rng.gen_range(1..50),
            v_max: rng.gen_range(0.0..30.0),
        }
    } else {
        LeaderProfile::Virtual
    };
    PlatoonCase {
        cfg,
        network,
        initial: SimState {
            time: 0.0,
            vehicles,
            real,
        },
        leader,
    }
}

fn advance_real(state: &mut SimState, network: &RoadNetwork, v: f64, dt: f64) {
    let Some(r) = state.real.as_mut() else { return };
    let len = network.lane(&r.lane_id).map_or(f64::INFINITY, |l| l.length());
    let s = r.s + v * dt;
    r.s = if network.is_loop(&r.lane_id) { s.rem_euclid(len) } else { s.min(len) };
}

pub fn run_case(case: &PlatoonCase, steps: usize) -> PlatoonOutcome {
    let cfg = &case.cfg;
    let net = &case.network;
    let mut state = case.initial.clone();
    let mut monitor = GapMonitor::default();
    let mut excursions = 0;
    let limit = net.lanes()[0].speed_limit;
    let (mut real_rng, hold, real_vmax) = match case.leader {
        LeaderProfile::Real { seed, hold, v_max } => (Some(ChaCha8Rng::seed_from_u64(seed)), hold.max(1), v_max),
        LeaderProfile::Virtual => (None, 1, 0.0),
    };
    let mut real_v = 0.0;
    for step in 0..steps {
        let mut next = sim_step(&state, net, cfg, cfg.dt);
        if let Some(rng) = real_rng.as_mut() {
            if step as u32 % hold == 0 {
                real_v = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..=real_vmax) };
            }
            advance_real(&mut next, net, real_v, cfg.dt);
        }
        monitor.observe(&state, &next, net, cfg);
        for v in &next.vehicles {
            if v.v < 0.0 || v.v > v.v_max.min(limit) + 1e-12 {
                excursions += 1;
            }
        }
        state = next;
    }
    PlatoonOutcome {
        min_gap: monitor.min_gap,
        violations: monitor.violations,
        speed_excursions: excursions,
        final_speeds: state.vehicles.iter().map(|v| v.v).collect(),
    }
}

pub fn run_cases(cases: &[PlatoonCase], steps: usize, mode: ExecMode) -> Vec<PlatoonOutcome> {
    par::map(cases, mode, |c| run_case(c, steps))
}
