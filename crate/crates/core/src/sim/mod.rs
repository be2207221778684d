//! Krauss-style single-lane micro-simulator.
//!
//! Each virtual vehicle follows the nearest vehicle ahead on its lane and
//! never exceeds the safe speed `v_l + (g - gMin) / tau`, where `v_l` is the
//! leader's speed over the same step. Speeds of a whole lane are solved
//! together so that chains (and rings on loop lanes) of followers stay
//! consistent within one step.
//!
//! The real car is an uncontrolled obstacle placed at its last observed
//! position. Followers assume it may stand still until the next fix, so its
//! leader speed is taken as zero.

mod platoon;
mod trace;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{project_to_lane, LaneProjection, LocalPoint, RoadNetwork};
use crate::EntityId;

pub use platoon::{random_case, run_case, run_cases, LeaderProfile, PlatoonCase, PlatoonOutcome};
pub use trace::{load_trace, parse_trace, synthetic_trace, TraceError, TracePoint};

/// Lateral distance beyond which a real-car fix is treated as off the network.
pub const OFF_NETWORK_M: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown spawn lane `{0}`")]
    UnknownLane(String),
    #[error("{needed} vehicles do not fit on lane `{lane}`")]
    Overcrowded { lane: String, needed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SimConfig {
    /// Step length, s.
    pub dt: f64,
    /// Minimum bumper-to-bumper gap, m.
    pub g_min: f64,
    /// Headway, s.
    pub tau: f64,
    /// Acceleration, m/s².
    pub a_accel: f64,
    /// Publishing period, s.
    pub publish_period: f64,
    pub n_virtual: usize,
    /// Desired speed of virtual vehicles, m/s.
    pub v_max: f64,
    /// Vehicle length, m.
    pub length: f64,
    pub seed: u64,
    /// Lanes virtual vehicles spawn on; empty means every lane.
    pub spawn_lanes: Vec<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.1,
            g_min: 2.0,
            tau: 1.0,
            a_accel: 2.0,
            publish_period: 0.1,
            n_virtual: 5,
            v_max: 13.9,
            length: 4.5,
            seed: 1,
            spawn_lanes: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be > 0");
        }
        if !(self.tau >= self.dt && self.tau.is_finite()) {
            return bad("tau must be >= dt");
        }
        if !(self.g_min > 0.0 && self.g_min.is_finite()) {
            return bad("gMin must be > 0");
        }
        if !(self.a_accel >= 0.0 && self.a_accel.is_finite()) {
            return bad("aAccel must be >= 0");
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return bad("vMax must be > 0");
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return bad("length must be > 0");
        }
        if !(self.publish_period > 0.0 && self.publish_period.is_finite()) {
            return bad("publishPeriod must be > 0");
        }
        Ok(())
    }
}

/// `max(0, v_l + (g - gMin) / tau)`; an infinite gap gives an infinite speed.
pub fn safe_speed(v_leader: f64, gap: f64, cfg: &SimConfig) -> f64 {
    if gap == f64::INFINITY {
        return f64::INFINITY;
    }
    (v_leader + (gap - cfg.g_min) / cfg.tau).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Vehicle {
    pub id: EntityId,
    pub lane_id: String,
    /// Front bumper position along the lane, m.
    pub s: f64,
    pub v: f64,
    pub length: f64,
    pub v_max: f64,
    /// `false` while waiting to re-enter an open lane.
    pub active: bool,
}

/// The real car as seen by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RealObstacle {
    pub lane_id: String,
    pub s: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SimState {
    /// Simulated seconds since start.
    pub time: f64,
    pub vehicles: Vec<Vehicle>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub real: Option<RealObstacle>,
}

pub fn virtual_vehicle_id(k: usize) -> EntityId {
    EntityId::ngsi("DynamicAsset", &format!("virt-{k}")).expect("valid generated id")
}

/// Places `cfg.n_virtual` vehicles at rest, spread uniformly over the spawn
/// lanes (lane order shuffled by the seed), centred in equal slots.
pub fn spawn(network: &RoadNetwork, cfg: &SimConfig) -> Result<SimState, SimError> {
    cfg.validate()?;
    let mut lanes: Vec<&str> = if cfg.spawn_lanes.is_empty() {
        network.lanes().iter().map(|l| l.id.as_str()).collect()
    } else {
        cfg.spawn_lanes.iter().map(String::as_str).collect()
    };
    for l in &lanes {
        if network.lane(l).is_none() {
            return Err(SimError::UnknownLane(l.to_string()));
        }
    }
    if lanes.is_empty() && cfg.n_virtual > 0 {
        return Err(SimError::InvalidConfig("no lanes to spawn on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    lanes.shuffle(&mut rng);
    let mut per_lane: Vec<Vec<usize>> = vec![Vec::new(); lanes.len()];
    for k in 0..cfg.n_virtual {
        per_lane[k % lanes.len().max(1)].push(k);
    }
    let mut vehicles = Vec::with_capacity(cfg.n_virtual);
    for (lane_id, ks) in lanes.iter().zip(per_lane) {
        if ks.is_empty() {
            continue;
        }
        let len = network.lane(lane_id).unwrap().length();
        let slot = len / ks.len() as f64;
        if slot < cfg.length + cfg.g_min {
            return Err(SimError::Overcrowded {
                lane: lane_id.to_string(),
                needed: ks.len(),
            });
        }
        for (i, k) in ks.into_iter().enumerate() {
            vehicles.push(Vehicle {
                id: virtual_vehicle_id(k),
                lane_id: lane_id.to_string(),
                s: (i as f64 + 0.5) * slot + cfg.length / 2.0,
                v: 0.0,
                length: cfg.length,
                v_max: cfg.v_max,
                active: true,
            });
        }
    }
    vehicles.sort_by_key(|v| v.id.clone());
    Ok(SimState {
        time: 0.0,
        vehicles,
        real: None,
    })
}

/// Who a vehicle follows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Leader {
    None,
    Virtual { index: usize, gap: f64 },
    Real { gap: f64 },
}

impl Leader {
    pub fn gap(&self) -> f64 {
        match *self {
            Leader::None => f64::INFINITY,
            Leader::Virtual { gap, .. } | Leader::Real { gap } => gap,
        }
    }
}

/// Leader of every vehicle in the current state (inactive vehicles have none).
pub fn leaders(state: &SimState, network: &RoadNetwork) -> Vec<Leader> {
    let mut by_lane: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, v) in state.vehicles.iter().enumerate() {
        if v.active {
            by_lane.entry(v.lane_id.as_str()).or_default().push(i);
        }
    }
    let mut out = vec![Leader::None; state.vehicles.len()];
    for (lane_id, members) in by_lane {
        let Some(lane) = network.lane(lane_id) else { continue };
        let len = lane.length();
        let looped = network.is_loop(lane_id);
        let real = state.real.as_ref().filter(|r| r.lane_id == lane_id);
        for &i in &members {
            let me = &state.vehicles[i];
            // (distance ahead, tie rank, leader)
            let mut best: Option<(f64, usize, Leader)> = None;
            let mut consider = |dist: f64, rank: usize, leader_len: f64, make: &dyn Fn(f64) -> Leader| {
                if best.as_ref().is_none_or(|(d, r, _)| (dist, rank) < (*d, *r)) {
                    best = Some((dist, rank, make(dist - leader_len)));
                }
            };
            for &j in &members {
                if j == i {
                    continue;
                }
                let other = &state.vehicles[j];
                let raw = other.s - me.s;
                let dist = if looped {
                    let d = raw.rem_euclid(len);
                    if d == 0.0 && j < i {
                        len
                    } else {
                        d
                    }
                } else if raw > 0.0 || (raw == 0.0 && j > i) {
                    raw
                } else {
                    continue;
                };
                consider(dist, j + 1, other.length, &|gap| Leader::Virtual { index: j, gap });
            }
            if let Some(r) = real {
                let raw = r.s - me.s;
                let dist = if looped {
                    raw.rem_euclid(len)
                } else if raw >= 0.0 {
                    raw
                } else {
                    f64::NAN
                };
                if dist.is_finite() {
                    consider(dist, 0, r.length, &|gap| Leader::Real { gap });
                }
            }
            if let Some((_, _, l)) = best {
                out[i] = l;
            }
        }
    }
    out
}

/// Advances the simulation by `dt`. Pure in `(state, network, cfg, dt)`.
pub fn sim_step(state: &SimState, network: &RoadNetwork, cfg: &SimConfig, dt: f64) -> SimState {
    debug_assert!(dt > 0.0 && dt <= cfg.tau);
    let leaders = leaders(state, network);
    let n = state.vehicles.len();

    let cap: Vec<f64> = state
        .vehicles
        .iter()
        .map(|v| {
            let limit = network.lane(&v.lane_id).map_or(f64::INFINITY, |l| l.speed_limit);
            (v.v + cfg.a_accel * dt).min(v.v_max).min(limit)
        })
        .collect();
    // Greatest fixed point of v_i = min(cap_i, safe(v_leader(i), g_i)),
    // reached by monotone sweeps from the caps.
    let mut v_new = cap.clone();
    for _ in 0..=n + 1 {
        let mut changed = false;
        for i in 0..n {
            if !state.vehicles[i].active {
                continue;
            }
            let bound = match leaders[i] {
                Leader::None => f64::INFINITY,
                Leader::Virtual { index, gap } => safe_speed(v_new[index], gap, cfg),
                Leader::Real { gap } => safe_speed(0.0, gap, cfg),
            };
            let v = cap[i].min(bound);
            if v < v_new[i] {
                v_new[i] = v;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut vehicles = state.vehicles.clone();
    for (i, veh) in vehicles.iter_mut().enumerate() {
        if !veh.active {
            continue;
        }
        let Some(lane) = network.lane(&veh.lane_id) else { continue };
        let len = lane.length();
        veh.v = v_new[i];
        let s = veh.s + veh.v * dt;
        if network.is_loop(&veh.lane_id) {
            veh.s = s.rem_euclid(len);
        } else if s > len {
            veh.active = false;
            veh.s = 0.0;
            veh.v = 0.0;
        } else {
            veh.s = s;
        }
    }
    let mut next = SimState {
        time: state.time + dt,
        vehicles,
        real: state.real.clone(),
    };
    respawn(&mut next, network, cfg);
    next
}

/// Re-enters parked vehicles at the start of their lane, at rest, once the
/// entry is clear by at least `gMin`.
fn respawn(state: &mut SimState, network: &RoadNetwork, cfg: &SimConfig) {
    for i in 0..state.vehicles.len() {
        if state.vehicles[i].active {
            continue;
        }
        let lane_id = state.vehicles[i].lane_id.clone();
        if network.lane(&lane_id).is_none() {
            continue;
        }
        let mut clear = true;
        for (j, o) in state.vehicles.iter().enumerate() {
            if j != i && o.active && o.lane_id == lane_id && o.s - o.length < cfg.g_min {
                clear = false;
            }
        }
        if let Some(r) = state.real.as_ref().filter(|r| r.lane_id == lane_id) {
            if r.s - r.length < cfg.g_min && r.s >= 0.0 {
                clear = false;
            }
        }
        if clear {
            let v = &mut state.vehicles[i];
            v.active = true;
            v.s = 0.0;
            v.v = 0.0;
        }
    }
}

/// Gaps of active virtual vehicles to their leaders, keyed by vehicle index.
pub fn follower_gaps(state: &SimState, network: &RoadNetwork) -> Vec<(usize, f64)> {
    leaders(state, network)
        .into_iter()
        .enumerate()
        .filter(|(i, l)| state.vehicles[*i].active && *l != Leader::None)
        .map(|(i, l)| (i, l.gap()))
        .collect()
}

/// Counts transitions from a safe gap to a gap below `gMin - 1e-6` between
/// two consecutive states, and the smallest such post-step gap.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct GapMonitor {
    pub min_gap: Option<f64>,
    pub violations: u64,
}

impl GapMonitor {
    pub fn observe(&mut self, before: &SimState, after: &SimState, network: &RoadNetwork, cfg: &SimConfig) {
        let prev: HashMap<usize, f64> = follower_gaps(before, network).into_iter().collect();
        for (i, g) in follower_gaps(after, network) {
            let Some(&g0) = prev.get(&i) else { continue };
            if g0 < cfg.g_min - 1e-9 {
                continue;
            }
            self.min_gap = Some(self.min_gap.map_or(g, |m| m.min(g)));
            if g < cfg.g_min - 1e-6 {
                self.violations += 1;
            }
        }
    }
}

/// Locates the real car from its observed position.
#[derive(Debug, Clone, Default)]
pub struct RealCarTracker {
    last: Option<(f64, LaneProjection)>,
    pub speed: f64,
    pub off_network: bool,
}

impl RealCarTracker {
    /// `t` is the observation time in seconds; repeated or older observations
    /// are ignored.
    pub fn observe(&mut self, t: f64, lp: LocalPoint, network: &RoadNetwork) {
        if self.last.as_ref().is_some_and(|(t0, _)| t <= *t0) {
            return;
        }
        let Ok(p) = project_to_lane(network, lp) else { return };
        self.off_network = p.lateral > OFF_NETWORK_M;
        if let Some((t0, prev)) = &self.last {
            if prev.lane_id == p.lane_id && !self.off_network {
                let mut ds = p.s - prev.s;
                if network.is_loop(&p.lane_id) {
                    let len = network.lane(&p.lane_id).unwrap().length();
                    if ds < -len / 2.0 {
                        ds += len;
                    } else if ds > len / 2.0 {
                        ds -= len;
                    }
                }
                self.speed = (ds / (t - t0)).max(0.0);
            }
        }
        self.last = Some((t, p));
    }

    pub fn projection(&self) -> Option<&LaneProjection> {
        self.last.as_ref().map(|(_, p)| p)
    }

    /// The obstacle to place into the simulation, absent when off-network.
    pub fn obstacle(&self, length: f64) -> Option<RealObstacle> {
        if self.off_network {
            return None;
        }
        self.last.as_ref().map(|(_, p)| RealObstacle {
            lane_id: p.lane_id.clone(),
            s: p.s,
            length,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Connection, GeoPosition, Lane};

    fn ring(len: f64, limit: f64) -> RoadNetwork {
        RoadNetwork::new(
            GeoPosition::new(38.25, 21.73),
            vec![Lane::new("L1", vec![LocalPoint::new(0.0, 0.0), LocalPoint::new(len, 0.0)], limit).unwrap()],
            vec![Connection {
                from: "L1".into(),
                to: "L1".into(),
            }],
        )
        .unwrap()
    }

    fn open(len: f64) -> RoadNetwork {
        RoadNetwork::new(
            GeoPosition::new(38.25, 21.73),
            vec![Lane::new("L1", vec![LocalPoint::new(0.0, 0.0), LocalPoint::new(len, 0.0)], 30.0).unwrap()],
            vec![],
        )
        .unwrap()
    }

    fn car(k: usize, s: f64, v: f64) -> Vehicle {
        Vehicle {
            id: virtual_vehicle_id(k),
            lane_id: "L1".into(),
            s,
            v,
            length: 4.5,
            v_max: 20.0,
            active: true,
        }
    }

    #[test]
    fn safe_speed_cases() {
        let cfg = SimConfig::default();
        assert_eq!(safe_speed(0.0, cfg.g_min, &cfg), 0.0);
        assert_eq!(safe_speed(0.0, 12.0, &cfg), 10.0);
        assert_eq!(safe_speed(3.0, f64::INFINITY, &cfg), f64::INFINITY);
        assert_eq!(safe_speed(0.0, 0.5, &cfg), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        let cfg = SimConfig {
            tau: 0.05,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn free_flow_cruises_at_limit() {
        let net = ring(400.0, 13.9);
        let cfg = SimConfig {
            n_virtual: 1,
            ..SimConfig::default()
        };
        let mut st = spawn(&net, &cfg).unwrap();
        for _ in 0..200 {
            st = sim_step(&st, &net, &cfg, cfg.dt);
        }
        assert!((st.vehicles[0].v - 13.9).abs() < 1e-12);
    }

    #[test]
    fn follower_stops_behind_stopped_leader() {
        let net = open(10_000.0);
        let cfg = SimConfig::default();
        let mut leader = car(0, 100.0, 0.0);
        leader.v_max = 0.0;
        let mut st = SimState {
            time: 0.0,
            vehicles: vec![leader, car(1, 40.0, 10.0)],
            real: None,
        };
        let mut min_gap = f64::INFINITY;
        for _ in 0..1000 {
            st = sim_step(&st, &net, &cfg, cfg.dt);
            min_gap = min_gap.min(st.vehicles[0].s - st.vehicles[1].s - 4.5);
        }
        assert!(min_gap >= cfg.g_min - 1e-9, "{min_gap}");
        assert!(st.vehicles[1].v < 1e-6);
    }

    #[test]
    fn ring_of_followers_is_consistent() {
        let net = ring(60.0, 30.0);
        let cfg = SimConfig::default();
        let mut st = SimState {
            time: 0.0,
            vehicles: (0..6).map(|k| car(k, k as f64 * 10.0, 5.0)).collect(),
            real: None,
        };
        let mut mon = GapMonitor::default();
        for _ in 0..2000 {
            let next = sim_step(&st, &net, &cfg, cfg.dt);
            mon.observe(&st, &next, &net, &cfg);
            st = next;
        }
        assert_eq!(mon.violations, 0);
        assert!(mon.min_gap.unwrap() >= cfg.g_min - 1e-6);
        // a closed ring moves as a block: gaps stay 5.5 m and speed reaches vMax
        for (_, g) in follower_gaps(&st, &net) {
            assert!((g - 5.5).abs() < 1e-6, "{g}");
        }
        assert!(st.vehicles.iter().all(|v| v.v == 20.0));
    }

    #[test]
    fn open_lane_despawns_and_respawns() {
        let net = open(50.0);
        let cfg = SimConfig::default();
        let mut st = SimState {
            time: 0.0,
            vehicles: vec![car(0, 49.0, 15.0)],
            real: None,
        };
        st = sim_step(&st, &net, &cfg, cfg.dt);
        assert!(st.vehicles[0].active);
        assert_eq!((st.vehicles[0].s, st.vehicles[0].v), (0.0, 0.0));
    }

    #[test]
    fn respawn_waits_for_clear_entry() {
        let net = open(50.0);
        let cfg = SimConfig::default();
        let mut st = SimState {
            time: 0.0,
            vehicles: vec![car(0, 49.0, 15.0), car(1, 5.0, 0.0)],
            real: None,
        };
        st.vehicles[1].v_max = 0.0;
        st = sim_step(&st, &net, &cfg, cfg.dt);
        assert!(!st.vehicles[0].active);
    }

    #[test]
    fn real_car_is_an_obstacle() {
        let net = ring(400.0, 13.9);
        let cfg = SimConfig::default();
        let mut st = SimState {
            time: 0.0,
            vehicles: vec![car(0, 80.0, 10.0)],
            real: Some(RealObstacle {
                lane_id: "L1".into(),
                s: 100.0,
                length: 4.5,
            }),
        };
        for _ in 0..300 {
            st = sim_step(&st, &net, &cfg, cfg.dt);
        }
        let gap = 100.0 - st.vehicles[0].s - 4.5;
        assert!(gap >= cfg.g_min - 1e-9 && gap < cfg.g_min + 0.01, "{gap}");
    }

    #[test]
    fn spawn_is_deterministic_and_spaced() {
        let net = RoadNetwork::new(
            GeoPosition::new(0.0, 0.0),
            vec![
                Lane::new("A", vec![LocalPoint::new(0.0, 0.0), LocalPoint::new(200.0, 0.0)], 10.0).unwrap(),
                Lane::new("B", vec![LocalPoint::new(0.0, 10.0), LocalPoint::new(200.0, 10.0)], 10.0).unwrap(),
            ],
            vec![],
        )
        .unwrap();
        let cfg = SimConfig {
            n_virtual: 5,
            ..SimConfig::default()
        };
        let a = spawn(&net, &cfg).unwrap();
        assert_eq!(a, spawn(&net, &cfg).unwrap());
        assert_eq!(a.vehicles.len(), 5);
        assert!(follower_gaps(&a, &net).iter().all(|(_, g)| *g >= cfg.g_min));
        let crowded = SimConfig {
            n_virtual: 100,
            ..SimConfig::default()
        };
        assert!(matches!(spawn(&net, &crowded), Err(SimError::Overcrowded { .. })));
    }

    #[test]
    fn tracker_estimates_speed_and_flags_off_network() {
        let net = ring(400.0, 13.9);
        let mut t = RealCarTracker::default();
        t.observe(0.0, LocalPoint::new(398.0, 1.0), &net);
        t.observe(1.0, LocalPoint::new(3.0, 1.0), &net);
        assert!((t.speed - 5.0).abs() < 1e-9);
        assert_eq!(t.obstacle(4.5).unwrap().s, 3.0);
        t.observe(0.5, LocalPoint::new(100.0, 0.0), &net);
        assert_eq!(t.projection().unwrap().s, 3.0);
        t.observe(2.0, LocalPoint::new(10.0, 50.0), &net);
        assert!(t.off_network && t.obstacle(4.5).is_none());
    }
}
