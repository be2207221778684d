//! Wall-clock driven simulator controller: steps the virtual vehicles every
//! `dt`, reads the real car from the store, and publishes virtual state
//! every `publishPeriod`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use dtds_core::geo::{geo_to_local, heading_to_yaw, lane_point, local_to_geo, GeoPosition, RoadNetwork};
use dtds_core::model::dtdo::{attrs, kinds};
use dtds_core::sim::{sim_step, spawn, GapMonitor, RealCarTracker, SimConfig, SimError, SimState, Vehicle};
use dtds_core::{Attribute, Entity, EntityId, GeoPoint, Timestamp};
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio::time::{Duration, Instant, MissedTickBehavior};

use super::{stop_pair, StopHandle, StopSignal};
use crate::client::{ClientError, DtdsClient};

const REAL_CAR_READ_TIMEOUT: Duration = Duration::from_millis(50);

#[derive(Debug, thiserror::Error)]
pub enum SimulatorError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot create virtual vehicle {id}: {source}")]
    Create { id: EntityId, source: ClientError },
}

#[derive(Debug, Clone)]
pub struct SimulatorConfig {
    pub network: RoadNetwork,
    pub sim: SimConfig,
    pub real_car: Option<EntityId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimReport {
    pub steps: u64,
    pub min_gap: Option<f64>,
    pub gap_violations: u64,
    pub patches: u64,
    pub patch_failures: u64,
    /// Publish cycles skipped because the previous ones were still in flight.
    pub skipped_cycles: u64,
    /// Steps in which the real car was on the network.
    pub real_car_steps: u64,
    pub real_car_read_failures: u64,
    pub final_speeds: Vec<f64>,
}

/// Position, heading and speed of one vehicle as attributes.
pub fn vehicle_fragment(
    network: &RoadNetwork,
    v: &Vehicle,
    at: Timestamp,
) -> Option<BTreeMap<String, Attribute>> {
    let (lp, heading) = lane_point(network, &v.lane_id, v.s).ok()?;
    let g = local_to_geo(network.origin, lp).ok()?;
    let orientation = json!({ "roll": 0.0, "pitch": 0.0, "yaw": heading_to_yaw(heading) });
    Some(BTreeMap::from([
        (
            attrs::POSITION.to_string(),
            Attribute::geo(GeoPoint::new(g.lon, g.lat, 0.0).ok()?).observed(at),
        ),
        (
            attrs::POSE.to_string(),
            Attribute::property(json!({ "orientation": orientation })).observed(at),
        ),
        (
            attrs::SPEED.to_string(),
            Attribute::property(v.v).unit("MTS").observed(at),
        ),
    ]))
}

type Batch = Vec<(EntityId, BTreeMap<String, Attribute>)>;

pub struct Simulator {
    stop: StopHandle,
    task: JoinHandle<SimReport>,
}

impl Simulator {
    /// Spawns the vehicles and makes sure their entities exist.
    pub async fn start(client: DtdsClient, cfg: SimulatorConfig) -> Result<Self, SimulatorError> {
        let state = spawn(&cfg.network, &cfg.sim)?;
        let now = Timestamp::now();
        for v in &state.vehicles {
            let Some(frag) = vehicle_fragment(&cfg.network, v, now) else { continue };
            let mut e = Entity::new(v.id.clone(), kinds::DYNAMIC_ASSET);
            e.attributes = frag.clone();
            match client.create_entity(&e).await {
                Ok(()) => {}
                Err(ClientError::Api { status: 409, .. }) => {
                    client
                        .patch_attrs(&v.id, &frag)
                        .await
                        .map_err(|source| SimulatorError::Create { id: v.id.clone(), source })?;
                }
                Err(source) => return Err(SimulatorError::Create { id: v.id.clone(), source }),
            }
        }
        let (stop, signal) = stop_pair();
        let task = tokio::spawn(step_loop(client, cfg, state, signal));
        Ok(Simulator { stop, task })
    }

    pub async fn stop(self) -> SimReport {
        self.stop.stop();
        self.task.await.unwrap_or_default()
    }
}

async fn read_real_car(client: &DtdsClient, id: &EntityId, origin: GeoPosition) -> Option<(f64, dtds_core::geo::LocalPoint)> {
    let (e, _) = tokio::time::timeout(REAL_CAR_READ_TIMEOUT, client.get_entity(id)).await.ok()?.ok()?;
    let a = e.attr(attrs::POSITION)?;
    let p = a.as_geo()?;
    let t = a.observed_at?.as_millis() as f64 / 1e3;
    let lp = geo_to_local(origin, GeoPosition::new(p.lat, p.lon)).ok()?;
    Some((t, lp))
}

async fn step_loop(client: DtdsClient, cfg: SimulatorConfig, mut state: SimState, mut stop: StopSignal) -> SimReport {
    let sim = &cfg.sim;
    let dt = Duration::from_secs_f64(sim.dt);
    let publish_every = ((sim.publish_period / sim.dt).round() as u64).max(1);
    let patches = Arc::new(AtomicU64::new(0));
    let failures = Arc::new(AtomicU64::new(0));
    let (tx, rx) = mpsc::channel::<Batch>(2);
    let publisher = tokio::spawn(publish_loop(client.clone(), rx, patches.clone(), failures.clone()));

    let mut report = SimReport::default();
    let mut monitor = GapMonitor::default();
    let mut tracker = RealCarTracker::default();
    let wall_start = Timestamp::now();
    let mut ticks = tokio::time::interval_at(Instant::now() + dt, dt);
    ticks.set_missed_tick_behavior(MissedTickBehavior::Burst);
    loop {
        tokio::select! {
            _ = ticks.tick() => {}
            _ = stop.stopped() => break,
        }
        if let Some(real) = &cfg.real_car {
            match read_real_car(&client, real, cfg.network.origin).await {
                Some((t, lp)) => tracker.observe(t, lp, &cfg.network),
                None => report.real_car_read_failures += 1,
            }
            state.real = tracker.obstacle(sim.length);
            if state.real.is_some() {
                report.real_car_steps += 1;
            }
        }
        let next = sim_step(&state, &cfg.network, sim, sim.dt);
        monitor.observe(&state, &next, &cfg.network, sim);
        state = next;
        report.steps += 1;
        if report.steps % publish_every == 0 {
            let at = wall_start.plus_millis((state.time * 1e3).round() as i64);
            let batch: Batch = state
                .vehicles
                .iter()
                .filter_map(|v| vehicle_fragment(&cfg.network, v, at).map(|f| (v.id.clone(), f)))
                .collect();
            if tx.try_send(batch).is_err() {
                report.skipped_cycles += 1;
                tracing::warn!("simulator publish cycle skipped at t={:.1}", state.time);
            }
        }
    }
    drop(tx);
    let _ = publisher.await;
    report.min_gap = monitor.min_gap;
    report.gap_violations = monitor.violations;
    report.patches = patches.load(Ordering::Relaxed);
    report.patch_failures = failures.load(Ordering::Relaxed);
    report.final_speeds = state.vehicles.iter().map(|v| v.v).collect();
    report
}

/// Batches go out in order; patches within one batch concurrently.
async fn publish_loop(client: DtdsClient, mut rx: mpsc::Receiver<Batch>, ok: Arc<AtomicU64>, failed: Arc<AtomicU64>) {
    while let Some(batch) = rx.recv().await {
        let results = join_all(batch.iter().map(|(id, frag)| client.patch_attrs(id, frag))).await;
        for r in results {
            match r {
                Ok(_) | Err(ClientError::Api { status: 409, .. }) => {
                    ok.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => {
                    failed.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!("virtual vehicle patch failed: {e}");
                }
            }
        }
    }
}
