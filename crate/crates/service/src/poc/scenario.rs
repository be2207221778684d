//! End-to-end run: replayer, sampler, simulator and watcher against a live
//! server and broker, followed by a report computed from the change log.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use dtds_core::geo::RoadNetwork;
use dtds_core::model::dtdo::attrs;
use dtds_core::sim::{load_trace, synthetic_trace, SimConfig, TracePoint};
use dtds_core::store::{ChangeEvent, Tenant};
use dtds_core::{EntityId, Timestamp};
use serde::{Deserialize, Serialize};

use super::fixtures::load_entity_dir;
use super::histogram::{HistogramSummary, LatencyHistogram};
use super::replay::{ingest_topic, replay_trace, PublishedFix, ReplayLog};
use super::sampler::{Sampler, SamplerConfig, SamplerStats};
use super::simulator::{SimReport, Simulator, SimulatorConfig};
use super::stop_pair;
use super::watcher::{WatchLine, Watcher};
use crate::client::{ClientError, DtdsClient};
use crate::dispatch::DispatchStats;
use crate::mqtt::{MqttError, MqttPublisher};

/// A constant-speed drive generated instead of reading a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SyntheticTrace {
    pub lane: String,
    #[serde(default)]
    pub start_s: f64,
    pub speed: f64,
    #[serde(default = "default_hz")]
    pub hz: f64,
}

fn default_hz() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioConfig {
    pub server: String,
    /// `mqtt://host:port`
    pub broker: String,
    #[serde(default)]
    pub tenant: String,
    pub scene_id: EntityId,
    pub real_car_id: EntityId,
    pub network: PathBuf,
    /// Entity documents created before the run; conflicts are ignored.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    /// NDJSON trace; `synthetic` is used when absent.
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticTrace>,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_period")]
    pub sampling_period_s: f64,
    #[serde(default = "default_speed_factor")]
    pub speed_factor: f64,
    #[serde(default = "default_qos")]
    pub qos: u8,
}

fn default_duration() -> f64 {
    60.0
}
fn default_period() -> f64 {
    0.1
}
fn default_speed_factor() -> f64 {
    1.0
}
fn default_qos() -> u8 {
    1
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("no trace: set either `trace` or `synthetic`")]
    NoTrace,
}

impl ScenarioConfig {
    /// Reads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let err = |reason: String| ScenarioError::Config { path: path.to_path_buf(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut cfg: ScenarioConfig = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.network);
        if let Some(p) = &mut self.fixtures {
            fix(p);
        }
        if let Some(p) = &mut self.trace {
            fix(p);
        }
    }

    pub fn sampling_period(&self) -> Duration {
        Duration::from_secs_f64(self.sampling_period_s)
    }

    /// Two sampling periods, in ms.
    pub fn staleness_bound_ms(&self) -> f64 {
        2.0 * self.sampling_period_s * 1e3
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StalenessReport {
    pub bound_ms: f64,
    pub fixes: usize,
    /// Fixes whose first covering commit landed after the bound, or never.
    pub violations: usize,
    pub uncovered: usize,
    pub max_lag_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CoverageReport {
    pub expected: usize,
    pub received: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyReport {
    /// Real car: fix stamp to store commit.
    pub ingest: HistogramSummary,
    /// Real car: store commit to watcher receipt.
    pub notify: HistogramSummary,
    /// Real car: fix stamp to watcher receipt.
    pub end_to_end: HistogramSummary,
    /// Virtual vehicles: sim stamp to watcher receipt.
    pub virtual_end_to_end: HistogramSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioReport {
    pub started_at: Timestamp,
    pub duration_s: f64,
    pub aborted: bool,
    pub errors: Vec<String>,
    pub fixes_published: usize,
    pub publish_failures: u64,
    pub max_publish_lag_ms: Option<f64>,
    pub sampler: SamplerStats,
    pub sim: SimReport,
    pub staleness: StalenessReport,
    pub position_notifications: CoverageReport,
    pub watch_lines: usize,
    pub latency: LatencyReport,
    /// Dispatcher counters accumulated during the run.
    pub dispatch: Option<DispatchStats>,
}

impl ScenarioReport {
    fn empty(started_at: Timestamp) -> Self {
        let mut h = LatencyHistogram::new();
        let s = h.summary();
        ScenarioReport {
            started_at,
            duration_s: 0.0,
            aborted: false,
            errors: Vec::new(),
            fixes_published: 0,
            publish_failures: 0,
            max_publish_lag_ms: None,
            sampler: SamplerStats::default(),
            sim: SimReport::default(),
            staleness: StalenessReport::default(),
            position_notifications: CoverageReport::default(),
            watch_lines: 0,
            latency: LatencyReport {
                ingest: s.clone(),
                notify: s.clone(),
                end_to_end: s.clone(),
                virtual_end_to_end: s,
            },
            dispatch: None,
        }
    }

    fn abort(mut self, e: impl std::fmt::Display) -> Self {
        self.aborted = true;
        self.errors.push(e.to_string());
        self
    }

    pub fn render(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.1}"));
        let mut out = String::new();
        out.push_str(&format!(
            "scenario started {} ran {:.1} s{}\n",
            self.started_at,
            self.duration_s,
            if self.aborted { " (aborted)" } else { "" }
        ));
        for e in &self.errors {
            out.push_str(&format!("  error: {e}\n"));
        }
        out.push_str(&format!(
            "fixes published {} (failures {}, max lag {} ms)\n",
            self.fixes_published,
            self.publish_failures,
            opt(self.max_publish_lag_ms)
        ));
        let s = &self.sampler;
        out.push_str(&format!(
            "sampler: fixes {} patches {} superseded {} stale {} malformed {} failures {}\n",
            s.fixes, s.patches, s.superseded, s.stale, s.malformed, s.failures
        ));
        let m = &self.sim;
        out.push_str(&format!(
            "simulator: steps {} patches {} failures {} skipped cycles {} min gap {} m, violations {}\n",
            m.steps,
            m.patches,
            m.patch_failures,
            m.skipped_cycles,
            opt(m.min_gap),
            m.gap_violations
        ));
        let st = &self.staleness;
        out.push_str(&format!(
            "staleness: {} fixes, {} over {:.0} ms ({} never stored), max {} ms\n",
            st.fixes,
            st.violations,
            st.bound_ms,
            st.uncovered,
            opt(st.max_lag_ms)
        ));
        let c = &self.position_notifications;
        out.push_str(&format!(
            "position notifications: {}/{} ({:.2}%), {} watch lines\n",
            c.received,
            c.expected,
            c.ratio * 100.0,
            self.watch_lines
        ));
        if let Some(d) = &self.dispatch {
            out.push_str(&format!(
                "dispatch: enqueued {} delivered {} dropped {} overflow {}\n",
                d.enqueued, d.delivered, d.dropped, d.overflow
            ));
        }
        out.push_str(&self.latency.ingest.render("ingest (fix -> commit)"));
        out.push_str(&self.latency.notify.render("notify (commit -> receipt)"));
        out.push_str(&self.latency.end_to_end.render("end to end (fix -> receipt)"));
        out.push_str(&self.latency.virtual_end_to_end.render("virtual vehicles (sim -> receipt)"));
        out
    }
}

/// For every published fix, the lag from its stamp to the first commit that
/// stored a fix at least as new. `commits` holds (observedAt, committedAt).
pub fn staleness(published: &[PublishedFix], commits: &[(Timestamp, Timestamp)], bound_ms: f64) -> StalenessReport {
    let mut by_observed: Vec<(Timestamp, Timestamp)> = commits.to_vec();
    by_observed.sort();
    // suffix minimum of commit times over observedAt order
    let mut earliest_from = vec![Timestamp::from_millis(i64::MAX); by_observed.len() + 1];
    for i in (0..by_observed.len()).rev() {
        earliest_from[i] = earliest_from[i + 1].min(by_observed[i].1);
    }
    let mut report = StalenessReport {
        bound_ms,
        fixes: published.len(),
        ..Default::default()
    };
    for fix in published {
        let i = by_observed.partition_point(|(o, _)| *o < fix.ts);
        if i == by_observed.len() {
            report.uncovered += 1;
            report.violations += 1;
            continue;
        }
        let lag = (earliest_from[i].as_millis() - fix.ts.as_millis()) as f64;
        report.max_lag_ms = Some(report.max_lag_ms.map_or(lag, |m: f64| m.max(lag)));
        if lag > bound_ms {
            report.violations += 1;
        }
    }
    report
}

/// Position commits matched by a watch line for the same entity and
/// observedAt.
pub fn position_coverage(expected: &[&ChangeEvent], lines: &[WatchLine]) -> CoverageReport {
    let seen: std::collections::HashSet<(&EntityId, Timestamp)> = lines
        .iter()
        .filter(|l| l.attr == attrs::POSITION)
        .filter_map(|l| Some((&l.entity_id, l.observed_at?)))
        .collect();
    let received = expected
        .iter()
        .filter(|e| e.attr.as_ref().and_then(|a| a.observed_at).is_some_and(|o| seen.contains(&(&e.entity_id, o))))
        .count();
    CoverageReport {
        expected: expected.len(),
        received,
        ratio: if expected.is_empty() { 1.0 } else { received as f64 / expected.len() as f64 },
    }
}

fn latency(
    events: &[ChangeEvent],
    lines: &[WatchLine],
    real_car: &EntityId,
) -> LatencyReport {
    let mut ingest = LatencyHistogram::new();
    let mut notify = LatencyHistogram::new();
    let mut e2e = LatencyHistogram::new();
    let mut virt = LatencyHistogram::new();
    let mut committed: HashMap<(&EntityId, Timestamp), Timestamp> = HashMap::new();
    for e in events.iter().filter(|e| e.attr_name == attrs::POSITION) {
        let Some(o) = e.attr.as_ref().and_then(|a| a.observed_at) else { continue };
        if &e.entity_id == real_car {
            ingest.record((e.committed_at.as_millis() - o.as_millis()) as f64);
        }
        committed.entry((&e.entity_id, o)).or_insert(e.committed_at);
    }
    for l in lines.iter().filter(|l| l.attr == attrs::POSITION) {
        let Some(latency) = l.latency_ms else { continue };
        if &l.entity_id == real_car {
            e2e.record(latency);
            if let Some(c) = l.observed_at.and_then(|o| committed.get(&(&l.entity_id, o))) {
                notify.record((l.received_at.as_millis() - c.as_millis()) as f64);
            }
        } else {
            virt.record(latency);
        }
    }
    LatencyReport {
        ingest: ingest.summary(),
        notify: notify.summary(),
        end_to_end: e2e.summary(),
        virtual_end_to_end: virt.summary(),
    }
}

fn dispatch_delta(before: &DispatchStats, after: &DispatchStats) -> DispatchStats {
    DispatchStats {
        subscriptions: after.subscriptions,
        enqueued: after.enqueued.saturating_sub(before.enqueued),
        delivered: after.delivered.saturating_sub(before.delivered),
        failed_attempts: after.failed_attempts.saturating_sub(before.failed_attempts),
        dropped: after.dropped.saturating_sub(before.dropped),
        overflow: after.overflow.saturating_sub(before.overflow),
        queued: after.queued,
    }
}

fn build_trace(cfg: &ScenarioConfig, network: &RoadNetwork) -> Result<Vec<TracePoint>, String> {
    match (&cfg.trace, &cfg.synthetic) {
        (Some(p), _) => load_trace(p).map_err(|e| format!("{}: {e}", p.display())),
        (None, Some(s)) => {
            synthetic_trace(network, &s.lane, s.start_s, s.speed, s.hz, cfg.duration_s).map_err(|e| e.to_string())
        }
        (None, None) => Err(ScenarioError::NoTrace.to_string()),
    }
}

async fn create_fixtures(client: &DtdsClient, dir: &Path) -> Result<usize, String> {
    let entities = load_entity_dir(dir).map_err(|e| e.to_string())?;
    let mut created = 0;
    for e in &entities {
        match client.create_entity(e).await {
            Ok(()) => created += 1,
            Err(ClientError::Api { status: 409, .. }) => {}
            Err(err) => return Err(format!("cannot create {}: {err}", e.id)),
        }
    }
    Ok(created)
}

/// Runs the scenario. Component failures abort the run and come back as a
/// report with `aborted` set and the cause in `errors`.
pub async fn run_scenario(cfg: &ScenarioConfig) -> ScenarioReport {
    let started_at = Timestamp::now();
    let report = ScenarioReport::empty(started_at);
    let tenant = match Tenant::new(&cfg.tenant) {
        Ok(t) => t,
        Err(e) => return report.abort(e),
    };
    let network = match RoadNetwork::load(&cfg.network) {
        Ok(n) => n,
        Err(e) => return report.abort(format!("{}: {e}", cfg.network.display())),
    };
    let trace = match build_trace(cfg, &network) {
        Ok(t) => t,
        Err(e) => return report.abort(e),
    };
    let client = DtdsClient::new(&cfg.server, &cfg.tenant);
    if let Some(dir) = &cfg.fixtures {
        if let Err(e) = create_fixtures(&client, dir).await {
            return report.abort(e);
        }
    }
    let stats_before = match client.stats().await {
        Ok(s) => s.dispatch,
        Err(e) => return report.abort(e),
    };
    run_components(cfg, client, &tenant, network, trace, report, stats_before).await
}

async fn run_components(
    cfg: &ScenarioConfig,
    client: DtdsClient,
    tenant: &Tenant,
    network: RoadNetwork,
    trace: Vec<TracePoint>,
    mut report: ScenarioReport,
    stats_before: DispatchStats,
) -> ScenarioReport {
    let clock = tokio::time::Instant::now();
    let mut watcher = match Watcher::start(client.clone(), &cfg.scene_id, &cfg.broker, cfg.qos).await {
        Ok(w) => w,
        Err(e) => return report.abort(e),
    };
    let ready_seq = match client.latest_seq().await {
        Ok(s) => s,
        Err(e) => {
            watcher.stop().await;
            return report.abort(e);
        }
    };
    let sampler_cfg = SamplerConfig {
        endpoint: cfg.broker.clone(),
        topic: ingest_topic(tenant, &cfg.real_car_id),
        qos: cfg.qos,
        target: cfg.real_car_id.clone(),
        period: cfg.sampling_period(),
    };
    let sampler = match Sampler::start(client.clone(), sampler_cfg.clone()).await {
        Ok(s) => s,
        Err(e) => {
            watcher.stop().await;
            return report.abort(e);
        }
    };
    let sim_cfg = SimulatorConfig {
        network,
        sim: cfg.sim.clone(),
        real_car: Some(cfg.real_car_id.clone()),
    };
    let simulator = match Simulator::start(client.clone(), sim_cfg).await {
        Ok(s) => s,
        Err(e) => {
            sampler.stop().await;
            watcher.stop().await;
            return report.abort(e);
        }
    };
    let publisher = match MqttPublisher::connect(&cfg.broker, "replayer").await {
        Ok(p) => p,
        Err(e) => {
            simulator.stop().await;
            sampler.stop().await;
            watcher.stop().await;
            return report.abort(e);
        }
    };

    let (stop, signal) = stop_pair();
    let run_for = Duration::from_secs_f64(cfg.duration_s);
    let replay = replay_trace(&trace, cfg.speed_factor, &publisher, &sampler_cfg.topic, cfg.qos, signal);
    let timer = async {
        tokio::time::sleep(run_for).await;
        stop.stop();
    };
    let (replayed, ()) = tokio::join!(replay, async {
        tokio::select! {
            _ = timer => {}
            _ = publisher_dead(&publisher) => {}
        }
    });
    let log = match replayed {
        Ok(log) => log,
        Err(e) => {
            report = report.abort(e);
            ReplayLog::default()
        }
    };
    if !publisher.is_alive() && !report.aborted {
        report = report.abort(MqttError::Disconnected("replayer lost the broker".into()));
    }
    // let the last fix and sim batch land
    tokio::time::sleep(cfg.sampling_period() * 3).await;
    report.sampler = sampler.stop().await;
    report.sim = simulator.stop().await;
    publisher.close().await;
    tokio::time::sleep(Duration::from_millis(500)).await;
    let mut lines = watcher.drain();
    lines.extend(watcher.stop().await);
    report.duration_s = clock.elapsed().as_secs_f64();

    let events = match client.all_changes(ready_seq).await {
        Ok(ev) => ev,
        Err(e) => {
            report.errors.push(format!("cannot read the change log: {e}"));
            Vec::new()
        }
    };
    match client.stats().await {
        Ok(s) => report.dispatch = Some(dispatch_delta(&stats_before, &s.dispatch)),
        Err(e) => report.errors.push(format!("cannot read server stats: {e}")),
    }
    summarize(cfg, &mut report, &log, &events, &lines);
    report
}

/// Resolves once the replayer's broker link is gone for good.
async fn publisher_dead(p: &MqttPublisher) {
    while p.is_alive() {
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

fn summarize(cfg: &ScenarioConfig, report: &mut ScenarioReport, log: &ReplayLog, events: &[ChangeEvent], lines: &[WatchLine]) {
    report.fixes_published = log.published.len();
    report.publish_failures = log.failures;
    report.max_publish_lag_ms = log.published.iter().map(|p| p.lag_ms).reduce(f64::max);
    let real_commits: Vec<(Timestamp, Timestamp)> = events
        .iter()
        .filter(|e| e.entity_id == cfg.real_car_id && e.attr_name == attrs::POSITION)
        .filter_map(|e| Some((e.attr.as_ref()?.observed_at?, e.committed_at)))
        .collect();
    report.staleness = staleness(&log.published, &real_commits, cfg.staleness_bound_ms());
    let expected: Vec<&ChangeEvent> = events.iter().filter(|e| e.attr_name == attrs::POSITION).collect();
    report.position_notifications = position_coverage(&expected, lines);
    report.watch_lines = lines.len();
    report.latency = latency(events, lines, &cfg.real_car_id);
}

#[cfg(test)]
mod tests {
    use super::*;
    use dtds_core::Attribute;
    use dtds_core::GeoPoint;
    use serde_json::json;

    fn fix(ms: i64) -> PublishedFix {
        PublishedFix {
            index: 0,
            ts: Timestamp::from_millis(ms),
            lag_ms: 0.0,
        }
    }

    fn t(ms: i64) -> Timestamp {
        Timestamp::from_millis(ms)
    }

    #[test]
    fn staleness_uses_the_first_covering_commit() {
        let published = [fix(1000), fix(1100), fix(1200), fix(1300)];
        // 1100 superseded by 1200; 1300 never stored
        let commits = [(t(1000), t(1020)), (t(1200), t(1250))];
        let r = staleness(&published, &commits, 200.0);
        assert_eq!(r.fixes, 4);
        assert_eq!(r.uncovered, 1);
        assert_eq!(r.violations, 1);
        assert_eq!(r.max_lag_ms, Some(150.0));

        let late = [(t(1000), t(1300))];
        let r = staleness(&[fix(1000)], &late, 200.0);
        assert_eq!(r.violations, 1);
        assert_eq!(r.max_lag_ms, Some(300.0));
    }

    #[test]
    fn coverage_matches_on_entity_and_stamp() {
        let id = EntityId::ngsi("DynamicAsset", "a").unwrap();
        let ev = |o: i64| ChangeEvent {
            seq: 1,
            tenant: Tenant::new("").unwrap(),
            entity_id: id.clone(),
            entity_type: "DynamicAsset".into(),
            attr_name: "position".into(),
            attr: Some(Attribute::geo(GeoPoint::new(21.73, 38.25, 0.0).unwrap()).observed(t(o))),
            committed_at: t(o + 5),
        };
        let line = |o: i64| WatchLine {
            received_at: t(o + 20),
            entity_id: id.clone(),
            attr: "position".into(),
            value: json!(null),
            latency_ms: Some(20.0),
            observed_at: Some(t(o)),
        };
        let events = [ev(100), ev(200), ev(300), ev(400)];
        let refs: Vec<&ChangeEvent> = events.iter().collect();
        let c = position_coverage(&refs, &[line(100), line(300), line(400), line(999)]);
        assert_eq!((c.expected, c.received), (4, 3));
        assert!((c.ratio - 0.75).abs() < 1e-12);
        assert_eq!(position_coverage(&[], &[]).ratio, 1.0);

        let lat = latency(&events, &[line(100)], &id);
        assert_eq!(lat.ingest.count, 4);
        assert_eq!(lat.ingest.p50_ms, Some(5.0));
        assert_eq!(lat.notify.p50_ms, Some(15.0));
        assert_eq!(lat.end_to_end.p50_ms, Some(20.0));
        assert_eq!(lat.virtual_end_to_end.count, 0);
    }

    #[test]
    fn config_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.json");
        std::fs::write(
            &path,
            r#"{"server":"http://127.0.0.1:1","broker":"mqtt://127.0.0.1:2",
                "sceneId":"urn:ngsi-ld:SceneHead:poc","realCarId":"urn:ngsi-ld:DynamicAsset:realcar",
                "network":"network.json","synthetic":{"lane":"L1","speed":5.0},"sim":{"nVirtual":3}}"#,
        )
        .unwrap();
        let cfg = ScenarioConfig::load(&path).unwrap();
        assert_eq!(cfg.network, dir.path().join("network.json"));
        assert_eq!(cfg.duration_s, 60.0);
        assert_eq!(cfg.qos, 1);
        assert_eq!(cfg.sim.n_virtual, 3);
        assert_eq!(cfg.sim.dt, 0.1);
        assert_eq!(cfg.staleness_bound_ms(), 200.0);
        assert_eq!(cfg.synthetic.as_ref().unwrap().hz, 10.0);
    }
}
