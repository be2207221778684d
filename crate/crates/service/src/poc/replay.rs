//! Publishes a GPS trace over MQTT on the trace's own schedule.

use dtds_core::sim::TracePoint;
use dtds_core::store::Tenant;
use dtds_core::{EntityId, Timestamp};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::time::{Duration, Instant};

use super::StopSignal;
use crate::mqtt::{MqttError, MqttPublisher};

pub fn ingest_topic(tenant: &Tenant, vehicle: &EntityId) -> String {
    format!("dtds/{tenant}/ingest/{}", vehicle.local_name())
}

/// The trace point plus its wall-clock publish stamp.
pub fn fix_payload(p: &TracePoint, ts: Timestamp) -> Value {
    let mut v = serde_json::to_value(p).expect("trace point");
    v["ts"] = json!(ts);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PublishedFix {
    pub index: usize,
    pub ts: Timestamp,
    /// Schedule error, ms; positive when late.
    pub lag_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReplayLog {
    pub published: Vec<PublishedFix>,
    pub failures: u64,
}

/// Publishes point `k` at `start + t_k / speed_factor`. Individual publish
/// failures are counted and skipped.
pub async fn replay_trace(
    trace: &[TracePoint],
    speed_factor: f64,
    publisher: &MqttPublisher,
    topic: &str,
    qos: u8,
    mut stop: StopSignal,
) -> Result<ReplayLog, MqttError> {
    assert!(speed_factor > 0.0 && speed_factor.is_finite(), "speed factor must be positive");
    let mut log = ReplayLog::default();
    let Some(first) = trace.first() else { return Ok(log) };
    let start = Instant::now();
    for (index, p) in trace.iter().enumerate() {
        let due = start + Duration::from_secs_f64((p.t - first.t) / speed_factor);
        tokio::select! {
            _ = tokio::time::sleep_until(due) => {}
            _ = stop.stopped() => break,
        }
        let ts = Timestamp::now();
        let lag_ms = Instant::now().saturating_duration_since(due).as_secs_f64() * 1e3;
        let payload = serde_json::to_vec(&fix_payload(p, ts)).expect("fix payload");
        match publisher.publish(topic, qos, payload).await {
            Ok(()) => log.published.push(PublishedFix { index, ts, lag_ms }),
            Err(e) => {
                if !publisher.is_alive() && log.published.is_empty() {
                    return Err(e);
                }
                tracing::warn!("fix {index} not published: {e}");
                log.failures += 1;
            }
        }
    }
    Ok(log)
}
