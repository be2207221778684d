//! Bridges GPS fixes from MQTT into the real car's DynamicAsset, at most one
//! PATCH per sampling period with the newest fix winning.

use std::collections::BTreeMap;

use dtds_core::model::dtdo::attrs;
use dtds_core::model::normalize_yaw;
use dtds_core::sim::TracePoint;
use dtds_core::{Attribute, EntityId, GeoPoint, Timestamp};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio::time::{Duration, Instant};

use super::{stop_pair, StopHandle, StopSignal};
use crate::client::{ClientError, DtdsClient};
use crate::mqtt::{MqttError, MqttSubscriber, Received};

const MAX_BACKOFF: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fix {
    pub point: TracePoint,
    pub ts: Timestamp,
}

pub fn parse_fix(payload: &[u8]) -> Option<Fix> {
    #[derive(Deserialize)]
    struct Wire {
        #[serde(flatten)]
        point: TracePoint,
        ts: Timestamp,
    }
    let w: Wire = serde_json::from_slice(payload).ok()?;
    GeoPoint::new(w.point.lon, w.point.lat, 0.0).ok()?;
    Some(Fix { point: w.point, ts: w.ts })
}

/// `position` and `pose.orientation`, both observed at the fix stamp.
pub fn fix_fragment(fix: &Fix) -> BTreeMap<String, Attribute> {
    let p = &fix.point;
    let position = GeoPoint::new(p.lon, p.lat, 0.0).expect("checked when parsed");
    let orientation = json!({ "roll": p.roll, "pitch": p.pitch, "yaw": normalize_yaw(p.yaw) });
    BTreeMap::from([
        (attrs::POSITION.to_string(), Attribute::geo(position).observed(fix.ts)),
        (
            attrs::POSE.to_string(),
            Attribute::property(json!({ "orientation": orientation })).observed(fix.ts),
        ),
    ])
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub endpoint: String,
    pub topic: String,
    pub qos: u8,
    pub target: EntityId,
    pub period: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SamplerStats {
    pub fixes: u64,
    pub malformed: u64,
    /// Fixes no newer than the last one written.
    pub stale: u64,
    /// Fixes replaced by a newer one within the same period.
    pub superseded: u64,
    pub patches: u64,
    pub failures: u64,
}

pub struct Sampler {
    stop: StopHandle,
    task: JoinHandle<SamplerStats>,
    subscriber: MqttSubscriber,
}

impl Sampler {
    /// Returns once the fix topic is subscribed.
    pub async fn start(client: DtdsClient, cfg: SamplerConfig) -> Result<Self, MqttError> {
        let (subscriber, rx) = MqttSubscriber::connect(&cfg.endpoint, "sampler", vec![(cfg.topic.clone(), cfg.qos)]).await?;
        let (stop, signal) = stop_pair();
        let task = tokio::spawn(sample_loop(client, cfg, rx, signal));
        Ok(Sampler { stop, task, subscriber })
    }

    /// Flushes the pending fix and stops.
    pub async fn stop(self) -> SamplerStats {
        self.stop.stop();
        let stats = self.task.await.unwrap_or_default();
        self.subscriber.close().await;
        stats
    }
}

pub async fn sample_loop(
    client: DtdsClient,
    cfg: SamplerConfig,
    mut rx: mpsc::UnboundedReceiver<Received>,
    mut stop: StopSignal,
) -> SamplerStats {
    let mut stats = SamplerStats::default();
    let mut pending: Option<Fix> = None;
    let mut last_sent: Option<Timestamp> = None;
    let mut last_patch: Option<Instant> = None;
    let mut retry_at: Option<Instant> = None;
    let mut backoff = Duration::from_millis(100);
    loop {
        let due = pending.map(|_| {
            let now = Instant::now();
            let by_period = last_patch.map_or(now, |t| t + cfg.period);
            retry_at.map_or(by_period, |r| by_period.max(r))
        });
        let flush = tokio::select! {
            msg = rx.recv() => match msg {
                None => true,
                Some(m) => {
                    stats.fixes += 1;
                    match parse_fix(&m.payload) {
                        None => stats.malformed += 1,
                        Some(f) if last_sent.is_some_and(|t| f.ts <= t) => stats.stale += 1,
                        Some(f) => match pending {
                            Some(p) if p.ts > f.ts => stats.stale += 1,
                            Some(_) => {
                                stats.superseded += 1;
                                pending = Some(f);
                            }
                            None => pending = Some(f),
                        },
                    }
                    continue;
                }
            },
            _ = tokio::time::sleep_until(due.unwrap_or_else(Instant::now)), if due.is_some() => false,
            _ = stop.stopped() => true,
        };
        if let Some(fix) = pending.take() {
            last_patch = Some(Instant::now());
            match client.patch_attrs(&cfg.target, &fix_fragment(&fix)).await {
                Ok(_) => {
                    stats.patches += 1;
                    last_sent = Some(fix.ts);
                    retry_at = None;
                    backoff = Duration::from_millis(100);
                }
                Err(ClientError::Api { status: 409, .. }) => {
                    stats.stale += 1;
                    last_sent = Some(last_sent.map_or(fix.ts, |t| t.max(fix.ts)));
                }
                Err(e @ (ClientError::Unreachable(_) | ClientError::Decode(_))) | Err(e @ ClientError::Api { status: 500.., .. }) => {
                    stats.failures += 1;
                    tracing::warn!("sampler patch failed, retrying in {backoff:?}: {e}");
                    if !flush {
                        pending = Some(fix);
                        retry_at = Some(Instant::now() + backoff);
                        backoff = (backoff * 2).min(MAX_BACKOFF);
                    }
                }
                Err(e) => {
                    stats.failures += 1;
                    tracing::warn!("sampler patch rejected: {e}");
                }
            }
        }
        if flush {
            return stats;
        }
    }
}
