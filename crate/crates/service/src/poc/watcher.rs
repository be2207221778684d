//! Scene watcher: subscribes to a scene and turns notifications into lines.

use std::collections::BTreeMap;

use dtds_core::model::dtdo::ChannelDescriptor;
use dtds_core::notify::Notification;
use dtds_core::{EntityId, Timestamp};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::client::{ClientError, DtdsClient};
use crate::mqtt::{MqttError, MqttSubscriber};

#[derive(Debug, thiserror::Error)]
pub enum WatchError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Mqtt(#[from] MqttError),
    #[error("the returned channel has no topic")]
    NoTopic,
}

/// One attribute of one notified entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WatchLine {
    pub received_at: Timestamp,
    pub entity_id: EntityId,
    pub attr: String,
    pub value: Value,
    /// `receivedAt - observedAt`; absent without observedAt.
    pub latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_at: Option<Timestamp>,
}

/// Lines for every attribute of every fragment; markers such as `@deleted`
/// become lines of their own.
pub fn lines_from_notification(payload: &[u8], received_at: Timestamp) -> Vec<WatchLine> {
    let Ok(n) = serde_json::from_slice::<Notification>(payload) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for frag in &n.data {
        let Some(obj) = frag.as_object() else { continue };
        let Some(id) = obj.get("id").and_then(Value::as_str).and_then(|s| EntityId::parse(s).ok()) else {
            continue;
        };
        for (name, attr) in obj {
            if name == "id" || name == "type" {
                continue;
            }
            let observed_at = attr
                .get("observedAt")
                .and_then(Value::as_str)
                .and_then(|s| Timestamp::parse(s).ok());
            let value = attr
                .get("value")
                .or_else(|| attr.get("object"))
                .cloned()
                .unwrap_or_else(|| attr.clone());
            out.push(WatchLine {
                received_at,
                entity_id: id.clone(),
                attr: name.clone(),
                value,
                latency_ms: observed_at.map(|o| (received_at.as_millis() - o.as_millis()) as f64),
                observed_at,
            });
        }
    }
    out
}

pub struct Watcher {
    pub subscription_id: EntityId,
    pub acm: ChannelDescriptor,
    pub watched_ids: Vec<EntityId>,
    client: DtdsClient,
    lines: mpsc::UnboundedReceiver<WatchLine>,
    subscriber: MqttSubscriber,
    pump: JoinHandle<()>,
}

impl Watcher {
    /// Watches the scene and subscribes to the returned channel.
    pub async fn start(client: DtdsClient, scene: &EntityId, endpoint: &str, qos: u8) -> Result<Self, WatchError> {
        let w = client.watch_scene(scene, endpoint, None, Some(qos)).await?;
        let topic = w.acm.topic.clone().ok_or(WatchError::NoTopic)?;
        let connected = MqttSubscriber::connect(&w.acm.endpoint, "watcher", vec![(topic, w.acm.qos)]).await;
        let (subscriber, mut raw) = match connected {
            Ok(c) => c,
            Err(e) => {
                let _ = client.delete_subscription(&w.subscription_id).await;
                return Err(e.into());
            }
        };
        let (tx, lines) = mpsc::unbounded_channel();
        let pump = tokio::spawn(async move {
            while let Some(m) = raw.recv().await {
                for line in lines_from_notification(&m.payload, m.received_at) {
                    if tx.send(line).is_err() {
                        return;
                    }
                }
            }
        });
        Ok(Watcher {
            subscription_id: w.subscription_id,
            acm: w.acm,
            watched_ids: w.watched_ids,
            client,
            lines,
            subscriber,
            pump,
        })
    }

    pub async fn next_line(&mut self) -> Option<WatchLine> {
        self.lines.recv().await
    }

    /// Lines already received, without waiting.
    pub fn drain(&mut self) -> Vec<WatchLine> {
        let mut out = Vec::new();
        while let Ok(l) = self.lines.try_recv() {
            out.push(l);
        }
        out
    }

    /// Removes the subscription and returns the lines not yet taken.
    pub async fn stop(mut self) -> Vec<WatchLine> {
        let _ = self.client.delete_subscription(&self.subscription_id).await;
        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
        let rest = self.drain();
        self.pump.abort();
        self.subscriber.close().await;
        rest
    }
}

/// Latest value per (entity, attribute), rendered as a text table.
#[derive(Debug, Default, Clone)]
pub struct StateTable {
    rows: BTreeMap<(EntityId, String), WatchLine>,
}

impl StateTable {
    pub fn update(&mut self, line: WatchLine) {
        self.rows.insert((line.entity_id.clone(), line.attr.clone()), line);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<44} {:<10} {:>9}  {}\n", "entity", "attr", "lat(ms)", "value");
        for ((id, attr), l) in &self.rows {
            let lat = l.latency_ms.map_or("-".to_string(), |x| format!("{x:.0}"));
            let mut value = l.value.to_string();
            if value.len() > 60 {
                value.truncate(57);
                value.push_str("...");
            }
            out.push_str(&format!("{:<44} {:<10} {:>9}  {}\n", id.as_str(), attr, lat, value));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn notification_becomes_lines() {
        let payload = json!({
            "id": "urn:uuid:1",
            "type": "Notification",
            "subscriptionId": "urn:ngsi-ld:Subscription:s",
            "notifiedAt": "2024-01-01T00:00:01.000Z",
            "data": [
                {
                    "id": "urn:ngsi-ld:DynamicAsset:car",
                    "type": "DynamicAsset",
                    "speed": {"type": "Property", "value": 5.0, "observedAt": "2024-01-01T00:00:00.960Z"},
                    "hasRepresentation": {"type": "Relationship", "object": "urn:ngsi-ld:RepresentationReference:r"}
                },
                {"id": "urn:ngsi-ld:DynamicAsset:gone", "type": "DynamicAsset", "@deleted": true}
            ]
        });
        let received = Timestamp::parse("2024-01-01T00:00:01.000Z").unwrap();
        let lines = lines_from_notification(payload.to_string().as_bytes(), received);
        assert_eq!(lines.len(), 3);
        let speed = lines.iter().find(|l| l.attr == "speed").unwrap();
        assert_eq!(speed.value, json!(5.0));
        assert_eq!(speed.latency_ms, Some(40.0));
        let rel = lines.iter().find(|l| l.attr == "hasRepresentation").unwrap();
        assert_eq!(rel.value, json!("urn:ngsi-ld:RepresentationReference:r"));
        assert_eq!(rel.latency_ms, None);
        let gone = lines.iter().find(|l| l.attr == "@deleted").unwrap();
        assert_eq!(gone.value, json!(true));
        assert!(lines_from_notification(b"not json", received).is_empty());

        let mut table = StateTable::default();
        for l in lines {
            table.update(l);
        }
        assert_eq!(table.len(), 3);
        assert!(table.render().contains("urn:ngsi-ld:DynamicAsset:car"));
    }
}
