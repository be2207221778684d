//! MQTT publishing with per-message completion, and a reconnecting subscriber.
//!
//! `rumqttc` reports publishes as `Outgoing::Publish(pkid)` events in request
//! order, so a FIFO of waiters, filled under the same lock that feeds the
//! request channel, attributes each event to its caller. QoS 0 completes when
//! the packet is written, QoS 1 when its PUBACK arrives. A broken connection
//! fails every waiter and retires the link; the pool opens a fresh one on the
//! next publish, so no stale packet is ever resent on a new session.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use dtds_core::model::dtdo::parse_mqtt_endpoint;
use dtds_core::Timestamp;
use rumqttc::{AsyncClient, Event, EventLoop, MqttOptions, Outgoing, Packet, QoS};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(3);
pub const ACK_TIMEOUT: Duration = Duration::from_secs(5);
const MAX_PACKET: usize = 4 * 1024 * 1024;
const REQUEST_CAPACITY: usize = 10_000;
const RECONNECT_PAUSE: Duration = Duration::from_millis(250);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MqttError {
    #[error("`{0}` is not an mqtt://host:port endpoint")]
    BadEndpoint(String),
    #[error("broker unreachable: {0}")]
    BrokerUnreachable(String),
    #[error("connection lost: {0}")]
    Disconnected(String),
    #[error("no acknowledgement within {0:?}")]
    AckTimeout(Duration),
}

pub fn qos_of(level: u8) -> QoS {
    if level == 0 {
        QoS::AtMostOnce
    } else {
        QoS::AtLeastOnce
    }
}

static CLIENT_SEQ: AtomicU64 = AtomicU64::new(0);

/// A client id unique within the process and across processes.
pub fn client_id(role: &str) -> String {
    let n = CLIENT_SEQ.fetch_add(1, Ordering::Relaxed);
    let tag = uuid::Uuid::new_v4().simple().to_string();
    format!("dtds-{role}-{}-{n}", &tag[..8])
}

fn options(endpoint: &str, id: &str) -> Result<MqttOptions, MqttError> {
    let (host, port) = parse_mqtt_endpoint(endpoint).ok_or_else(|| MqttError::BadEndpoint(endpoint.to_string()))?;
    let mut o = MqttOptions::new(id, host, port);
    o.set_keep_alive(Duration::from_secs(5));
    o.set_max_packet_size(MAX_PACKET, MAX_PACKET);
    o.set_clean_session(true);
    Ok(o)
}

type Waiter = oneshot::Sender<Result<(), MqttError>>;

#[derive(Default)]
struct Pending {
    queued: VecDeque<(QoS, Waiter)>,
    inflight: HashMap<u16, Waiter>,
}

impl Pending {
    fn fail_all(&mut self, why: &str) {
        for (_, w) in self.queued.drain(..) {
            let _ = w.send(Err(MqttError::Disconnected(why.to_string())));
        }
        for (_, w) in self.inflight.drain() {
            let _ = w.send(Err(MqttError::Disconnected(why.to_string())));
        }
    }
}

/// One broker session used for publishing.
pub struct MqttPublisher {
    client: AsyncClient,
    pending: Arc<Mutex<Pending>>,
    send_order: tokio::sync::Mutex<()>,
    alive: Arc<AtomicBool>,
    task: JoinHandle<()>,
}

impl MqttPublisher {
    pub async fn connect(endpoint: &str, role: &str) -> Result<Self, MqttError> {
        let (client, eventloop) = AsyncClient::new(options(endpoint, &client_id(role))?, REQUEST_CAPACITY);
        let pending = Arc::new(Mutex::new(Pending::default()));
        let alive = Arc::new(AtomicBool::new(true));
        let (ready_tx, ready_rx) = oneshot::channel();
        let task = tokio::spawn(publisher_loop(eventloop, pending.clone(), alive.clone(), ready_tx));
        let ready = tokio::time::timeout(CONNECT_TIMEOUT, ready_rx).await;
        match ready {
            Ok(Ok(Ok(()))) => Ok(MqttPublisher {
                client,
                pending,
                send_order: tokio::sync::Mutex::new(()),
                alive,
                task,
            }),
            Ok(Ok(Err(e))) => {
                task.abort();
                Err(MqttError::BrokerUnreachable(e))
            }
            _ => {
                task.abort();
                Err(MqttError::BrokerUnreachable(format!("{endpoint}: no CONNACK")))
            }
        }
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::Acquire)
    }

    /// Resolves once the broker has taken the message (written for QoS 0,
    /// acknowledged for QoS 1).
    pub async fn publish(&self, topic: &str, qos: u8, payload: impl Into<Vec<u8>>) -> Result<(), MqttError> {
        if !self.is_alive() {
            return Err(MqttError::Disconnected("link closed".into()));
        }
        let qos = qos_of(qos);
        let (tx, rx) = oneshot::channel();
        {
            let _order = self.send_order.lock().await;
            self.pending.lock().unwrap().queued.push_back((qos, tx));
            if let Err(e) = self.client.publish(topic, qos, false, payload.into()).await {
                self.pending.lock().unwrap().queued.pop_back();
                return Err(MqttError::Disconnected(e.to_string()));
            }
        }
        match tokio::time::timeout(ACK_TIMEOUT, rx).await {
            Ok(Ok(r)) => r,
            Ok(Err(_)) => Err(MqttError::Disconnected("link closed".into())),
            Err(_) => Err(MqttError::AckTimeout(ACK_TIMEOUT)),
        }
    }

    pub async fn close(&self) {
        let _ = self.client.disconnect().await;
        tokio::time::sleep(Duration::from_millis(20)).await;
        self.task.abort();
        self.alive.store(false, Ordering::Release);
    }
}

impl Drop for MqttPublisher {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn publisher_loop(
    mut eventloop: EventLoop,
    pending: Arc<Mutex<Pending>>,
    alive: Arc<AtomicBool>,
    ready: oneshot::Sender<Result<(), String>>,
) {
    let mut ready = Some(ready);
    loop {
        match eventloop.poll().await {
            Ok(Event::Incoming(Packet::ConnAck(_))) => {
                if let Some(r) = ready.take() {
                    let _ = r.send(Ok(()));
                }
            }
            Ok(Event::Outgoing(Outgoing::Publish(pkid))) => {
                let mut p = pending.lock().unwrap();
                if let Some((qos, w)) = p.queued.pop_front() {
                    if qos == QoS::AtMostOnce {
                        let _ = w.send(Ok(()));
                    } else {
                        p.inflight.insert(pkid, w);
                    }
                }
            }
            Ok(Event::Incoming(Packet::PubAck(ack))) => {
                if let Some(w) = pending.lock().unwrap().inflight.remove(&ack.pkid) {
                    let _ = w.send(Ok(()));
                }
            }
            Ok(_) => {}
            Err(e) => {
                alive.store(false, Ordering::Release);
                let why = e.to_string();
                pending.lock().unwrap().fail_all(&why);
                if let Some(r) = ready.take() {
                    let _ = r.send(Err(why));
                }
                return;
            }
        }
    }
}

/// Publisher links keyed by endpoint, reopened after a failure.
#[derive(Default)]
pub struct MqttPool {
    links: tokio::sync::Mutex<HashMap<String, Arc<MqttPublisher>>>,
}

impl MqttPool {
    pub fn new() -> Self {
        Self::default()
    }

    async fn link(&self, endpoint: &str) -> Result<Arc<MqttPublisher>, MqttError> {
        let mut links = self.links.lock().await;
        if let Some(l) = links.get(endpoint) {
            if l.is_alive() {
                return Ok(l.clone());
            }
            links.remove(endpoint);
        }
        let l = Arc::new(MqttPublisher::connect(endpoint, "notify").await?);
        links.insert(endpoint.to_string(), l.clone());
        Ok(l)
    }

    pub async fn publish(&self, endpoint: &str, topic: &str, qos: u8, payload: Vec<u8>) -> Result<(), MqttError> {
        let link = self.link(endpoint).await?;
        link.publish(topic, qos, payload).await
    }

    pub async fn close(&self) {
        let links: Vec<_> = self.links.lock().await.drain().map(|(_, l)| l).collect();
        for l in links {
            l.close().await;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Received {
    pub topic: String,
    pub payload: Bytes,
    pub received_at: Timestamp,
}

/// A subscription session that reconnects and resubscribes on its own.
pub struct MqttSubscriber {
    client: AsyncClient,
    task: JoinHandle<()>,
    ready: watch::Receiver<bool>,
}

impl MqttSubscriber {
    /// Returns once the first SUBACK arrives.
    pub async fn connect(
        endpoint: &str,
        role: &str,
        topics: Vec<(String, u8)>,
    ) -> Result<(Self, mpsc::UnboundedReceiver<Received>), MqttError> {
        let (client, eventloop) = AsyncClient::new(options(endpoint, &client_id(role))?, REQUEST_CAPACITY);
        let (tx, rx) = mpsc::unbounded_channel();
        let (ready_tx, mut ready) = watch::channel(false);
        let task = tokio::spawn(subscriber_loop(eventloop, client.clone(), topics, tx, ready_tx));
        let subscribed = matches!(tokio::time::timeout(CONNECT_TIMEOUT, ready.wait_for(|r| *r)).await, Ok(Ok(_)));
        if !subscribed {
            task.abort();
            return Err(MqttError::BrokerUnreachable(format!("{endpoint}: no SUBACK")));
        }
        Ok((MqttSubscriber { client, task, ready }, rx))
    }

    pub fn is_subscribed(&self) -> bool {
        *self.ready.borrow()
    }

    /// Waits until the session is subscribed again after a reconnect.
    pub async fn wait_subscribed(&mut self, limit: Duration) -> bool {
        matches!(tokio::time::timeout(limit, self.ready.wait_for(|r| *r)).await, Ok(Ok(_)))
    }

    pub async fn close(self) {
        let _ = self.client.disconnect().await;
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

impl Drop for MqttSubscriber {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn subscriber_loop(
    mut eventloop: EventLoop,
    client: AsyncClient,
    topics: Vec<(String, u8)>,
    out: mpsc::UnboundedSender<Received>,
    ready: watch::Sender<bool>,
) {
    let filters: Vec<rumqttc::SubscribeFilter> = topics
        .iter()
        .map(|(t, q)| rumqttc::SubscribeFilter::new(t.clone(), qos_of(*q)))
        .collect();
    loop {
        match eventloop.poll().await {
            Ok(Event::Incoming(Packet::ConnAck(_))) => {
                if let Err(e) = client.try_subscribe_many(filters.clone()) {
                    tracing::warn!("resubscribe failed: {e}");
                }
            }
            Ok(Event::Incoming(Packet::SubAck(_))) => {
                ready.send_replace(true);
            }
            Ok(Event::Incoming(Packet::Publish(p))) => {
                let msg = Received {
                    topic: p.topic.clone(),
                    payload: p.payload.clone(),
                    received_at: Timestamp::now(),
                };
                if out.send(msg).is_err() {
                    return;
                }
            }
            Ok(Event::Outgoing(Outgoing::Disconnect)) => {
                ready.send_replace(false);
                return;
            }
            Ok(_) => {}
            Err(e) => {
                ready.send_replace(false);
                tracing::debug!("subscriber connection error: {e}");
                tokio::time::sleep(RECONNECT_PAUSE).await;
            }
        }
    }
}
