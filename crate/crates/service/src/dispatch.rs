//! Notification delivery: one worker task and one bounded queue per
//! subscription, fed synchronously by store commits.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use dtds_core::notify::{
    build_notification, DeliveryResult, EventQueue, NotifyError, RetryPolicy, Subscription, SubscriptionRegistry,
    Target,
};
use dtds_core::store::{ChangeEvent, ChangeListener, Tenant};
use dtds_core::EntityId;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::mqtt::MqttPool;

const RUNNING: u8 = 0;
const DRAINING: u8 = 1;
const STOPPED: u8 = 2;

#[derive(Debug, Clone)]
pub struct DispatchConfig {
    pub queue_capacity: usize,
    pub retry: RetryPolicy,
    pub http_timeout: Duration,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        DispatchConfig {
            queue_capacity: dtds_core::notify::DEFAULT_QUEUE_CAPACITY,
            retry: RetryPolicy::default(),
            http_timeout: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DispatchStats {
    pub subscriptions: u64,
    /// Events matched and queued.
    pub enqueued: u64,
    /// Notifications accepted by their target.
    pub delivered: u64,
    pub failed_attempts: u64,
    /// Notifications given up after the last retry.
    pub dropped: u64,
    /// Events evicted from full queues.
    pub overflow: u64,
    /// Events currently waiting.
    pub queued: u64,
}

#[derive(Default)]
struct Counters {
    enqueued: AtomicU64,
    delivered: AtomicU64,
    failed_attempts: AtomicU64,
    dropped: AtomicU64,
    retired_overflow: AtomicU64,
}

struct Worker {
    sub: Subscription,
    queue: Mutex<EventQueue>,
    wake: Notify,
    state: AtomicU8,
}

impl Worker {
    fn state(&self) -> u8 {
        self.state.load(Ordering::Acquire)
    }
}

/// Sends one rendered notification to a target.
pub struct Delivery {
    http: reqwest::Client,
    mqtt: MqttPool,
}

impl Delivery {
    pub fn new(http_timeout: Duration) -> Self {
        Delivery {
            http: reqwest::Client::builder()
                .timeout(http_timeout)
                .build()
                .expect("http client"),
            mqtt: MqttPool::new(),
        }
    }

    pub async fn send(&self, tenant: &Tenant, target: &Target, body: &str) -> DeliveryResult {
        let outcome = match target {
            Target::Http { uri } => self
                .http
                .post(uri)
                .header("content-type", "application/json")
                .header("NGSILD-Tenant", tenant.as_str())
                .body(body.to_string())
                .send()
                .await
                .map_err(|e| e.to_string())
                .and_then(|r| {
                    if r.status().is_success() {
                        Ok(())
                    } else {
                        Err(format!("status {}", r.status()))
                    }
                }),
            Target::Mqtt { endpoint, topic, qos } => self
                .mqtt
                .publish(endpoint, topic, *qos, body.as_bytes().to_vec())
                .await
                .map_err(|e| e.to_string()),
        };
        match outcome {
            Ok(()) => DeliveryResult::Ok,
            Err(e) => {
                tracing::debug!("delivery failed: {e}");
                DeliveryResult::Retriable
            }
        }
    }
}

pub struct Dispatcher {
    registry: Arc<SubscriptionRegistry>,
    workers: RwLock<HashMap<(Tenant, EntityId), Arc<Worker>>>,
    handles: Mutex<Vec<JoinHandle<()>>>,
    delivery: Arc<Delivery>,
    counters: Arc<Counters>,
    config: DispatchConfig,
    runtime: tokio::runtime::Handle,
}

impl Dispatcher {
    /// Must be called inside a tokio runtime.
    pub fn new(registry: Arc<SubscriptionRegistry>, config: DispatchConfig) -> Self {
        Dispatcher {
            registry,
            workers: RwLock::new(HashMap::new()),
            handles: Mutex::new(Vec::new()),
            delivery: Arc::new(Delivery::new(config.http_timeout)),
            counters: Arc::new(Counters::default()),
            config,
            runtime: tokio::runtime::Handle::current(),
        }
    }

    pub fn registry(&self) -> &SubscriptionRegistry {
        &self.registry
    }

    /// Registers the subscription and starts its worker.
    pub fn subscribe(&self, sub: Subscription) -> Result<EntityId, NotifyError> {
        let mut workers = self.workers.write().unwrap();
        let id = self.registry.create(sub.clone())?;
        let worker = Arc::new(Worker {
            queue: Mutex::new(EventQueue::new(self.config.queue_capacity)),
            sub,
            wake: Notify::new(),
            state: AtomicU8::new(RUNNING),
        });
        workers.insert((worker.sub.tenant.clone(), id.clone()), worker.clone());
        let handle = self.runtime.spawn(run_worker(
            worker,
            self.delivery.clone(),
            self.counters.clone(),
            self.config.retry,
        ));
        self.handles.lock().unwrap().push(handle);
        Ok(id)
    }

    /// Removes the subscription; queued events are discarded.
    pub fn unsubscribe(&self, tenant: &Tenant, id: &EntityId) -> Result<Subscription, NotifyError> {
        let mut workers = self.workers.write().unwrap();
        let sub = self.registry.delete(tenant, id)?;
        if let Some(w) = workers.remove(&(tenant.clone(), id.clone())) {
            w.state.store(STOPPED, Ordering::Release);
            let overflow = w.queue.lock().unwrap().overflow();
            self.counters.retired_overflow.fetch_add(overflow, Ordering::Relaxed);
            w.wake.notify_one();
        }
        Ok(sub)
    }

    pub fn stats(&self) -> DispatchStats {
        let workers = self.workers.read().unwrap();
        let (mut overflow, mut queued) = (self.counters.retired_overflow.load(Ordering::Relaxed), 0);
        for w in workers.values() {
            let q = w.queue.lock().unwrap();
            overflow += q.overflow();
            queued += q.len() as u64;
        }
        DispatchStats {
            subscriptions: workers.len() as u64,
            enqueued: self.counters.enqueued.load(Ordering::Relaxed),
            delivered: self.counters.delivered.load(Ordering::Relaxed),
            failed_attempts: self.counters.failed_attempts.load(Ordering::Relaxed),
            dropped: self.counters.dropped.load(Ordering::Relaxed),
            overflow,
            queued,
        }
    }

    /// Delivers what is queued, then stops every worker; gives up after
    /// `grace`.
    pub async fn shutdown(&self, grace: Duration) {
        for w in self.workers.read().unwrap().values() {
            let _ = w.state.compare_exchange(RUNNING, DRAINING, Ordering::AcqRel, Ordering::Acquire);
            w.wake.notify_one();
        }
        let handles: Vec<_> = std::mem::take(&mut *self.handles.lock().unwrap());
        let aborts: Vec<_> = handles.iter().map(|h| h.abort_handle()).collect();
        if tokio::time::timeout(grace, futures::future::join_all(handles)).await.is_err() {
            tracing::warn!("delivery queues not drained within {grace:?}");
            for a in aborts {
                a.abort();
            }
        }
        self.delivery.mqtt.close().await;
    }
}

impl ChangeListener for Dispatcher {
    fn on_commit(&self, events: &[ChangeEvent]) {
        let workers = self.workers.read().unwrap();
        let mut woken: Vec<&Arc<Worker>> = Vec::new();
        for ev in events {
            for id in self.registry.matching(ev) {
                let Some(w) = workers.get(&(ev.tenant.clone(), id)) else { continue };
                if w.state() == STOPPED {
                    continue;
                }
                w.queue.lock().unwrap().push(ev.clone());
                self.counters.enqueued.fetch_add(1, Ordering::Relaxed);
                if !woken.iter().any(|x| Arc::ptr_eq(x, w)) {
                    woken.push(w);
                }
            }
        }
        for w in woken {
            w.wake.notify_one();
        }
    }
}

async fn run_worker(worker: Arc<Worker>, delivery: Arc<Delivery>, counters: Arc<Counters>, retry: RetryPolicy) {
    let throttle = Duration::from_millis(worker.sub.throttling_ms);
    let mut last_send: Option<Instant> = None;
    loop {
        let state = worker.state();
        if state == STOPPED {
            return;
        }
        if worker.queue.lock().unwrap().is_empty() {
            if state == DRAINING {
                return;
            }
            worker.wake.notified().await;
            continue;
        }
        if let Some(t) = last_send {
            if state == RUNNING && !throttle.is_zero() && t.elapsed() < throttle {
                tokio::time::sleep_until(t + throttle).await;
                continue;
            }
        }
        let batch = worker.queue.lock().unwrap().drain();
        let Ok(note) = build_notification(&worker.sub.id, &batch) else { continue };
        let body = note.to_json();
        last_send = Some(Instant::now());
        let mut attempt = 1;
        loop {
            let pause = retry.delay_before(attempt);
            if pause > 0 {
                tokio::time::sleep(Duration::from_millis(pause)).await;
            }
            if worker.state() == STOPPED {
                return;
            }
            match delivery.send(&worker.sub.tenant, &worker.sub.target, &body).await {
                DeliveryResult::Ok => {
                    counters.delivered.fetch_add(1, Ordering::Relaxed);
                    break;
                }
                _ if attempt >= retry.max_attempts => {
                    counters.failed_attempts.fetch_add(1, Ordering::Relaxed);
                    counters.dropped.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!("dropping notification for {} after {attempt} attempts", worker.sub.id);
                    break;
                }
                _ => {
                    counters.failed_attempts.fetch_add(1, Ordering::Relaxed);
                    attempt += 1;
                }
            }
        }
    }
}
