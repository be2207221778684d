mod common;

use std::time::Duration;

use common::{fixtures, scenario, Broker, TcpProxy, TestServer, REAL_CAR};
use dtds_core::geo::RoadNetwork;
use dtds_core::sim::{synthetic_trace, TracePoint};
use dtds_core::store::Tenant;
use dtds_core::{Attribute, Entity, EntityId, GeoPoint, Timestamp};
use dtds_service::mqtt::{MqttPublisher, MqttSubscriber};
use dtds_service::poc::replay::{fix_payload, ingest_topic, replay_trace};
use dtds_service::poc::sampler::{Sampler, SamplerConfig};
use dtds_service::poc::scenario::run_scenario;
use dtds_service::poc::{stop_pair, StopSignal};

fn id(s: &str) -> EntityId {
    EntityId::parse(s).unwrap()
}

fn point(t: f64) -> TracePoint {
    TracePoint {
        t,
        lat: 38.25 + t * 1e-5,
        lon: 21.73,
        roll: 0.0,
        pitch: 0.0,
        yaw: 0.0,
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

async fn replay_spacing(broker: &Broker, speed_factor: f64) -> f64 {
    let topic = format!("replay/{speed_factor}");
    let (sub, mut rx) = MqttSubscriber::connect(&broker.endpoint(), "probe", vec![(topic.clone(), 1)])
        .await
        .unwrap();
    let publisher = MqttPublisher::connect(&broker.endpoint(), "replayer").await.unwrap();
    let trace: Vec<TracePoint> = (0..16).map(|k| point(k as f64 * 0.1)).collect();
    let log = replay_trace(&trace, speed_factor, &publisher, &topic, 1, StopSignal::never())
        .await
        .unwrap();
    assert_eq!(log.published.len(), 16);
    assert_eq!(log.failures, 0);
    let mut arrivals = Vec::new();
    while arrivals.len() < 16 {
        let m = tokio::time::timeout(Duration::from_secs(5), rx.recv()).await.unwrap().unwrap();
        arrivals.push(m.received_at);
    }
    publisher.close().await;
    sub.close().await;
    let gaps = arrivals.windows(2).map(|w| (w[1].as_millis() - w[0].as_millis()) as f64).collect();
    median(gaps)
}

#[tokio::test]
async fn replay_follows_the_trace_clock() {
    let broker = Broker::start();
    let normal = replay_spacing(&broker, 1.0).await;
    assert!((70.0..=130.0).contains(&normal), "{normal} ms between fixes");
    let fast = replay_spacing(&broker, 2.0).await;
    assert!((30.0..=70.0).contains(&fast), "{fast} ms between fixes at 2x");
}

#[tokio::test]
async fn replay_stops_on_signal() {
    let broker = Broker::start();
    let publisher = MqttPublisher::connect(&broker.endpoint(), "replayer").await.unwrap();
    let trace: Vec<TracePoint> = (0..100).map(|k| point(k as f64 * 0.1)).collect();
    let (stop, signal) = stop_pair();
    let stopper = async {
        tokio::time::sleep(Duration::from_millis(450)).await;
        stop.stop();
    };
    let (log, ()) = tokio::join!(replay_trace(&trace, 1.0, &publisher, "replay/stop", 0, signal), stopper);
    let n = log.unwrap().published.len();
    assert!((3..=7).contains(&n), "{n} fixes before stop");
    publisher.close().await;
}

struct Rig {
    broker: Broker,
    srv: TestServer,
    topic: String,
}

async fn rig() -> Rig {
    let broker = Broker::start();
    let srv = TestServer::start().await;
    let client = srv.client("poc");
    let car = Entity::new(id(REAL_CAR), "DynamicAsset").with(
        "position",
        Attribute::geo(GeoPoint::new(21.73, 38.25, 0.0).unwrap()).observed(Timestamp::from_millis(0)),
    );
    client.create_entity(&car).await.unwrap();
    let topic = ingest_topic(&Tenant::new("poc").unwrap(), &id(REAL_CAR));
    Rig { broker, srv, topic }
}

fn sampler_config(rig: &Rig, endpoint: String) -> SamplerConfig {
    SamplerConfig {
        endpoint,
        topic: rig.topic.clone(),
        qos: 1,
        target: id(REAL_CAR),
        period: Duration::from_millis(100),
    }
}

async fn stored_position_at(rig: &Rig) -> Option<Timestamp> {
    let (e, _) = rig.srv.client("poc").get_entity(&id(REAL_CAR)).await.unwrap();
    e.attributes.get("position").and_then(|a| a.observed_at)
}

#[tokio::test]
async fn sampler_writes_at_most_once_per_period() {
    let rig = rig().await;
    let sampler = Sampler::start(rig.srv.client("poc"), sampler_config(&rig, rig.broker.endpoint()))
        .await
        .unwrap();
    let publisher = MqttPublisher::connect(&rig.broker.endpoint(), "gps").await.unwrap();
    let start = Timestamp::now().as_millis();
    let mut last = Timestamp::from_millis(0);
    // 50 Hz for one second
    for k in 0..50 {
        last = Timestamp::from_millis(start + k * 20);
        let payload = serde_json::to_vec(&fix_payload(&point(k as f64 * 0.02), last)).unwrap();
        publisher.publish(&rig.topic, 1, payload).await.unwrap();
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    // older than everything already sent
    let old = serde_json::to_vec(&fix_payload(&point(0.0), Timestamp::from_millis(start - 1_000))).unwrap();
    publisher.publish(&rig.topic, 1, old).await.unwrap();
    publisher.publish(&rig.topic, 1, b"not a fix".to_vec()).await.unwrap();
    tokio::time::sleep(Duration::from_millis(300)).await;
    let stats = sampler.stop().await;
    publisher.close().await;

    assert_eq!(stats.fixes, 52);
    assert_eq!(stats.malformed, 1);
    assert!(stats.stale >= 1);
    assert!((5..=16).contains(&stats.patches), "{stats:?}");
    assert_eq!(stats.patches + stats.superseded + stats.stale + stats.malformed, stats.fixes);
    assert_eq!(stored_position_at(&rig).await, Some(last));
    rig.srv.handle.shutdown().await;
}

#[tokio::test]
async fn sampler_survives_a_broker_outage() {
    let rig = rig().await;
    let proxy = TcpProxy::start(rig.broker.addr).await;
    let sampler = Sampler::start(rig.srv.client("poc"), sampler_config(&rig, proxy.endpoint()))
        .await
        .unwrap();
    let publisher = MqttPublisher::connect(&rig.broker.endpoint(), "gps").await.unwrap();
    let start = Timestamp::now().as_millis();
    let mut seen = Vec::new();
    let mut last = Timestamp::from_millis(0);
    for k in 0..100 {
        match k {
            20 => proxy.cut(),
            40 => proxy.restore(),
            _ => {}
        }
        last = Timestamp::from_millis(start + k * 50);
        let payload = serde_json::to_vec(&fix_payload(&point(k as f64 * 0.05), last)).unwrap();
        publisher.publish(&rig.topic, 1, payload).await.unwrap();
        if let Some(t) = stored_position_at(&rig).await {
            seen.push(t);
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let caught_up = common::eventually(Duration::from_secs(3), async || stored_position_at(&rig).await == Some(last)).await;
    let stats = sampler.stop().await;
    publisher.close().await;
    assert!(caught_up, "sampler never resumed: {stats:?}");
    assert!(seen.windows(2).all(|w| w[0] <= w[1]), "stored observedAt went backwards");
    rig.srv.handle.shutdown().await;
}

#[tokio::test]
async fn sampler_retries_while_the_server_is_down() {
    let rig = rig().await;
    let broker = rig.broker.endpoint();
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let client = dtds_service::client::DtdsClient::new(&format!("http://{dead}"), "poc");
    let sampler = Sampler::start(client, sampler_config(&rig, broker.clone())).await.unwrap();
    let publisher = MqttPublisher::connect(&broker, "gps").await.unwrap();
    let payload = serde_json::to_vec(&fix_payload(&point(0.0), Timestamp::now())).unwrap();
    publisher.publish(&rig.topic, 1, payload).await.unwrap();
    tokio::time::sleep(Duration::from_millis(800)).await;
    let stats = sampler.stop().await;
    publisher.close().await;
    assert_eq!(stats.patches, 0);
    assert!(stats.failures >= 2, "{stats:?}");
    rig.srv.handle.shutdown().await;
}

#[tokio::test]
async fn short_scenario_meets_its_bounds() {
    let broker = Broker::start();
    let srv = TestServer::start().await;
    let cfg = scenario(&srv, &broker, 8.0);
    let report = run_scenario(&cfg).await;
    println!("{}", report.render());
    assert!(!report.aborted, "{:?}", report.errors);
    assert!((70..=82).contains(&report.fixes_published), "{}", report.fixes_published);
    assert_eq!(report.publish_failures, 0);
    assert_eq!(report.sim.gap_violations, 0);
    assert!(report.sim.steps >= 70);
    assert!(report.sim.real_car_steps > 0);
    assert_eq!(report.staleness.fixes, report.fixes_published);
    assert!(report.staleness.violations * 10 <= report.staleness.fixes, "{:?}", report.staleness);
    assert!(report.position_notifications.expected > 0);
    assert!(report.position_notifications.ratio >= 0.9, "{:?}", report.position_notifications);
    assert!(report.latency.end_to_end.count > 0);
    assert_eq!(report.dispatch.unwrap().overflow, 0);

    // the store ends up with the last published fix
    let client = srv.client("poc");
    let (car, _) = client.get_entity(&id(REAL_CAR)).await.unwrap();
    assert!(car.attributes["position"].observed_at.unwrap() >= report.started_at);
    srv.handle.shutdown().await;
}

#[tokio::test]
async fn scenario_without_virtual_vehicles() {
    let broker = Broker::start();
    let srv = TestServer::start().await;
    let mut cfg = scenario(&srv, &broker, 3.0);
    cfg.sim.n_virtual = 0;
    let report = run_scenario(&cfg).await;
    assert!(!report.aborted, "{:?}", report.errors);
    assert_eq!(report.sim.gap_violations, 0);
    assert_eq!(report.sim.min_gap, None);
    assert!(report.fixes_published > 20);
    assert!(report.sampler.patches > 10);
    srv.handle.shutdown().await;
}

#[tokio::test]
async fn scenario_aborts_without_a_broker() {
    let broker = Broker::start();
    let srv = TestServer::start().await;
    let mut cfg = scenario(&srv, &broker, 3.0);
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    cfg.broker = format!("mqtt://{dead}");
    let report = run_scenario(&cfg).await;
    assert!(report.aborted);
    assert!(!report.errors.is_empty());
    assert_eq!(report.fixes_published, 0);
    srv.handle.shutdown().await;
}

#[tokio::test]
async fn scenario_rejects_a_missing_network() {
    let broker = Broker::start();
    let srv = TestServer::start().await;
    let mut cfg = scenario(&srv, &broker, 3.0);
    cfg.network = fixtures().join("nope.json");
    let report = run_scenario(&cfg).await;
    assert!(report.aborted);
    assert!(report.errors[0].contains("nope.json"));
    srv.handle.shutdown().await;
}

#[test]
fn synthetic_fixture_trace_is_ten_hertz() {
    let net = RoadNetwork::load(&fixtures().join("network.json")).unwrap();
    let trace = synthetic_trace(&net, "L1", 0.0, 8.0, 10.0, 5.0).unwrap();
    assert_eq!(trace.len(), 51);
    assert!(trace.windows(2).all(|w| ((w[1].t - w[0].t) - 0.1).abs() < 1e-9));
}
