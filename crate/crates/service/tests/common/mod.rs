#![allow(dead_code)]

use std::net::{SocketAddr, TcpListener as StdListener, TcpStream as StdStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use dtds_service::client::DtdsClient;
use dtds_service::poc::fixtures::load_entity_dir;
use dtds_service::poc::scenario::ScenarioConfig;
use dtds_service::server::{self, ServerConfig, ServerHandle};
use serde_json::json;
use tempfile::TempDir;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

pub const SCENE: &str = "urn:ngsi-ld:SceneHead:poc";
pub const REAL_CAR: &str = "urn:ngsi-ld:DynamicAsset:realcar";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn free_port() -> u16 {
    StdListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn wait_listening(addr: SocketAddr) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while StdStream::connect_timeout(&addr, Duration::from_millis(100)).is_err() {
        assert!(Instant::now() < deadline, "broker at {addr} never came up");
        std::thread::sleep(Duration::from_millis(20));
    }
}

/// An in-process MQTT broker; it lives until the test binary exits.
pub struct Broker {
    pub addr: SocketAddr,
}

impl Broker {
    pub fn start() -> Broker {
        let addr: SocketAddr = format!("127.0.0.1:{}", free_port()).parse().unwrap();
        let config = json!({
            "id": 0,
            "router": {
                "id": 0,
                "max_connections": 1000,
                "max_outgoing_packet_count": 1000,
                "max_segment_size": 104857600,
                "max_segment_count": 10
            },
            "v4": {
                "1": {
                    "name": "v4-1",
                    "listen": addr.to_string(),
                    "next_connection_delay_ms": 0,
                    "connections": {
                        "connection_timeout_ms": 5000,
                        "max_payload_size": 4194304,
                        "max_inflight_count": 500,
                        "dynamic_filters": true
                    }
                }
            }
        });
        let config: rumqttd::Config = serde_json::from_value(config).expect("broker config");
        std::thread::spawn(move || {
            let mut broker = rumqttd::Broker::new(config);
            if let Err(e) = broker.start() {
                eprintln!("broker stopped: {e}");
            }
        });
        wait_listening(addr);
        Broker { addr }
    }

    pub fn endpoint(&self) -> String {
        format!("mqtt://{}", self.addr)
    }
}

pub struct TestServer {
    pub handle: ServerHandle,
    pub dir: TempDir,
}

impl TestServer {
    pub async fn start() -> TestServer {
        Self::start_with(|_| {}).await
    }

    pub async fn start_with(tweak: impl FnOnce(&mut ServerConfig)) -> TestServer {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ServerConfig::new("127.0.0.1:0".parse().unwrap(), dir.path());
        tweak(&mut cfg);
        let handle = server::start(cfg).await.expect("server starts");
        TestServer { handle, dir }
    }

    pub fn url(&self) -> String {
        self.handle.base_url()
    }

    pub fn client(&self, tenant: &str) -> DtdsClient {
        DtdsClient::new(&self.url(), tenant)
    }
}

/// Creates the demo scene under `client`'s tenant.
pub async fn load_scene(client: &DtdsClient) {
    for e in load_entity_dir(&fixtures().join("scene1")).unwrap() {
        client.create_entity(&e).await.unwrap_or_else(|err| panic!("{}: {err}", e.id));
    }
}

/// The demo scenario pointed at `server` and `broker`.
pub fn scenario(server: &TestServer, broker: &Broker, duration_s: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::load(&fixtures().join("scenario.json")).unwrap();
    cfg.server = server.url();
    cfg.broker = broker.endpoint();
    cfg.duration_s = duration_s;
    cfg
}

/// Forwards TCP connections to `upstream` until cut.
pub struct TcpProxy {
    pub addr: SocketAddr,
    down: Arc<AtomicBool>,
    links: Arc<Mutex<Vec<JoinHandle<()>>>>,
    accept: JoinHandle<()>,
}

impl TcpProxy {
    pub async fn start(upstream: SocketAddr) -> TcpProxy {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let down = Arc::new(AtomicBool::new(false));
        let links: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
        let (d, l) = (down.clone(), links.clone());
        let accept = tokio::spawn(async move {
            loop {
                let Ok((mut inbound, _)) = listener.accept().await else { return };
                if d.load(Ordering::SeqCst) {
                    continue;
                }
                let link = tokio::spawn(async move {
                    if let Ok(mut outbound) = TcpStream::connect(upstream).await {
                        let _ = tokio::io::copy_bidirectional(&mut inbound, &mut outbound).await;
                    }
                });
                l.lock().unwrap().push(link);
            }
        });
        TcpProxy { addr, down, links, accept }
    }

    pub fn endpoint(&self) -> String {
        format!("mqtt://{}", self.addr)
    }

    /// Drops every open connection and refuses new ones.
    pub fn cut(&self) {
        self.down.store(true, Ordering::SeqCst);
        for l in self.links.lock().unwrap().drain(..) {
            l.abort();
        }
    }

    pub fn restore(&self) {
        self.down.store(false, Ordering::SeqCst);
    }
}

impl Drop for TcpProxy {
    fn drop(&mut self) {
        self.accept.abort();
        self.cut();
    }
}

/// Polls `f` until it holds or `limit` passes.
pub async fn eventually(limit: Duration, mut f: impl AsyncFnMut() -> bool) -> bool {
    let deadline = tokio::time::Instant::now() + limit;
    loop {
        if f().await {
            return true;
        }
        if tokio::time::Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
}
