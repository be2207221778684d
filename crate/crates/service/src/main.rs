use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use dtds_core::geo::RoadNetwork;
use dtds_core::model::dtdo::kinds;
use dtds_core::model::{parse_entity, parse_fragment, serialize_entity, validate_scene_graph, Severity};
use dtds_core::sim::{load_trace, synthetic_trace, SimConfig};
use dtds_core::store::Tenant;
use dtds_core::EntityId;
use dtds_service::client::{ClientError, DtdsClient, PatchResult};
use dtds_service::mqtt::MqttPublisher;
use dtds_service::poc::fixtures::load_entity_dir;
use dtds_service::poc::replay::{ingest_topic, replay_trace};
use dtds_service::poc::sampler::{Sampler, SamplerConfig};
use dtds_service::poc::scenario::{run_scenario, ScenarioConfig};
use dtds_service::poc::simulator::{Simulator, SimulatorConfig};
use dtds_service::poc::watcher::{StateTable, Watcher};
use dtds_service::poc::{stop_pair, StopSignal};
use dtds_service::server::{self, ServerConfig};
use serde_json::Value;

/// Command-line client and server for the Digital Twin Descriptor Service.
#[derive(Parser)]
#[command(name = "dtdsctl", version)]
struct Cli {
    /// Base URL of the server.
    #[arg(long, global = true, env = "DTDS_SERVER", default_value = "http://127.0.0.1:8080")]
    server: String,
    /// Tenant sent in the NGSILD-Tenant header.
    #[arg(long, global = true, env = "DTDS_TENANT", default_value = "")]
    tenant: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the server.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, default_value = "./dtds-data")]
        data_dir: PathBuf,
        /// Largest accepted asset, bytes.
        #[arg(long)]
        max_asset_bytes: Option<u64>,
    },
    #[command(subcommand)]
    Entity(EntityCmd),
    #[command(subcommand)]
    Scene(SceneCmd),
    #[command(subcommand)]
    Asset(AssetCmd),
    #[command(subcommand)]
    Sub(SubCmd),
    #[command(subcommand)]
    Csource(CsourceCmd),
    /// Publish a GPS trace over MQTT.
    Replay(ReplayArgs),
    /// Bridge MQTT fixes into a DynamicAsset.
    Sample(SampleArgs),
    /// Drive virtual vehicles around the real one.
    Sim(SimArgs),
    /// Print scene notifications as NDJSON lines or a state table.
    Watch(WatchArgs),
    /// Run replayer, sampler, simulator and watcher together and report.
    Scenario {
        config: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        report_json: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EntityCmd {
    Get { id: String },
    /// Create from a file, or stdin with `-`.
    Create { file: PathBuf },
    /// Patch attributes from a fragment file, or stdin with `-`.
    Patch { id: String, file: PathBuf },
    Delete { id: String },
    Query {
        #[arg(long = "type")]
        entity_type: Option<String>,
        #[arg(long)]
        id_pattern: Option<String>,
        /// minLon,minLat,maxLon,maxLat
        #[arg(long)]
        bbox: Option<String>,
        /// name=targetId
        #[arg(long)]
        rel: Option<String>,
        /// Skip registered context sources.
        #[arg(long)]
        local: bool,
    },
}

#[derive(Subcommand)]
enum SceneCmd {
    /// Create every entity document of a directory.
    Create { dir: PathBuf },
    /// Validate a directory offline, or a stored scene by id.
    Validate { target: String },
    Resolve {
        id: String,
        #[arg(long)]
        formats: Option<String>,
        #[arg(long)]
        modalities: Option<String>,
    },
    /// Subscribe an MQTT channel to a scene and print the descriptor.
    Watch {
        id: String,
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        topic: Option<String>,
        #[arg(long)]
        qos: Option<u8>,
    },
}

#[derive(Subcommand)]
enum AssetCmd {
    Put {
        file: PathBuf,
        #[arg(long)]
        format: String,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        name: Option<String>,
    },
    Get {
        id: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    Meta { id: String },
}

#[derive(Subcommand)]
enum SubCmd {
    Create { file: PathBuf },
    Delete { id: String },
}

#[derive(Subcommand)]
enum CsourceCmd {
    Register { file: PathBuf },
}

#[derive(Args)]
struct BrokerArgs {
    /// mqtt://host:port
    #[arg(long, default_value = "mqtt://127.0.0.1:1883")]
    broker: String,
    #[arg(long, default_value_t = 1)]
    qos: u8,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    broker: BrokerArgs,
    /// NDJSON trace file.
    #[arg(long, conflicts_with = "network")]
    trace: Option<PathBuf>,
    /// Generate a constant-speed drive on this network instead.
    #[arg(long, requires = "lane")]
    network: Option<PathBuf>,
    #[arg(long)]
    lane: Option<String>,
    #[arg(long, default_value_t = 5.0)]
    speed: f64,
    #[arg(long, default_value_t = 10.0)]
    hz: f64,
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long, default_value_t = 1.0)]
    speed_factor: f64,
    /// Vehicle whose ingest topic is used.
    #[arg(long, default_value = "urn:ngsi-ld:DynamicAsset:realcar")]
    vehicle: String,
    #[arg(long)]
    topic: Option<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    broker: BrokerArgs,
    #[arg(long, default_value = "urn:ngsi-ld:DynamicAsset:realcar")]
    vehicle: String,
    #[arg(long)]
    topic: Option<String>,
    /// Sampling period, s.
    #[arg(long, default_value_t = 0.1)]
    period: f64,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    network: PathBuf,
    /// SimConfig as JSON; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_virtual: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    real_car: Option<String>,
}

#[derive(Args)]
struct WatchArgs {
    scene: String,
    #[command(flatten)]
    broker: BrokerArgs,
    /// Refreshing table instead of NDJSON.
    #[arg(long)]
    table: bool,
}

/// Failure reported on stderr with exit code 1.
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.cmd, Cmd::Serve { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(code) => code,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn read_input(path: &Path) -> Result<String, Failure> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        std::fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))
    }
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = read_input(path)?;
    serde_json::from_str(&text).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn entity_id(s: &str) -> Result<EntityId, Failure> {
    EntityId::parse(s).map_err(|e| Failure(format!("{s}: {e}")))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

/// Stops on Ctrl-C.
fn ctrl_c_signal() -> StopSignal {
    let (stop, signal) = stop_pair();
    tokio::spawn(async move {
        let _ = tokio::signal::ctrl_c().await;
        stop.stop();
    });
    signal
}

async fn run(cli: Cli) -> CmdResult {
    let client = DtdsClient::new(&cli.server, &cli.tenant);
    let tenant = Tenant::new(&cli.tenant)?;
    match cli.cmd {
        Cmd::Serve {
            bind,
            data_dir,
            max_asset_bytes,
        } => serve(bind, data_dir, max_asset_bytes).await,
        Cmd::Entity(c) => entity(&client, c).await,
        Cmd::Scene(c) => scene(&client, c).await,
        Cmd::Asset(c) => asset(&client, c).await,
        Cmd::Sub(SubCmd::Create { file }) => {
            println!("{}", client.create_subscription(&read_json(&file)?).await?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sub(SubCmd::Delete { id }) => {
            client.delete_subscription(&entity_id(&id)?).await?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Csource(CsourceCmd::Register { file }) => {
            println!("{}", client.register_source(&read_json(&file)?).await?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Replay(a) => replay(&tenant, a).await,
        Cmd::Sample(a) => sample(client, &tenant, a).await,
        Cmd::Sim(a) => sim(client, a).await,
        Cmd::Watch(a) => watch(client, a).await,
        Cmd::Scenario { config, report_json } => {
            let cfg = ScenarioConfig::load(&config)?;
            let report = run_scenario(&cfg).await;
            print!("{}", report.render());
            if let Some(p) = report_json {
                std::fs::write(&p, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(if report.aborted { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
    }
}

async fn serve(bind: SocketAddr, data_dir: PathBuf, max_asset_bytes: Option<u64>) -> CmdResult {
    let mut config = ServerConfig::new(bind, data_dir);
    if let Some(m) = max_asset_bytes {
        config.max_asset_bytes = m;
    }
    let mut handle = server::start(config).await?;
    tracing::info!("listening on {}", handle.base_url());
    tokio::select! {
        r = handle.wait() => r?,
        _ = tokio::signal::ctrl_c() => {
            tracing::info!("shutting down");
            handle.shutdown().await;
        }
    }
    Ok(ExitCode::SUCCESS)
}

async fn entity(client: &DtdsClient, cmd: EntityCmd) -> CmdResult {
    match cmd {
        EntityCmd::Get { id } => {
            let (e, warnings) = client.get_entity(&entity_id(&id)?).await?;
            warn_all(&warnings);
            println!("{}", serialize_entity(&e));
        }
        EntityCmd::Create { file } => {
            let e = parse_entity(&read_input(&file)?)?;
            client.create_entity(&e).await?;
            println!("{}", e.id);
        }
        EntityCmd::Patch { id, file } => {
            let fragment = parse_fragment(&read_input(&file)?)?;
            match client.patch_attrs(&entity_id(&id)?, &fragment).await? {
                PatchResult::Applied => {}
                PatchResult::Partial { not_updated } => {
                    eprintln!("not updated (stale): {}", not_updated.join(", "));
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        EntityCmd::Delete { id } => client.delete_entity(&entity_id(&id)?).await?,
        EntityCmd::Query {
            entity_type,
            id_pattern,
            bbox,
            rel,
            local,
        } => {
            let mut params: Vec<(&str, String)> = Vec::new();
            if let Some(t) = entity_type {
                params.push(("type", t));
            }
            if let Some(p) = id_pattern {
                params.push(("idPattern", p));
            }
            if let Some(b) = bbox {
                params.push(("bbox", b));
            }
            if let Some(r) = rel {
                let (name, target) = r
                    .split_once('=')
                    .ok_or_else(|| Failure("--rel expects name=targetId".into()))?;
                params.push(("relName", name.to_string()));
                params.push(("relTarget", target.to_string()));
            }
            if local {
                params.push(("local", "true".into()));
            }
            let borrowed: Vec<(&str, &str)> = params.iter().map(|(k, v)| (*k, v.as_str())).collect();
            let found = client.query(&borrowed).await?;
            let docs: Vec<Value> = found
                .iter()
                .map(|e| serde_json::from_str(&serialize_entity(e)).expect("serialized entity"))
                .collect();
            print_json(&docs);
        }
    }
    Ok(ExitCode::SUCCESS)
}

async fn scene(client: &DtdsClient, cmd: SceneCmd) -> CmdResult {
    match cmd {
        SceneCmd::Create { dir } => {
            let entities = load_entity_dir(&dir)?;
            let mut failed = false;
            for e in &entities {
                match client.create_entity(e).await {
                    Ok(()) => println!("created {}", e.id),
                    Err(err) => {
                        eprintln!("{}: {err}", e.id);
                        failed = true;
                    }
                }
            }
            return Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS });
        }
        SceneCmd::Validate { target } => {
            let path = Path::new(&target);
            if path.is_dir() {
                return validate_dir(path);
            }
            let v = client.validate_scene(&entity_id(&target)?).await?;
            print_json(&v);
            let valid = v["valid"].as_bool().unwrap_or(false);
            return Ok(if valid { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        SceneCmd::Resolve {
            id,
            formats,
            modalities,
        } => {
            let r = client.resolve_scene(&entity_id(&id)?, formats.as_deref(), modalities.as_deref()).await?;
            print_json(&r);
        }
        SceneCmd::Watch {
            id,
            endpoint,
            topic,
            qos,
        } => {
            let w = client.watch_scene(&entity_id(&id)?, &endpoint, topic.as_deref(), qos).await?;
            println!("subscription {}", w.subscription_id);
            print_json(&w.acm);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn validate_dir(dir: &Path) -> CmdResult {
    let entities = load_entity_dir(dir)?;
    let heads: Vec<&EntityId> = entities
        .iter()
        .filter(|e| e.entity_type == kinds::SCENE_HEAD)
        .map(|e| &e.id)
        .collect();
    if heads.is_empty() {
        return Err(Failure(format!("{}: no SceneHead document", dir.display())));
    }
    let mut errors = 0;
    for head in heads {
        let report = validate_scene_graph(head, &entities)?;
        for f in &report.findings {
            let sev = match f.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            println!("{sev} {} {}: {}", f.code, f.entity_id, f.message);
        }
        println!("{head}: {} errors", report.error_count());
        errors += report.error_count();
    }
    Ok(if errors == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

async fn asset(client: &DtdsClient, cmd: AssetCmd) -> CmdResult {
    match cmd {
        AssetCmd::Put {
            file,
            format,
            modality,
            name,
        } => {
            let bytes = std::fs::read(&file).map_err(|e| Failure(format!("{}: {e}", file.display())))?;
            let name = name.or_else(|| file.file_name().map(|n| n.to_string_lossy().into_owned()));
            println!("{}", client.put_asset(bytes, &format, &modality, name.as_deref()).await?);
        }
        AssetCmd::Get { id, output } => {
            let bytes = client.get_asset(&id).await?;
            std::fs::write(&output, bytes)?;
        }
        AssetCmd::Meta { id } => print_json(&client.asset_meta(&id).await?),
    }
    Ok(ExitCode::SUCCESS)
}

async fn replay(tenant: &Tenant, a: ReplayArgs) -> CmdResult {
    let vehicle = entity_id(&a.vehicle)?;
    let trace = match (&a.trace, &a.network) {
        (Some(p), _) => load_trace(p)?,
        (None, Some(n)) => {
            let net = RoadNetwork::load(n)?;
            let lane = a.lane.as_deref().expect("required by clap");
            synthetic_trace(&net, lane, 0.0, a.speed, a.hz, a.duration)?
        }
        (None, None) => return Err(Failure("either --trace or --network is required".into())),
    };
    if !(a.speed_factor > 0.0 && a.speed_factor.is_finite()) {
        return Err(Failure("--speed-factor must be positive".into()));
    }
    let topic = a.topic.unwrap_or_else(|| ingest_topic(tenant, &vehicle));
    let publisher = MqttPublisher::connect(&a.broker.broker, "replayer").await?;
    let log = replay_trace(&trace, a.speed_factor, &publisher, &topic, a.broker.qos, ctrl_c_signal()).await?;
    publisher.close().await;
    eprintln!("published {} fixes to {topic} ({} failures)", log.published.len(), log.failures);
    Ok(if log.failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

async fn sample(client: DtdsClient, tenant: &Tenant, a: SampleArgs) -> CmdResult {
    let target = entity_id(&a.vehicle)?;
    let cfg = SamplerConfig {
        endpoint: a.broker.broker,
        topic: a.topic.unwrap_or_else(|| ingest_topic(tenant, &target)),
        qos: a.broker.qos,
        target,
        period: Duration::from_secs_f64(a.period),
    };
    let sampler = Sampler::start(client, cfg).await?;
    ctrl_c_signal().stopped().await;
    print_json(&sampler.stop().await);
    Ok(ExitCode::SUCCESS)
}

async fn sim(client: DtdsClient, a: SimArgs) -> CmdResult {
    let network = RoadNetwork::load(&a.network)?;
    let mut sim: SimConfig = match &a.config {
        Some(p) => serde_json::from_value(read_json(p)?)?,
        None => SimConfig::default(),
    };
    if let Some(n) = a.n_virtual {
        sim.n_virtual = n;
    }
    if let Some(s) = a.seed {
        sim.seed = s;
    }
    let real_car = a.real_car.as_deref().map(entity_id).transpose()?;
    let simulator = Simulator::start(client, SimulatorConfig { network, sim, real_car }).await?;
    ctrl_c_signal().stopped().await;
    let report = simulator.stop().await;
    print_json(&report);
    Ok(if report.gap_violations == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

async fn watch(client: DtdsClient, a: WatchArgs) -> CmdResult {
    let scene = entity_id(&a.scene)?;
    let mut watcher = match Watcher::start(client, &scene, &a.broker.broker, a.broker.qos).await {
        Ok(w) => w,
        Err(dtds_service::poc::watcher::WatchError::Client(e @ ClientError::Api { status: 404, .. })) => {
            return Err(Failure(format!("scene not found: {e}")));
        }
        Err(e) => return Err(e.into()),
    };
    eprintln!("watching {} entities", watcher.watched_ids.len());
    let mut stop = ctrl_c_signal();
    let mut table = StateTable::default();
    let mut refresh = tokio::time::interval(Duration::from_millis(500));
    loop {
        tokio::select! {
            line = watcher.next_line() => {
                let Some(line) = line else { break };
                if a.table {
                    table.update(line);
                } else {
                    println!("{}", serde_json::to_string(&line)?);
                }
            }
            _ = refresh.tick(), if a.table => {
                print!("\x1b[2J\x1b[H{}", table.render());
            }
            _ = stop.stopped() => break,
        }
    }
    watcher.stop().await;
    Ok(ExitCode::SUCCESS)
}
