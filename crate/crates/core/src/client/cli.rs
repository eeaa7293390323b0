//! The `mesh` command line. Also runs the daemons and the bench harness;
//! invoked as `mesh-bench` it goes straight to the bench subcommands.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use super::gateway::{Gateway, GatewayConfig};
use super::{attach, locate, AdminClient, Attached, AttachSession, LaunchSpec, MeshError, Transport};
use crate::agents::BehaviorRegistry;
use crate::bench::{self, SoakParams};
use crate::codeserver::{BundleStore, CodeBundle, CodeServer};
use crate::lookup::{Filter, LeasePolicy, RegistryServer, RegistryServerConfig, ServiceRecord, ServiceType};
use crate::security::{Certificate, Keystore, TrustStore};
use crate::station::{Station, StationConfig};
use crate::wire::{AgentId, BundleRef, ServiceKind};

#[derive(Parser)]
#[command(name = "mesh", version, about = "Launch, find, steer and host mobile agents")]
struct Cli {
    /// Registry endpoint (host:port).
    #[arg(long, global = true, env = "MESH_REGISTRY", default_value = "127.0.0.1:7700")]
    registry: String,
    /// Owner keystore used to sign, launch and attach.
    #[arg(long, global = true, env = "MESH_KEYSTORE", default_value = "keystore.json")]
    keystore: PathBuf,
    /// JSON lines instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a keystore and print its certificate fingerprint.
    Keygen {
        #[arg(long)]
        subject: String,
        /// Also write the public certificate here.
        #[arg(long)]
        cert_out: Option<PathBuf>,
        /// Replace an existing keystore.
        #[arg(long)]
        force: bool,
    },
    /// Sign and store a code bundle; prints the bundle reference.
    Publish {
        /// Bundle store directory served by `mesh codeserver`.
        #[arg(long)]
        dir: PathBuf,
        /// Public base URL of that code server, e.g. http://host:7800.
        #[arg(long)]
        base_url: String,
        #[arg(long)]
        behavior: String,
        #[arg(long, default_value = "1")]
        version: String,
        /// Opaque payload file; defaults to a marker naming the behavior.
        #[arg(long)]
        payload: Option<PathBuf>,
        /// Write the bundle reference JSON here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add a certificate to a trust store file, or to a running station.
    Trust {
        /// Certificate JSON file.
        cert: PathBuf,
        /// Local trust store file to edit.
        #[arg(long, conflicts_with = "admin")]
        store: Option<PathBuf>,
        /// Station admin URL, e.g. http://127.0.0.1:7711.
        #[arg(long)]
        admin: Option<String>,
        #[arg(long, env = "MESH_ADMIN_TOKEN")]
        token: Option<String>,
    },
    /// Start a new agent at a station.
    Launch(LaunchArgs),
    /// List registered stations and agents.
    Discover {
        #[arg(long, value_parser = ["station", "agent"])]
        kind: Option<String>,
        #[arg(long)]
        id: Option<String>,
        /// Attribute equality, repeatable: --attr behavior_id=search/1
        #[arg(long, value_parser = parse_kv)]
        attr: Vec<(String, String)>,
    },
    /// Open a command session; reads one command per line from stdin.
    Attach {
        agent: AgentId,
        /// Station endpoint; located through the registry if omitted.
        #[arg(long)]
        at: Option<String>,
    },
    /// Send an agent home to finish and print its result.
    Recall {
        agent: AgentId,
        /// Station the agent should finish at.
        #[arg(long)]
        origin: String,
    },
    /// Print an agent's travel log.
    Log { agent: AgentId },
    /// Run the lookup registry.
    Registry {
        #[arg(long, default_value = "127.0.0.1:7700")]
        listen: String,
        #[arg(long, default_value_t = crate::lookup::DEFAULT_MIN_LEASE_MS)]
        min_lease_ms: u64,
        #[arg(long, default_value_t = crate::lookup::DEFAULT_MAX_LEASE_MS)]
        max_lease_ms: u64,
        #[arg(long, default_value_t = crate::lookup::DEFAULT_SWEEP_MS)]
        sweep_ms: u64,
    },
    /// Run a station from a JSON config file.
    Station {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve a bundle store over HTTP.
    Codeserver {
        #[arg(long, default_value = "127.0.0.1:7800")]
        listen: String,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run the console gateway with the keystore's identity.
    Gateway {
        #[arg(long, default_value = "127.0.0.1:7900")]
        listen: String,
        /// JSON map of behavior id to bundle reference, used for launches
        /// that name no bundle.
        #[arg(long)]
        bundles: Option<PathBuf>,
    },
    /// Soak and throughput experiments.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Args)]
struct LaunchArgs {
    #[arg(long)]
    behavior: String,
    /// Initial parameters as JSON.
    #[arg(long, default_value = "{}")]
    params: String,
    /// Station endpoint or station id.
    #[arg(long)]
    dest: String,
    /// Bundle reference JSON file from `mesh publish`.
    #[arg(long)]
    bundle: PathBuf,
    /// Do not register the agent with the registry.
    #[arg(long)]
    private: bool,
    /// Let anyone attach without the owner handshake.
    #[arg(long)]
    open: bool,
    /// Comma-separated station endpoints or ids.
    #[arg(long, value_delimiter = ',')]
    itinerary: Vec<String>,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// One connectivity agent hopping round-robin across local stations.
    Soak {
        #[arg(long, default_value_t = 3)]
        stations: usize,
        #[arg(long, default_value_t = 300)]
        hops: u64,
        #[arg(long, default_value_t = 50)]
        dwell_ms: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write and read a random file through a file-access agent.
    Throughput {
        #[arg(long, default_value_t = 16 << 20)]
        size: u64,
        /// control, stream, or both.
        #[arg(long, default_value = "both")]
        transport: String,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| format!("expected key=value, got {s:?}"))
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn code(&self) -> &str {
        match self {
            CliError::Mesh(e) => e.code(),
            CliError::Other(_) => "ERROR",
        }
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

/// Entry point for the `mesh` binary.
pub fn run() -> ExitCode {
    let mut args: Vec<String> = std::env::args().collect();
    let invoked_as = args.first().and_then(|a| Path::new(a).file_stem()).and_then(|s| s.to_str()).unwrap_or("");
    if invoked_as.starts_with("mesh-bench") {
        args.insert(1, "bench".into());
    }
    let cli = Cli::parse_from(args);
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    let json = cli.json;
    match rt.block_on(dispatch(cli)) {
        Ok(code) => code,
        Err(e) => {
            if json {
                println!("{}", json!({ "error": { "code": e.code(), "message": e.to_string() } }));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::FAILURE
        }
    }
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    let ansi = std::io::IsTerminal::is_terminal(&std::io::stderr());
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_ansi(ansi).with_writer(std::io::stderr).try_init();
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string(value).expect("serializes"));
    } else {
        println!("{}", human());
    }
}

fn load_keystore(path: &Path) -> Result<Keystore, CliError> {
    Keystore::load(path).map_err(|e| other(format!("keystore {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| other(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| other(format!("{}: {e}", path.display())))
}

async fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    let json = cli.json;
    match cli.cmd {
        Cmd::Keygen { subject, cert_out, force } => {
            if cli.keystore.exists() && !force {
                return Err(other(format!("{} exists; pass --force to replace it", cli.keystore.display())));
            }
            let ks = Keystore::create(&subject, None);
            ks.save(&cli.keystore).map_err(other)?;
            if let Some(p) = cert_out {
                ks.certificate.save(&p).map_err(other)?;
            }
            emit(json, &ks.certificate, || format!("{}  {}", ks.certificate.fingerprint, ks.certificate.subject));
        }
        Cmd::Publish { dir, base_url, behavior, version, payload, out } => {
            let ks = load_keystore(&cli.keystore)?;
            let payload = match payload {
                Some(p) => std::fs::read(&p).map_err(other)?,
                None => format!("builtin {behavior}").into_bytes(),
            };
            let store = BundleStore::open(dir, base_url).map_err(other)?;
            let bref = store.publish(&CodeBundle::new(&behavior, &version, payload), &ks.keypair(), &ks.certificate).map_err(other)?;
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_vec_pretty(&bref).expect("serializes")).map_err(other)?;
            }
            emit(json, &bref, || serde_json::to_string_pretty(&bref).expect("serializes"));
        }
        Cmd::Trust { cert, store, admin, token } => {
            let cert = Certificate::load(&cert).map_err(other)?;
            if !cert.fingerprint_is_valid() {
                return Err(other("certificate fingerprint does not match its contents"));
            }
            let added = match (store, admin) {
                (Some(path), _) => {
                    let mut trust = if path.exists() { TrustStore::load(&path).map_err(other)? } else { TrustStore::new() };
                    let added = trust.accept(&cert);
                    trust.save(&path).map_err(other)?;
                    added
                }
                (None, Some(url)) => AdminClient::new(url).trust(&cert, token.as_deref()).await?,
                (None, None) => return Err(other("give --store FILE or --admin URL")),
            };
            emit(json, &json!({ "fingerprint": cert.fingerprint, "added": added }), || {
                format!("{} {}", cert.fingerprint, if added { "trusted" } else { "already trusted" })
            });
        }
        Cmd::Launch(a) => {
            let ks = load_keystore(&cli.keystore)?;
            let params: Value = serde_json::from_str(&a.params).map_err(|e| other(format!("--params: {e}")))?;
            let bundle_ref: BundleRef = read_json(&a.bundle)?;
            let dest = resolve(&cli.registry, &a.dest).await;
            let mut itinerary = Vec::new();
            for stop in &a.itinerary {
                itinerary.push(resolve(&cli.registry, stop).await);
            }
            let spec = LaunchSpec {
                behavior_id: a.behavior,
                params,
                dest,
                service_kind: if a.private { ServiceKind::Private } else { ServiceKind::Service },
                open_access: a.open,
                itinerary,
                bundle_ref,
                owner: ks.certificate,
            };
            let agent = super::launch(&spec, &BehaviorRegistry::builtin()).await?;
            emit(json, &json!({ "agent_id": agent, "dest": spec.dest }), || agent.to_hex());
        }
        Cmd::Discover { kind, id, attr } => {
            let mut filter = Filter::any();
            filter.kind = kind.map(|k| if k == "station" { ServiceType::Station } else { ServiceType::Agent });
            filter.service_id = id;
            filter.attributes = attr.into_iter().collect::<BTreeMap<_, _>>();
            let records = super::discover(&cli.registry, &filter).await?;
            if json {
                for r in &records {
                    println!("{}", serde_json::to_string(r).expect("serializes"));
                }
            } else {
                print!("{}", table(&records));
            }
        }
        Cmd::Attach { agent, at } => {
            let ks = load_keystore(&cli.keystore)?;
            let endpoint = match at {
                Some(e) => e,
                None => locate(&cli.registry, &agent).await?.endpoint,
            };
            match attach(&endpoint, agent, Some(&ks.keypair())).await? {
                Attached::Finished(o) => {
                    let v = json!({ "outcome": o.outcome, "result": o.result_json() });
                    emit(json, &v, || serde_json::to_string_pretty(&v).expect("serializes"));
                }
                Attached::Session(s) => {
                    if !json {
                        eprintln!("attached: {}", s.info);
                    }
                    session_loop(s, json).await?;
                }
            }
        }
        Cmd::Recall { agent, origin } => {
            let ks = load_keystore(&cli.keystore)?;
            let origin = resolve(&cli.registry, &origin).await;
            let o = super::recall(&cli.registry, &agent, &origin, Some(&ks.keypair())).await?;
            let v = json!({ "agent_id": agent, "outcome": o.outcome, "result": o.result_json() });
            emit(json, &v, || serde_json::to_string_pretty(&v).expect("serializes"));
        }
        Cmd::Log { agent } => {
            let log = super::travel_log(&cli.registry, &agent).await?;
            if json {
                for e in &log {
                    println!("{}", serde_json::to_string(e).expect("serializes"));
                }
            } else {
                for (i, e) in log.iter().enumerate() {
                    let dep = e.departure.map(|d| d.to_string()).unwrap_or_else(|| "-".into());
                    println!("{:>4}  {:<20} {:>15} {:>15}", i + 1, e.station_id, e.arrival, dep);
                }
            }
        }
        Cmd::Registry { listen, min_lease_ms, max_lease_ms, sweep_ms } => {
            init_logging();
            let policy = LeasePolicy { min_lease_ms, max_lease_ms };
            let server = RegistryServer::start(RegistryServerConfig { listen, policy, sweep_ms }).await.map_err(other)?;
            tracing::info!(endpoint = %server.endpoint(), "registry up");
            server.wait().await;
        }
        Cmd::Station { config } => {
            init_logging();
            let cfg: StationConfig = read_json(&config)?;
            let station = Station::start(cfg).await.map_err(other)?;
            tracing::info!(endpoint = %station.endpoint(), admin = %station.admin_url(), "station up");
            tokio::select! {
                _ = station.wait() => {}
                _ = tokio::signal::ctrl_c() => {}
            }
        }
        Cmd::Codeserver { listen, dir } => {
            init_logging();
            let server = CodeServer::start(&listen, dir).await.map_err(other)?;
            tracing::info!(addr = %server.addr(), "code server up");
            server.wait().await;
        }
        Cmd::Gateway { listen, bundles } => {
            init_logging();
            let ks = load_keystore(&cli.keystore)?;
            let bundles = match bundles {
                Some(p) => read_json(&p)?,
                None => BTreeMap::new(),
            };
            let gw = Gateway::start(GatewayConfig {
                listen,
                registry: cli.registry,
                owner_key: ks.keypair(),
                owner_cert: ks.certificate,
                bundles,
            })
            .await
            .map_err(other)?;
            tracing::info!(url = %gw.url(), "gateway up");
            gw.wait().await;
        }
        Cmd::Bench(b) => return run_bench(b, json).await,
    }
    Ok(ExitCode::SUCCESS)
}

/// Station ids resolve to endpoints through the registry; anything else is
/// taken as an endpoint.
async fn resolve(registry: &str, dest: &str) -> String {
    if dest.contains(':') {
        return dest.to_string();
    }
    match super::discover(registry, &Filter::kind(ServiceType::Station)).await {
        Ok(records) => records.into_iter().find(|r| r.service_id == dest).map(|r| r.endpoint).unwrap_or_else(|| dest.to_string()),
        Err(_) => dest.to_string(),
    }
}

fn table(records: &[ServiceRecord]) -> String {
    let mut out = format!("{:<8} {:<34} {:<22} {:>14}  ATTRIBUTES\n", "KIND", "ID", "ENDPOINT", "EXPIRES");
    for r in records {
        let kind = match r.kind {
            ServiceType::Station => "station",
            ServiceType::Agent => "agent",
        };
        let attrs: Vec<String> = r.attributes.iter().map(|(k, v)| format!("{k}={v}")).collect();
        out.push_str(&format!("{kind:<8} {:<34} {:<22} {:>14}  {}\n", r.service_id, r.endpoint, r.lease.expiry, attrs.join(" ")));
    }
    out
}

/// Session input: a JSON behavior command per line, or one of
/// `ls [PATH]`, `stat PATH`, `get PATH [LOCAL] [stream]`,
/// `put LOCAL PATH [stream]`, `tables`, `query TABLE PREDICATE...`,
/// `state`, `move DEST`, `finish`, `quit`.
async fn session_loop(mut s: AttachSession, json: bool) -> Result<(), CliError> {
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        if !json {
            eprint!("> ");
            let _ = std::io::stderr().flush();
        }
        let Some(line) = lines.next() else { return Ok(()) };
        let line = line.map_err(other)?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        let transport = |i: usize| {
            if words.get(i).is_some_and(|w| w.eq_ignore_ascii_case("stream")) { Transport::Stream } else { Transport::Control }
        };
        let result: Result<Value, MeshError> = match words[0] {
            "quit" | "exit" => return Ok(()),
            "finish" => {
                let o = s.finish().await?;
                let v = json!({ "outcome": o.outcome, "result": o.result_json() });
                emit(json, &v, || serde_json::to_string_pretty(&v).expect("serializes"));
                return Ok(());
            }
            "ls" => s.list(words.get(1).copied().unwrap_or("")).await.map(|e| json!(e)),
            "stat" if words.len() == 2 => s.stat(words[1]).await.map(|e| json!(e)),
            "get" if words.len() >= 2 => {
                let local = words.get(2).filter(|w| !w.eq_ignore_ascii_case("stream")).copied();
                let t = transport(if local.is_some() { 3 } else { 2 });
                match s.read_file(words[1], t).await {
                    Ok(bytes) => match local {
                        Some(p) => std::fs::write(p, &bytes).map(|_| json!({ "saved": p, "bytes": bytes.len() })).map_err(MeshError::from),
                        None => Ok(json!({ "bytes": bytes.len(), "text": String::from_utf8_lossy(&bytes) })),
                    },
                    Err(e) => Err(e),
                }
            }
            "put" if words.len() >= 3 => match std::fs::read(words[1]) {
                Ok(data) => s.write_file(words[2], &data, transport(3)).await.map(|_| json!({ "written": words[2], "bytes": data.len() })),
                Err(e) => Err(e.into()),
            },
            "tables" => s.list_catalog().await.map(|t| json!(t)),
            "query" if words.len() >= 2 => {
                let pred = words[2..].join(" ");
                s.query(words[1], &[], json!(pred)).await.map(|r| json!(r))
            }
            "state" => s.state().await,
            "move" if words.len() == 2 => s.move_to(words[1]).await.map(|_| json!({ "moving": words[1] })),
            _ if line.starts_with('{') => match serde_json::from_str::<Value>(line) {
                Ok(cmd) => s.command(cmd).await,
                Err(e) => Err(MeshError::Protocol(format!("bad JSON command: {e}"))),
            },
            _ => Err(MeshError::Protocol(format!("unknown command {:?}", words[0]))),
        };
        match result {
            Ok(v) => emit(json, &v, || serde_json::to_string_pretty(&v).expect("serializes")),
            Err(e @ MeshError::Rpc(_)) => return Err(e.into()),
            Err(e) if matches!(e.code(), "NOT_RESIDENT") => return Err(e.into()),
            Err(e) => {
                if json {
                    println!("{}", json!({ "error": { "code": e.code(), "message": e.to_string() } }));
                } else {
                    eprintln!("error: {e}");
                }
            }
        }
    }
}

async fn run_bench(cmd: BenchCmd, json: bool) -> Result<ExitCode, CliError> {
    match cmd {
        BenchCmd::Soak { stations, hops, dwell_ms, report } => {
            let r = bench::soak(SoakParams { stations, hops, dwell_ms }).await.map_err(other)?;
            if let Some(p) = report {
                std::fs::write(&p, serde_json::to_vec_pretty(&r).expect("serializes")).map_err(other)?;
            }
            let summary = json!({
                "passed": r.passed,
                "hops_completed": r.hops_completed,
                "losses": r.losses,
                "duplicates": r.duplicates,
                "log_entries": r.log_entries,
                "wall_time_ms": r.wall_time_ms,
                "failure": r.failure,
            });
            emit(json, &summary, || {
                format!(
                    "{}: {} hops, {} losses, {} duplicates, {} log entries, {:.1} s{}",
                    if r.passed { "PASSED" } else { "FAILED" },
                    r.hops_completed,
                    r.losses,
                    r.duplicates,
                    r.log_entries,
                    r.wall_time_ms as f64 / 1000.0,
                    r.failure.as_deref().map(|f| format!(" ({f})")).unwrap_or_default(),
                )
            });
            Ok(if r.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        BenchCmd::Throughput { size, transport, trials, csv } => {
            let transports = match transport.to_ascii_lowercase().as_str() {
                "both" => vec![Transport::Control, Transport::Stream],
                t => vec![t.parse().map_err(other)?],
            };
            let mesh = crate::localmesh::LocalMesh::start(1).await.map_err(other)?;
            let rows = bench::throughput_on(&mesh, 0, &transports, size, trials).await.map_err(other)?;
            if let Some(p) = csv {
                bench::write_csv(&rows, &p).map_err(other)?;
            }
            for m in bench::medians(&rows) {
                emit(json, &m, || format!("{:<6} {:<8} {:>12} bytes  {:>10.1} MB/s (median of {trials})", m.direction, m.transport, m.size, m.mb_per_s));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
