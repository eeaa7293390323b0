//! The station daemon: hosts agents, admits arrivals, keeps its lease, and
//! serves the wire and admin ports.
//!
//! A station owns four long-lived tasks (wire accept loop, admin HTTP,
//! heartbeat, in-doubt resolver) plus one task per resident agent. All of
//! them are tracked so that [`Station::crash`] can stop the station abruptly,
//! the way a killed process would, leaving only its data directory behind.

mod admin;
mod events;
mod moves;
mod runner;
mod server;
mod stream;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{mpsc, Notify};
use tokio::task::AbortHandle;

use crate::agents::{BehaviorRegistry, Sandbox, TableCatalog};
use crate::lookup::{Lease, RegistryClient, ServiceInfo, ServiceType};
use crate::migration::{
    plan_recovery, Hold, LogError, LogRecord, MoveStep, MoveTxn, Restart, TxnLog, DEFAULT_BACKOFF_MAX_MS,
    DEFAULT_BACKOFF_MIN_MS, DEFAULT_COMMIT_TIMEOUT_MS, DEFAULT_PREPARE_TIMEOUT_MS,
};
use crate::security::{Certificate, ChallengeBook, Keystore, SecurityError, TrustStore};
use crate::wire::{AgentId, AgentSnapshot, ServiceKind, TravelEntry, TxnId};

pub use events::StationEvent;
pub(crate) use runner::AgentMsg;

pub const DEFAULT_STEP_BUDGET_MS: u64 = 500;
pub const DEFAULT_HEARTBEAT_MS: u64 = 10_000;

fn default_lease_ms() -> u64 {
    crate::lookup::DEFAULT_LEASE_MS
}
fn default_heartbeat_ms() -> u64 {
    DEFAULT_HEARTBEAT_MS
}
fn default_step_budget_ms() -> u64 {
    DEFAULT_STEP_BUDGET_MS
}
fn default_tick_ms() -> u64 {
    20
}
fn default_prepare_timeout_ms() -> u64 {
    DEFAULT_PREPARE_TIMEOUT_MS
}
fn default_commit_timeout_ms() -> u64 {
    DEFAULT_COMMIT_TIMEOUT_MS
}
fn default_backoff_min_ms() -> u64 {
    DEFAULT_BACKOFF_MIN_MS
}
fn default_backoff_max_ms() -> u64 {
    DEFAULT_BACKOFF_MAX_MS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationConfig {
    pub station_id: String,
    /// Wire port, e.g. `127.0.0.1:7700`. Port 0 picks a free port.
    pub listen: String,
    /// Registry endpoint.
    pub registry: String,
    #[serde(default = "default_lease_ms")]
    pub lease_ms: u64,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_ms: u64,
    pub trust_store_path: PathBuf,
    pub keystore_path: PathBuf,
    pub fs_root: PathBuf,
    #[serde(default)]
    pub tables: BTreeMap<String, PathBuf>,
    pub admin_listen: String,
    /// Holds the transaction log.
    pub data_dir: PathBuf,
    /// Bearer token required by trust mutations; none disables them.
    #[serde(default)]
    pub admin_token: Option<String>,
    #[serde(default = "default_step_budget_ms")]
    pub step_budget_ms: u64,
    /// Pause between steps of an idle agent.
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    #[serde(default = "default_prepare_timeout_ms")]
    pub prepare_timeout_ms: u64,
    #[serde(default = "default_commit_timeout_ms")]
    pub commit_timeout_ms: u64,
    #[serde(default = "default_backoff_min_ms")]
    pub backoff_min_ms: u64,
    #[serde(default = "default_backoff_max_ms")]
    pub backoff_max_ms: u64,
}

impl StationConfig {
    /// A config with defaults for everything but identity, ports and paths.
    pub fn new(station_id: &str, registry: &str, dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        StationConfig {
            station_id: station_id.to_string(),
            listen: "127.0.0.1:0".into(),
            registry: registry.to_string(),
            lease_ms: default_lease_ms(),
            heartbeat_ms: default_heartbeat_ms(),
            trust_store_path: dir.join("trust.txt"),
            keystore_path: dir.join("keystore.json"),
            fs_root: dir.join("fs"),
            tables: BTreeMap::new(),
            admin_listen: "127.0.0.1:0".into(),
            data_dir: dir.join("data"),
            admin_token: None,
            step_budget_ms: default_step_budget_ms(),
            tick_ms: default_tick_ms(),
            prepare_timeout_ms: default_prepare_timeout_ms(),
            commit_timeout_ms: default_commit_timeout_ms(),
            backoff_min_ms: default_backoff_min_ms(),
            backoff_max_ms: default_backoff_max_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), StationError> {
        let bad = |m: String| Err(StationError::Config(m));
        if self.station_id.is_empty() {
            return bad("station_id is empty".into());
        }
        if !self.fs_root.is_dir() {
            return bad(format!("fs_root {} is not a directory", self.fs_root.display()));
        }
        if self.heartbeat_ms == 0 || self.heartbeat_ms >= self.lease_ms {
            return bad(format!("heartbeat_ms {} must be below lease_ms {}", self.heartbeat_ms, self.lease_ms));
        }
        if self.step_budget_ms == 0 || self.tick_ms == 0 {
            return bad("step_budget_ms and tick_ms must be positive".into());
        }
        Ok(())
    }

    pub fn log_path(&self) -> PathBuf {
        self.data_dir.join("txn.log")
    }
}

#[derive(Debug, Error)]
pub enum StationError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Security(#[from] SecurityError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("recovery: {0}")]
    Recovery(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunState {
    Active,
    Suspended,
    Moving,
    Finished,
    Failed,
}

impl RunState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Finished | RunState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Active => "ACTIVE",
            RunState::Suspended => "SUSPENDED",
            RunState::Moving => "MOVING",
            RunState::Finished => "FINISHED",
            RunState::Failed => "FAILED",
        }
    }
}

/// Callback run at each protocol step boundary on the station where the
/// step happens. Returning true crashes that station on the spot.
pub type StepHook = Arc<dyn Fn(MoveStep, &TxnId) -> bool + Send + Sync>;

/// Crashes a station from anywhere, e.g. from another station's hook.
#[derive(Clone)]
pub struct CrashSwitch(std::sync::Weak<Shared>);

impl CrashSwitch {
    pub fn trip(&self) {
        if let Some(shared) = self.0.upgrade() {
            shared.crash_now();
        }
    }
}

/// Extension points for embedding a station.
#[derive(Clone)]
pub struct StationOptions {
    pub behaviors: BehaviorRegistry,
    pub hook: Option<StepHook>,
}

impl Default for StationOptions {
    fn default() -> Self {
        StationOptions { behaviors: BehaviorRegistry::builtin(), hook: None }
    }
}

pub(crate) struct Resident {
    /// Latest known snapshot. The state blob is current only at checkpoints.
    pub snapshot: AgentSnapshot,
    pub run_state: RunState,
    pub tx: Option<mpsc::Sender<AgentMsg>>,
    pub result: Option<Vec<u8>>,
    pub txn: Option<TxnId>,
    pub streaming: bool,
}

pub(crate) struct HeldTxn {
    pub hold: Hold,
    pub snapshot: AgentSnapshot,
    pub since: u64,
    pub next_try: u64,
    pub backoff: u64,
}

pub(crate) struct Outgoing {
    pub txn: MoveTxn,
    pub next_try: u64,
    pub backoff: u64,
}

pub(crate) struct Shared {
    pub cfg: StationConfig,
    pub endpoint: String,
    pub admin_addr: SocketAddr,
    pub cert: Certificate,
    pub trust: RwLock<TrustStore>,
    pub behaviors: BehaviorRegistry,
    pub fs: Arc<Sandbox>,
    pub tables: Arc<TableCatalog>,
    pub registry: RegistryClient,
    pub log: Mutex<TxnLog>,
    pub residents: Mutex<HashMap<AgentId, Resident>>,
    pub holds: Mutex<BTreeMap<TxnId, HeldTxn>>,
    pub outgoing: Mutex<BTreeMap<TxnId, Outgoing>>,
    pub rejected: Mutex<HashMap<TxnId, (String, String)>>,
    /// Serializes dest-side txn decisions.
    pub txn_lock: tokio::sync::Mutex<()>,
    /// Serializes registry mutations against residency changes.
    pub reg_lock: tokio::sync::Mutex<()>,
    pub events: events::EventBus,
    pub challenges: Mutex<ChallengeBook>,
    pub bundles: Mutex<HashMap<String, Vec<u8>>>,
    pub http: reqwest::Client,
    pub crashed: Arc<AtomicBool>,
    pub tasks: Mutex<Vec<AbortHandle>>,
    pub hook: Option<StepHook>,
    pub heartbeat_paused: AtomicBool,
    pub heartbeat_now: Notify,
    pub lease: Mutex<Option<Lease>>,
}

impl Shared {
    pub fn crashed(&self) -> bool {
        self.crashed.load(Ordering::SeqCst)
    }

    /// Spawns a task that dies with the station.
    pub fn spawn<F>(&self, fut: F)
    where
        F: std::future::Future<Output = ()> + Send + 'static,
    {
        let handle = tokio::spawn(fut);
        let mut tasks = self.tasks.lock().unwrap();
        if self.crashed() {
            handle.abort();
            return;
        }
        tasks.retain(|t| !t.is_finished());
        tasks.push(handle.abort_handle());
    }

    /// Runs the step hook; false when the station crashed meanwhile.
    pub fn step_done(&self, step: MoveStep, txn: &TxnId) -> bool {
        if let Some(hook) = &self.hook {
            if hook(step, txn) {
                self.crash_now();
            }
        }
        !self.crashed()
    }

    /// Stops every task at once and fences the log.
    pub fn crash_now(&self) {
        if self.crashed.swap(true, Ordering::SeqCst) {
            return;
        }
        for t in self.tasks.lock().unwrap().drain(..) {
            t.abort();
        }
        tracing::info!(station = %self.cfg.station_id, "station crashed");
    }

    pub fn append(&self, record: &LogRecord) -> Result<(), LogError> {
        self.log.lock().unwrap().append(record)
    }

    pub fn budget(&self) -> Duration {
        Duration::from_millis(self.cfg.step_budget_ms)
    }

    fn station_info(&self) -> ServiceInfo {
        ServiceInfo {
            service_id: self.cfg.station_id.clone(),
            kind: ServiceType::Station,
            endpoint: self.endpoint.clone(),
            attributes: BTreeMap::from([
                ("admin".to_string(), format!("http://{}", self.admin_addr)),
                ("station_id".to_string(), self.cfg.station_id.clone()),
            ]),
        }
    }

    pub fn agent_info(&self, snapshot: &AgentSnapshot) -> ServiceInfo {
        ServiceInfo {
            service_id: snapshot.agent_id.to_hex(),
            kind: ServiceType::Agent,
            endpoint: self.endpoint.clone(),
            attributes: BTreeMap::from([
                ("behavior_id".to_string(), snapshot.behavior_id.clone()),
                ("owner".to_string(), snapshot.owner_cert.fingerprint.clone()),
                ("station".to_string(), self.cfg.station_id.clone()),
            ]),
        }
    }

    /// Renews a lease, registering afresh if the registry forgot it.
    async fn keep_registered(&self, info: &ServiceInfo) -> Option<Lease> {
        match self.registry.renew(&info.service_id, self.cfg.lease_ms).await {
            Ok(lease) => Some(lease),
            Err(e) if e.is_not_found() => match self.registry.register(info, self.cfg.lease_ms).await {
                Ok(lease) => {
                    tracing::info!(service = %info.service_id, "registered");
                    Some(lease)
                }
                Err(e) => {
                    tracing::warn!(service = %info.service_id, "register failed: {e}");
                    None
                }
            },
            Err(e) => {
                tracing::debug!(service = %info.service_id, "renew failed: {e}");
                None
            }
        }
    }

    /// Registers a service agent that resides here.
    pub async fn register_agent(&self, snapshot: &AgentSnapshot) {
        if snapshot.service_kind != ServiceKind::Service {
            return;
        }
        let _g = self.reg_lock.lock().await;
        if let Err(e) = self.registry.register(&self.agent_info(snapshot), self.cfg.lease_ms).await {
            tracing::warn!(agent = %snapshot.agent_id, "agent registration failed: {e}");
        }
    }

    pub async fn unregister_agent(&self, snapshot: &AgentSnapshot) {
        if snapshot.service_kind != ServiceKind::Service {
            return;
        }
        let _g = self.reg_lock.lock().await;
        if let Err(e) = self.registry.unregister(&snapshot.agent_id.to_hex()).await {
            if !e.is_not_found() {
                tracing::warn!(agent = %snapshot.agent_id, "agent unregistration failed: {e}");
            }
        }
    }

    async fn heartbeat_once(&self) {
        let _g = self.reg_lock.lock().await;
        let lease = self.keep_registered(&self.station_info()).await;
        *self.lease.lock().unwrap() = lease;
        let services: Vec<AgentSnapshot> = self
            .residents
            .lock()
            .unwrap()
            .values()
            .filter(|r| !r.run_state.is_terminal() && r.snapshot.service_kind == ServiceKind::Service)
            .map(|r| r.snapshot.clone())
            .collect();
        for snapshot in services {
            // Re-check: the agent may have left while we were talking.
            let still_here = self
                .residents
                .lock()
                .unwrap()
                .get(&snapshot.agent_id)
                .is_some_and(|r| !r.run_state.is_terminal());
            if still_here {
                self.keep_registered(&self.agent_info(&snapshot)).await;
            }
        }
    }

    pub fn status(&self) -> StationStatus {
        let mut agents: Vec<AgentStatus> = self
            .residents
            .lock()
            .unwrap()
            .values()
            .map(|r| AgentStatus {
                agent_id: r.snapshot.agent_id.to_hex(),
                behavior_id: r.snapshot.behavior_id.clone(),
                run_state: r.run_state,
                hops: r.snapshot.travel_log.len(),
                hop_index: r.snapshot.hop_index,
                service_kind: r.snapshot.service_kind,
                open_access: r.snapshot.open_access,
                owner: r.snapshot.owner_cert.fingerprint.clone(),
                txn_id: r.txn.map(|t| t.to_hex()),
            })
            .collect();
        agents.sort_by(|a, b| a.agent_id.cmp(&b.agent_id));
        let holds = self
            .holds
            .lock()
            .unwrap()
            .values()
            .map(|h| HoldStatus {
                txn_id: h.hold.txn.txn_id.to_hex(),
                agent_id: h.hold.txn.agent_id.to_hex(),
                source: h.hold.txn.source.clone(),
                since: h.since,
            })
            .collect();
        let lease = self.lease.lock().unwrap();
        StationStatus {
            station_id: self.cfg.station_id.clone(),
            endpoint: self.endpoint.clone(),
            admin: format!("http://{}", self.admin_addr),
            fingerprint: self.cert.fingerprint.clone(),
            lease: LeaseStatus {
                registered: lease.is_some_and(|l| l.expiry >= crate::clock::now_ms()),
                expiry: lease.map(|l| l.expiry),
            },
            heartbeat_paused: self.heartbeat_paused.load(Ordering::SeqCst),
            agents,
            holds,
            unfinalized: self.outgoing.lock().unwrap().len(),
        }
    }

    pub fn travel_log(&self, agent: &AgentId) -> Option<Vec<TravelEntry>> {
        self.residents.lock().unwrap().get(agent).map(|r| r.snapshot.travel_log.clone())
    }

    /// Asks a resident agent to move. The outcome arrives as an event.
    pub fn request_move(&self, agent: &AgentId, dest: &str, finish_on_arrival: bool) -> Result<(), (u16, &'static str, String)> {
        if dest == self.endpoint {
            return Err((400, "SAME_STATION", "agent is already here".into()));
        }
        let residents = self.residents.lock().unwrap();
        let r = residents.get(agent).ok_or((404, "NOT_RESIDENT", format!("agent {agent} is not here")))?;
        match r.run_state {
            RunState::Moving => return Err((409, "BUSY", "a move is already in flight".into())),
            s if s.is_terminal() => return Err((409, "NOT_RUNNING", format!("agent is {}", s.as_str()))),
            _ => {}
        }
        let tx = r.tx.clone().ok_or((409, "NOT_RUNNING", "agent has no runner".to_string()))?;
        tx.try_send(AgentMsg::Move { dest: dest.to_string(), finish_on_arrival })
            .map_err(|_| (409, "BUSY", "agent inbox is full".to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStatus {
    pub agent_id: String,
    pub behavior_id: String,
    pub run_state: RunState,
    /// Stations visited, counting the current one.
    pub hops: usize,
    pub hop_index: usize,
    pub service_kind: ServiceKind,
    pub open_access: bool,
    pub owner: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldStatus {
    pub txn_id: String,
    pub agent_id: String,
    pub source: String,
    pub since: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseStatus {
    pub registered: bool,
    #[serde(default)]
    pub expiry: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationStatus {
    pub station_id: String,
    pub endpoint: String,
    pub admin: String,
    pub fingerprint: String,
    pub lease: LeaseStatus,
    pub heartbeat_paused: bool,
    pub agents: Vec<AgentStatus>,
    pub holds: Vec<HoldStatus>,
    pub unfinalized: usize,
}

impl StationStatus {
    pub fn agent(&self, agent_id: &AgentId) -> Option<&AgentStatus> {
        let hex = agent_id.to_hex();
        self.agents.iter().find(|a| a.agent_id == hex)
    }
}

/// Binds, retrying briefly: a crashed predecessor may still hold the port.
async fn bind_retry(addr: &str) -> std::io::Result<tokio::net::TcpListener> {
    let mut last = None;
    for _ in 0..50 {
        match tokio::net::TcpListener::bind(addr).await {
            Ok(l) => return Ok(l),
            Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => {
                last = Some(e);
                tokio::time::sleep(Duration::from_millis(20)).await;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("bind attempted"))
}

/// A running station.
pub struct Station {
    shared: Arc<Shared>,
}

impl Station {
    pub async fn start(cfg: StationConfig) -> Result<Station, StationError> {
        Self::start_with(cfg, StationOptions::default()).await
    }

    /// Loads keys and trust, replays the transaction log, restores the
    /// agents it owns, and only then opens the ports.
    pub async fn start_with(cfg: StationConfig, options: StationOptions) -> Result<Station, StationError> {
        cfg.validate()?;
        let keystore = Keystore::load(&cfg.keystore_path)?;
        let trust = TrustStore::load(&cfg.trust_store_path)?;
        let fs = Arc::new(Sandbox::new(&cfg.fs_root)?);
        let tables = Arc::new(TableCatalog::new(cfg.tables.clone()));
        let crashed = Arc::new(AtomicBool::new(false));
        let (log, records) = TxnLog::open(cfg.log_path())?;
        let log = log.with_fence(crashed.clone());
        let plan = plan_recovery(&records, &cfg.station_id).map_err(StationError::Recovery)?;

        let listener = bind_retry(&cfg.listen).await?;
        let admin_listener = bind_retry(&cfg.admin_listen).await?;
        let endpoint = listener.local_addr()?.to_string();
        let admin_addr = admin_listener.local_addr()?;

        let shared = Arc::new(Shared {
            endpoint,
            admin_addr,
            cert: keystore.certificate.clone(),
            trust: RwLock::new(trust),
            behaviors: options.behaviors,
            fs,
            tables,
            registry: RegistryClient::new(&cfg.registry).with_timeout(Duration::from_secs(2)),
            log: Mutex::new(log),
            residents: Mutex::new(HashMap::new()),
            holds: Mutex::new(BTreeMap::new()),
            outgoing: Mutex::new(BTreeMap::new()),
            rejected: Mutex::new(HashMap::new()),
            txn_lock: tokio::sync::Mutex::new(()),
            reg_lock: tokio::sync::Mutex::new(()),
            events: events::EventBus::new(&cfg.station_id),
            challenges: Mutex::new(ChallengeBook::default()),
            bundles: Mutex::new(HashMap::new()),
            http: reqwest::Client::builder().timeout(Duration::from_secs(10)).build().expect("http client"),
            crashed,
            tasks: Mutex::new(Vec::new()),
            hook: options.hook,
            heartbeat_paused: AtomicBool::new(false),
            heartbeat_now: Notify::new(),
            lease: Mutex::new(None),
            cfg,
        });

        // Local recovery first: decide every txn this log can decide alone.
        for txn in &plan.abort {
            shared.append(&LogRecord::Abort { txn_id: txn.txn_id })?;
            let (s, dest, id) = (shared.clone(), txn.dest.clone(), txn.txn_id);
            shared.spawn(async move { moves::send_abort(&s, &dest, id).await });
        }
        let now = crate::clock::monotonic_ms();
        for hold in plan.in_doubt {
            let snapshot = crate::wire::unmarshal_snapshot(&hold.snapshot).map_err(|e| StationError::Recovery(e.to_string()))?;
            let backoff = shared.cfg.backoff_min_ms;
            shared.holds.lock().unwrap().insert(hold.txn.txn_id, HeldTxn { hold, snapshot, since: now, next_try: 0, backoff });
        }
        for txn in plan.unfinalized {
            let backoff = shared.cfg.backoff_min_ms;
            shared.outgoing.lock().unwrap().insert(txn.txn_id, Outgoing { txn, next_try: 0, backoff });
        }
        for (agent_id, agent) in plan.agents {
            let entry = match agent.restart {
                Restart::Retired { outcome, result } => {
                    let run_state = if outcome == "FAILED" { RunState::Failed } else { RunState::Finished };
                    shared.residents.lock().unwrap().insert(
                        agent_id,
                        Resident { snapshot: agent.snapshot, run_state, tx: None, result: Some(result), txn: None, streaming: false },
                    );
                    continue;
                }
                Restart::Reactivate => runner::Entry::Reactivate,
                Restart::ResumeAborted => runner::Entry::Resume("RECOVERED".into()),
                Restart::FinishOnArrival => runner::Entry::FinishNow,
            };
            runner::start_agent(&shared, agent.snapshot, entry);
        }
        if !shared.residents.lock().unwrap().is_empty() || !shared.holds.lock().unwrap().is_empty() {
            shared.events.emit("RECOVERED", None, json!({ "agents": shared.residents.lock().unwrap().len() }));
        }

        shared.spawn(server::accept_loop(shared.clone(), listener));
        shared.spawn(admin::serve(shared.clone(), admin_listener));
        // First registration is attempted inline so a reachable registry
        // lists the station as soon as start returns.
        let _ = tokio::time::timeout(Duration::from_secs(2), shared.heartbeat_once()).await;
        shared.spawn(heartbeat_loop(shared.clone()));
        shared.spawn(moves::resolver_loop(shared.clone()));
        tracing::info!(station = %shared.cfg.station_id, endpoint = %shared.endpoint, admin = %shared.admin_addr, "station started");
        Ok(Station { shared })
    }

    pub fn station_id(&self) -> &str {
        &self.shared.cfg.station_id
    }

    /// Wire endpoint (`host:port`).
    pub fn endpoint(&self) -> &str {
        &self.shared.endpoint
    }

    pub fn admin_addr(&self) -> SocketAddr {
        self.shared.admin_addr
    }

    pub fn admin_url(&self) -> String {
        format!("http://{}", self.shared.admin_addr)
    }

    pub fn config(&self) -> &StationConfig {
        &self.shared.cfg
    }

    pub fn status(&self) -> StationStatus {
        self.shared.status()
    }

    pub fn travel_log(&self, agent: &AgentId) -> Option<Vec<TravelEntry>> {
        self.shared.travel_log(agent)
    }

    pub fn events(&self) -> Vec<StationEvent> {
        self.shared.events.history()
    }

    pub fn follow_events(&self) -> (Vec<StationEvent>, tokio::sync::broadcast::Receiver<StationEvent>) {
        self.shared.events.follow()
    }

    pub fn request_move(&self, agent: &AgentId, dest: &str) -> Result<(), String> {
        self.shared.request_move(agent, dest, false).map_err(|(_, code, msg)| format!("{code}: {msg}"))
    }

    pub fn trust(&self, cert: &Certificate) -> Result<bool, StationError> {
        admin::accept_cert(&self.shared, cert)
    }

    pub fn is_crashed(&self) -> bool {
        self.shared.crashed()
    }

    /// Stops renewing leases, as if the station hung.
    pub fn pause_heartbeat(&self) {
        self.shared.heartbeat_paused.store(true, Ordering::SeqCst);
    }

    /// Resumes renewals with an immediate heartbeat.
    pub fn resume_heartbeat(&self) {
        self.shared.heartbeat_paused.store(false, Ordering::SeqCst);
        self.shared.heartbeat_now.notify_one();
    }

    /// One pass over in-doubt holds and unacknowledged commits, ignoring
    /// backoff.
    pub async fn resolve_in_doubt(&self) {
        moves::resolve_pass(&self.shared, true).await;
    }

    /// Stops every task at once and fences the log. Nothing is cleaned up:
    /// leases lapse on their own and the data directory is left as is.
    pub fn crash(&self) {
        self.shared.crash_now();
    }

    pub fn crash_switch(&self) -> CrashSwitch {
        CrashSwitch(Arc::downgrade(&self.shared))
    }

    /// Waits until the station is crashed or dropped (daemon mode).
    pub async fn wait(&self) {
        while !self.shared.crashed() {
            tokio::time::sleep(Duration::from_millis(200)).await;
        }
    }
}

impl Drop for Station {
    fn drop(&mut self) {
        self.crash();
    }
}

/// Renews every heartbeat. While the registry is unreachable it retries
/// sooner, backing off from 250 ms up to the heartbeat period.
async fn heartbeat_loop(shared: Arc<Shared>) {
    let period = shared.cfg.heartbeat_ms;
    let mut retry = 250.min(period);
    loop {
        let registered = shared.lease.lock().unwrap().is_some();
        let wait = if registered { period } else { retry };
        retry = if registered { 250.min(period) } else { (retry * 2).min(period) };
        tokio::select! {
            _ = tokio::time::sleep(Duration::from_millis(wait)) => {}
            _ = shared.heartbeat_now.notified() => {}
        }
        if !shared.heartbeat_paused.load(Ordering::SeqCst) {
            shared.heartbeat_once().await;
        }
    }
}

/// JSON error body used by the admin API.
pub(crate) fn error_body(code: &str, message: impl std::fmt::Display) -> Value {
    json!({ "code": code, "message": message.to_string() })
}
