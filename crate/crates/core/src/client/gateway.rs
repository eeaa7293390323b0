//! HTTP/JSON gateway for the web console.
//!
//! The gateway holds the owner's key and performs attach handshakes on the
//! console's behalf. Everything else is a pass-through to the registry and
//! the stations' admin APIs.
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/api/registry[?kind=&id=]` | registry records |
//! | GET | `/api/stations/{id}/status` | station status |
//! | GET | `/api/agents/{id}/log` | travel log |
//! | GET | `/api/agents/{id}/location` | current station |
//! | POST | `/api/agents` | launch, 201 |
//! | POST | `/api/agents/{id}/move` | `{dest}`, 202 |
//! | POST | `/api/agents/{id}/recall` | `{origin}` |
//! | POST | `/api/agents/{id}/attach-session` | 201 `{session_id}` |
//! | POST | `/api/sessions/{sid}/command` | behavior command |
//! | GET/PUT | `/api/sessions/{sid}/files?path=&transport=` | file bytes |
//! | DELETE | `/api/sessions/{sid}[?finish=true]` | close |
//! | GET | `/api/events` | merged event stream, NDJSON |

// Handlers return ready-made error responses.
#![allow(clippy::result_large_err)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex as StdMutex};
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::StreamExt;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, Mutex};
use tokio::task::JoinHandle;

use super::{attach, locate, AdminClient, Attached, AttachSession, LaunchSpec, MeshError, Transport};
use crate::agents::BehaviorRegistry;
use crate::lookup::{EventKind, Filter, RegistryClient, ServiceType};
use crate::security::{Certificate, KeyPair};
use crate::wire::{AgentId, BundleRef, ServiceKind};

pub const KEEPALIVE: Duration = Duration::from_secs(15);

pub struct GatewayConfig {
    pub listen: String,
    pub registry: String,
    pub owner_key: KeyPair,
    pub owner_cert: Certificate,
    /// Bundle to use per behavior id when a launch request names none.
    pub bundles: BTreeMap<String, BundleRef>,
}

struct Gw {
    registry: RegistryClient,
    registry_endpoint: String,
    key: KeyPair,
    cert: Certificate,
    bundles: BTreeMap<String, BundleRef>,
    behaviors: BehaviorRegistry,
    sessions: StdMutex<HashMap<String, Arc<Mutex<AttachSession>>>>,
}

pub struct Gateway {
    addr: SocketAddr,
    task: JoinHandle<()>,
}

impl Gateway {
    pub async fn start(cfg: GatewayConfig) -> std::io::Result<Gateway> {
        let listener = TcpListener::bind(&cfg.listen).await?;
        let addr = listener.local_addr()?;
        let gw = Arc::new(Gw {
            registry: RegistryClient::new(&cfg.registry),
            registry_endpoint: cfg.registry,
            key: cfg.owner_key,
            cert: cfg.owner_cert,
            bundles: cfg.bundles,
            behaviors: BehaviorRegistry::builtin(),
            sessions: StdMutex::new(HashMap::new()),
        });
        let task = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, router(gw)).await {
                tracing::warn!("gateway stopped: {e}");
            }
        });
        Ok(Gateway { addr, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(&self) {
        self.task.abort();
    }

    pub async fn wait(mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.task.abort();
    }
}

fn router(gw: Arc<Gw>) -> Router {
    Router::new()
        .route("/api/registry", get(registry))
        .route("/api/stations/{id}/status", get(station_status))
        .route("/api/agents", post(launch))
        .route("/api/agents/{id}/log", get(agent_log))
        .route("/api/agents/{id}/location", get(agent_location))
        .route("/api/agents/{id}/move", post(agent_move))
        .route("/api/agents/{id}/recall", post(agent_recall))
        .route("/api/agents/{id}/attach-session", post(open_session))
        .route("/api/sessions/{sid}", axum::routing::delete(close_session))
        .route("/api/sessions/{sid}/command", post(session_command))
        .route("/api/sessions/{sid}/files", get(file_get).put(file_put))
        .route("/api/events", get(events))
        .with_state(gw)
}

type S = State<Arc<Gw>>;

fn error(status: StatusCode, code: &str, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "code": code, "message": message.to_string() }))).into_response()
}

/// Maps upstream failures onto HTTP statuses.
fn upstream(e: MeshError) -> Response {
    let status = match e.code() {
        "NOT_FOUND" | "NOT_RESIDENT" | "UNKNOWN_SESSION" => StatusCode::NOT_FOUND,
        "ACCESS_DENIED" | "NONCE_UNKNOWN" | "FORBIDDEN" | "SANDBOX_VIOLATION" => StatusCode::FORBIDDEN,
        "BUSY" | "NOT_RUNNING" | "SAME_STATION" | "FINISHED" => StatusCode::CONFLICT,
        "PREPARE_REJECTED" => StatusCode::UNPROCESSABLE_ENTITY,
        "UNREACHABLE" | "HTTP" | "PROTOCOL" => StatusCode::BAD_GATEWAY,
        "TIMEOUT" => StatusCode::GATEWAY_TIMEOUT,
        "IO_ERROR" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    };
    let mut body = json!({ "code": e.code(), "message": e.to_string() });
    if let MeshError::Rejected { code, .. } = &e {
        body["reason"] = json!(code);
    }
    (status, Json(body)).into_response()
}

fn parse_agent(id: &str) -> Result<AgentId, Response> {
    id.parse().map_err(|_| error(StatusCode::BAD_REQUEST, "BAD_AGENT_ID", format!("{id:?} is not an agent id")))
}

#[derive(Deserialize)]
struct RegistryQuery {
    kind: Option<String>,
    id: Option<String>,
}

async fn registry(State(gw): S, Query(q): Query<RegistryQuery>) -> Response {
    let mut filter = Filter::any();
    match q.kind.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None | Some("") => {}
        Some("station") => filter.kind = Some(ServiceType::Station),
        Some("agent") => filter.kind = Some(ServiceType::Agent),
        Some(other) => return error(StatusCode::BAD_REQUEST, "BAD_FILTER", format!("unknown kind {other:?}")),
    }
    filter.service_id = q.id;
    match gw.registry.lookup(&filter).await {
        Ok(records) => Json(records).into_response(),
        Err(e) => upstream(e.into()),
    }
}

impl Gw {
    async fn station_admin(&self, station_id: &str) -> Result<AdminClient, MeshError> {
        let rec = self
            .registry
            .lookup(&Filter::kind(ServiceType::Station))
            .await?
            .into_iter()
            .find(|r| r.service_id == station_id || r.endpoint == station_id)
            .ok_or_else(|| MeshError::remote("NOT_FOUND", format!("no station {station_id:?} in the registry")))?;
        Ok(AdminClient::new(rec.attr("admin").unwrap_or_default()))
    }

    /// A destination may be given as a station id or an endpoint.
    async fn resolve_dest(&self, dest: &str) -> Result<String, MeshError> {
        let stations = self.registry.lookup(&Filter::kind(ServiceType::Station)).await?;
        Ok(stations.into_iter().find(|r| r.service_id == dest).map(|r| r.endpoint).unwrap_or_else(|| dest.to_string()))
    }

    fn session(&self, sid: &str) -> Result<Arc<Mutex<AttachSession>>, Response> {
        self.sessions
            .lock()
            .unwrap()
            .get(sid)
            .cloned()
            .ok_or_else(|| error(StatusCode::NOT_FOUND, "UNKNOWN_SESSION", format!("no session {sid}")))
    }
}

async fn station_status(State(gw): S, Path(id): Path<String>) -> Response {
    let admin = match gw.station_admin(&id).await {
        Ok(a) => a,
        Err(e) => return upstream(e),
    };
    match admin.status().await {
        Ok(s) => Json(s).into_response(),
        Err(e) => upstream(e),
    }
}

async fn agent_log(State(gw): S, Path(id): Path<String>) -> Response {
    let agent = match parse_agent(&id) {
        Ok(a) => a,
        Err(r) => return r,
    };
    match super::travel_log(&gw.registry_endpoint, &agent).await {
        Ok(log) => Json(json!({ "agent_id": agent, "travel_log": log })).into_response(),
        Err(e) => upstream(e),
    }
}

async fn agent_location(State(gw): S, Path(id): Path<String>) -> Response {
    let agent = match parse_agent(&id) {
        Ok(a) => a,
        Err(r) => return r,
    };
    match locate(&gw.registry_endpoint, &agent).await {
        Ok(loc) => Json(loc).into_response(),
        Err(e) => upstream(e),
    }
}

#[derive(Deserialize)]
struct LaunchBody {
    behavior_id: String,
    #[serde(default)]
    params: Value,
    dest: String,
    #[serde(default)]
    service_kind: Option<ServiceKind>,
    #[serde(default)]
    open_access: bool,
    #[serde(default)]
    itinerary: Vec<String>,
    #[serde(default)]
    bundle_ref: Option<BundleRef>,
}

async fn launch(State(gw): S, Json(body): Json<LaunchBody>) -> Response {
    let Some(bundle_ref) = body.bundle_ref.or_else(|| gw.bundles.get(&body.behavior_id).cloned()) else {
        return error(StatusCode::BAD_REQUEST, "NO_BUNDLE", format!("no bundle known for {}", body.behavior_id));
    };
    let dest = match gw.resolve_dest(&body.dest).await {
        Ok(d) => d,
        Err(e) => return upstream(e),
    };
    let mut itinerary = Vec::with_capacity(body.itinerary.len());
    for stop in &body.itinerary {
        match gw.resolve_dest(stop).await {
            Ok(d) => itinerary.push(d),
            Err(e) => return upstream(e),
        }
    }
    let spec = LaunchSpec {
        behavior_id: body.behavior_id,
        params: body.params,
        dest: dest.clone(),
        service_kind: body.service_kind.unwrap_or(ServiceKind::Service),
        open_access: body.open_access,
        itinerary,
        bundle_ref,
        owner: gw.cert.clone(),
    };
    match super::launch(&spec, &gw.behaviors).await {
        Ok(agent) => (StatusCode::CREATED, Json(json!({ "agent_id": agent, "dest": dest }))).into_response(),
        Err(e) => upstream(e),
    }
}

#[derive(Deserialize)]
struct MoveBody {
    dest: String,
}

async fn agent_move(State(gw): S, Path(id): Path<String>, Json(body): Json<MoveBody>) -> Response {
    let agent = match parse_agent(&id) {
        Ok(a) => a,
        Err(r) => return r,
    };
    let result = async {
        let dest = gw.resolve_dest(&body.dest).await?;
        let loc = locate(&gw.registry_endpoint, &agent).await?;
        AdminClient::new(loc.admin).move_agent(&agent, &dest).await?;
        Ok::<_, MeshError>(dest)
    }
    .await;
    match result {
        Ok(dest) => (StatusCode::ACCEPTED, Json(json!({ "agent_id": agent, "dest": dest }))).into_response(),
        Err(e) => upstream(e),
    }
}

#[derive(Deserialize)]
struct RecallBody {
    origin: String,
}

async fn agent_recall(State(gw): S, Path(id): Path<String>, Json(body): Json<RecallBody>) -> Response {
    let agent = match parse_agent(&id) {
        Ok(a) => a,
        Err(r) => return r,
    };
    let origin = match gw.resolve_dest(&body.origin).await {
        Ok(o) => o,
        Err(e) => return upstream(e),
    };
    match super::recall(&gw.registry_endpoint, &agent, &origin, Some(&gw.key)).await {
        Ok(o) => Json(json!({ "agent_id": agent, "outcome": o.outcome, "result": o.result_json() })).into_response(),
        Err(e) => upstream(e),
    }
}

async fn open_session(State(gw): S, Path(id): Path<String>) -> Response {
    let agent = match parse_agent(&id) {
        Ok(a) => a,
        Err(r) => return r,
    };
    let loc = match locate(&gw.registry_endpoint, &agent).await {
        Ok(l) => l,
        Err(e) => return upstream(e),
    };
    match attach(&loc.endpoint, agent, Some(&gw.key)).await {
        Ok(Attached::Session(s)) => {
            let sid = hex::encode(rand::random::<[u8; 16]>());
            let info = s.info.clone();
            gw.sessions.lock().unwrap().insert(sid.clone(), Arc::new(Mutex::new(s)));
            (StatusCode::CREATED, Json(json!({ "session_id": sid, "agent": info }))).into_response()
        }
        Ok(Attached::Finished(o)) => (
            StatusCode::CONFLICT,
            Json(json!({
                "code": "FINISHED",
                "message": "agent has ended",
                "outcome": o.outcome,
                "result": o.result_json(),
            })),
        )
            .into_response(),
        Err(e) => upstream(e),
    }
}

#[derive(Deserialize)]
struct CloseQuery {
    #[serde(default)]
    finish: bool,
}

async fn close_session(State(gw): S, Path(sid): Path<String>, Query(q): Query<CloseQuery>) -> Response {
    let Some(session) = gw.sessions.lock().unwrap().remove(&sid) else {
        return error(StatusCode::NOT_FOUND, "UNKNOWN_SESSION", format!("no session {sid}"));
    };
    if !q.finish {
        return StatusCode::NO_CONTENT.into_response();
    }
    let Ok(session) = Arc::try_unwrap(session).map(Mutex::into_inner) else {
        return error(StatusCode::CONFLICT, "BUSY", "session has a request in flight");
    };
    match session.finish().await {
        Ok(o) => Json(json!({ "outcome": o.outcome, "result": o.result_json() })).into_response(),
        Err(e) => upstream(e),
    }
}

async fn session_command(State(gw): S, Path(sid): Path<String>, Json(cmd): Json<Value>) -> Response {
    let session = match gw.session(&sid) {
        Ok(s) => s,
        Err(r) => return r,
    };
    if cmd.get("transport").and_then(Value::as_str).is_some_and(|t| t.eq_ignore_ascii_case("STREAM")) {
        return error(StatusCode::BAD_REQUEST, "BAD_COMMAND", "stream transfers go through the files endpoint");
    }
    let mut session = session.lock().await;
    match session.command(cmd).await {
        Ok(v) => Json(v).into_response(),
        Err(e) => {
            if matches!(e, MeshError::Rpc(_)) || e.code() == "FINISHED" {
                gw.sessions.lock().unwrap().remove(&sid);
            }
            upstream(e)
        }
    }
}

#[derive(Deserialize)]
struct FileQuery {
    path: String,
    #[serde(default)]
    transport: Option<String>,
}

fn transport_of(q: &FileQuery) -> Result<Transport, Response> {
    q.transport
        .as_deref()
        .unwrap_or("CONTROL")
        .parse()
        .map_err(|e: String| error(StatusCode::BAD_REQUEST, "BAD_TRANSPORT", e))
}

async fn file_get(State(gw): S, Path(sid): Path<String>, Query(q): Query<FileQuery>) -> Response {
    let (session, transport) = match (gw.session(&sid), transport_of(&q)) {
        (Ok(s), Ok(t)) => (s, t),
        (Err(r), _) | (_, Err(r)) => return r,
    };
    let result = session.lock().await.read_file(&q.path, transport).await;
    match result {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Err(e) => upstream(e),
    }
}

async fn file_put(State(gw): S, Path(sid): Path<String>, Query(q): Query<FileQuery>, body: Bytes) -> Response {
    let (session, transport) = match (gw.session(&sid), transport_of(&q)) {
        (Ok(s), Ok(t)) => (s, t),
        (Err(r), _) | (_, Err(r)) => return r,
    };
    let result = session.lock().await.write_file(&q.path, &body, transport).await;
    match result {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => upstream(e),
    }
}

// ---------------------------------------------------------------------------
// Merged event stream
// ---------------------------------------------------------------------------

fn line(v: Value) -> Bytes {
    let mut out = serde_json::to_vec(&v).expect("json value serializes");
    out.push(b'\n');
    Bytes::from(out)
}

type Followed = Arc<StdMutex<HashSet<String>>>;

/// Follows one station's live events until either side goes away.
fn follow_station(tx: mpsc::Sender<Bytes>, followed: Followed, station_id: String, admin: String) {
    if !followed.lock().unwrap().insert(station_id.clone()) {
        return;
    }
    tokio::spawn(async move {
        struct Unfollow(Followed, String);
        impl Drop for Unfollow {
            fn drop(&mut self) {
                self.0.lock().unwrap().remove(&self.1);
            }
        }
        let _unfollow = Unfollow(followed, station_id.clone());
        let Ok(events) = AdminClient::new(admin).events(true, Some(u64::MAX)).await else { return };
        let mut events = std::pin::pin!(events);
        let source = format!("station:{station_id}");
        loop {
            tokio::select! {
                _ = tx.closed() => return,
                ev = events.next() => match ev {
                    Some(Ok(ev)) => {
                        if tx.send(line(json!({ "source": source, "event": ev }))).await.is_err() {
                            return;
                        }
                    }
                    _ => return,
                },
            }
        }
    });
}

async fn events(State(gw): S) -> Response {
    let (tx, rx) = mpsc::channel::<Bytes>(1024);
    let registry = gw.registry.clone();
    let followed: Followed = Arc::default();

    // Subscribe before listing stations so none is missed in between.
    let sub = registry.subscribe(&Filter::any()).await;
    if let Ok(stations) = registry.lookup(&Filter::kind(ServiceType::Station)).await {
        for s in stations {
            follow_station(tx.clone(), followed.clone(), s.service_id.clone(), s.attr("admin").unwrap_or_default().to_string());
        }
    }
    match sub {
        Ok(mut sub) => {
            let tx = tx.clone();
            tokio::spawn(async move {
                loop {
                    let ev = tokio::select! {
                        _ = tx.closed() => return,
                        ev = sub.next() => ev,
                    };
                    let Some(Ok(ev)) = ev else {
                        let _ = tx.send(line(json!({ "source": "registry", "lost": true }))).await;
                        return;
                    };
                    if ev.record.kind == ServiceType::Station && ev.kind == EventKind::Registered {
                        let admin = ev.record.attr("admin").unwrap_or_default().to_string();
                        follow_station(tx.clone(), followed.clone(), ev.record.service_id.clone(), admin);
                    }
                    if tx.send(line(json!({ "source": "registry", "event": ev }))).await.is_err() {
                        return;
                    }
                }
            });
        }
        Err(e) => {
            let _ = tx.send(line(json!({ "source": "registry", "error": e.to_string() }))).await;
        }
    }
    {
        let tx = tx.clone();
        tokio::spawn(async move {
            loop {
                tokio::time::sleep(KEEPALIVE).await;
                if tx.send(Bytes::from_static(b"\n")).await.is_err() {
                    return;
                }
            }
        });
    }
    drop(tx);
    let body = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|b| (Ok::<_, std::io::Error>(b), rx)) });
    ([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(body)).into_response()
}
