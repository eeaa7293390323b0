//! Client side of the mesh: launching agents, attach sessions, admin calls,
//! and discovery helpers. The `mesh` CLI and the console gateway are thin
//! layers over these.

pub mod cli;
pub mod gateway;

use std::str::FromStr;
use std::time::Duration;

use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use crate::agents::file_access::CONTROL_CHUNK;
use crate::agents::sandbox::EntryInfo;
use crate::agents::tables::{QueryResult, TableInfo};
use crate::agents::{BehaviorError, BehaviorRegistry};
use crate::lookup::{self, Filter, RegistryClient, ServiceRecord, ServiceType};
use crate::migration::{PrepareRequest, TxnRef, STARTER};
use crate::security::{answer_challenge, Certificate, KeyPair};
use crate::station::{RunState, StationEvent, StationStatus};
use crate::wire::{
    b64, b64_decode, b64_encode, marshal_snapshot, recv_message, round_trip, send_message, AgentId, AgentSnapshot, BundleRef,
    FrameError, Message, RpcError, ServiceKind, TravelEntry, TxnId,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(15);

#[derive(Debug, Error)]
pub enum MeshError {
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("PREPARE_REJECTED({code}): {message}")]
    Rejected { code: String, message: String },
    #[error("unexpected reply: {0}")]
    Protocol(String),
    #[error("invalid launch: {0}")]
    Invalid(BehaviorError),
    #[error("http: {0}")]
    Http(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl MeshError {
    pub fn code(&self) -> &str {
        match self {
            MeshError::Remote { code, .. } => code,
            MeshError::Rejected { .. } => "PREPARE_REJECTED",
            MeshError::Rpc(_) => "UNREACHABLE",
            MeshError::Protocol(_) => "PROTOCOL",
            MeshError::Invalid(e) => &e.code,
            MeshError::Http(_) => "HTTP",
            MeshError::Io(_) => "IO_ERROR",
        }
    }

    fn remote(code: &str, message: impl std::fmt::Display) -> Self {
        MeshError::Remote { code: code.into(), message: message.to_string() }
    }
}

impl From<FrameError> for MeshError {
    fn from(e: FrameError) -> Self {
        MeshError::Rpc(RpcError::Frame(e))
    }
}

impl From<lookup::client::ClientError> for MeshError {
    fn from(e: lookup::client::ClientError) -> Self {
        match e {
            lookup::client::ClientError::Rpc(r) => MeshError::Rpc(r),
            lookup::client::ClientError::Remote { code, message } => MeshError::Remote { code, message },
            lookup::client::ClientError::Protocol(p) => MeshError::Protocol(p),
        }
    }
}

impl From<reqwest::Error> for MeshError {
    fn from(e: reqwest::Error) -> Self {
        MeshError::Http(e.to_string())
    }
}

/// Fails with the remote error, if the reply is one.
fn check(reply: Message) -> Result<Message, MeshError> {
    match reply.as_error() {
        Some((code, message)) => Err(MeshError::Remote { code, message }),
        None => Ok(reply),
    }
}

fn expect(reply: Message, kind: &str) -> Result<Message, MeshError> {
    let reply = check(reply)?;
    if reply.kind != kind {
        return Err(MeshError::Protocol(format!("expected {kind}, got {}", reply.kind)));
    }
    Ok(reply)
}

fn decode<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, MeshError> {
    serde_json::from_value(v).map_err(|e| MeshError::Protocol(e.to_string()))
}

// ---------------------------------------------------------------------------
// Launch
// ---------------------------------------------------------------------------

/// Everything needed to start a new agent at a station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaunchSpec {
    pub behavior_id: String,
    #[serde(default)]
    pub params: Value,
    pub dest: String,
    #[serde(default = "default_kind")]
    pub service_kind: ServiceKind,
    #[serde(default)]
    pub open_access: bool,
    #[serde(default)]
    pub itinerary: Vec<String>,
    pub bundle_ref: BundleRef,
    pub owner: Certificate,
}

fn default_kind() -> ServiceKind {
    ServiceKind::Service
}

impl LaunchSpec {
    /// Validates params locally and builds the snapshot to send.
    pub fn snapshot(&self, behaviors: &BehaviorRegistry) -> Result<AgentSnapshot, MeshError> {
        let state_blob = behaviors.initial_state(&self.behavior_id, &self.params).map_err(MeshError::Invalid)?;
        Ok(AgentSnapshot {
            agent_id: AgentId::random(),
            behavior_id: self.behavior_id.clone(),
            bundle_ref: self.bundle_ref.clone(),
            owner_cert: self.owner.clone(),
            service_kind: self.service_kind,
            open_access: self.open_access,
            state_blob,
            itinerary: self.itinerary.clone(),
            hop_index: 0,
            travel_log: Vec::new(),
        })
    }
}

/// Launches an agent with the same PREPARE/COMMIT exchange a move uses,
/// acting as a source that has no prior instance.
pub async fn launch(spec: &LaunchSpec, behaviors: &BehaviorRegistry) -> Result<AgentId, MeshError> {
    let snapshot = spec.snapshot(behaviors)?;
    let agent_id = snapshot.agent_id;
    let txn_id = TxnId::random();
    let req = PrepareRequest {
        txn_id,
        agent_id,
        source: STARTER.into(),
        dest: spec.dest.clone(),
        snapshot: marshal_snapshot(&snapshot),
        finish_on_arrival: false,
    };
    let prepare = Message::new("PREPARE", json!(req)).with_txn(txn_id.to_hex());
    let reply = check(round_trip(&spec.dest, &prepare, DEFAULT_TIMEOUT).await?)?;
    match reply.kind.as_str() {
        "PREPARED" => {}
        "REJECTED" => {
            let field = |k: &str| reply.payload.get(k).and_then(Value::as_str).unwrap_or("").to_string();
            return Err(MeshError::Rejected { code: field("code"), message: field("message") });
        }
        other => return Err(MeshError::Protocol(format!("PREPARE answered with {other}"))),
    }
    let commit = Message::new("COMMIT", json!(TxnRef { txn_id })).with_txn(txn_id.to_hex());
    expect(round_trip(&spec.dest, &commit, DEFAULT_TIMEOUT).await?, "COMMITTED")?;
    Ok(agent_id)
}

// ---------------------------------------------------------------------------
// Station wire calls
// ---------------------------------------------------------------------------

pub async fn ping(endpoint: &str) -> Result<String, MeshError> {
    let reply = expect(round_trip(endpoint, &Message::bare("PING"), DEFAULT_TIMEOUT).await?, "PONG")?;
    Ok(reply.payload.get("station_id").and_then(Value::as_str).unwrap_or("").to_string())
}

pub async fn station_status(endpoint: &str) -> Result<StationStatus, MeshError> {
    let reply = expect(round_trip(endpoint, &Message::bare("STATUS"), DEFAULT_TIMEOUT).await?, "STATION_STATUS")?;
    decode(reply.payload)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Transport {
    Control,
    Stream,
}

impl Transport {
    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Control => "CONTROL",
            Transport::Stream => "STREAM",
        }
    }
}

impl FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "CONTROL" => Ok(Transport::Control),
            "STREAM" => Ok(Transport::Stream),
            _ => Err(format!("unknown transport {s:?} (control|stream)")),
        }
    }
}

/// How an agent ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub outcome: RunState,
    #[serde(with = "b64")]
    pub result: Vec<u8>,
}

impl AgentOutcome {
    pub fn result_json(&self) -> Option<Value> {
        serde_json::from_slice(&self.result).ok()
    }
}

pub enum Attached {
    Session(AttachSession),
    Finished(AgentOutcome),
}

#[derive(Deserialize)]
struct StreamReady {
    port: u16,
    token: String,
    size: u64,
}

/// An open control channel to one agent.
pub struct AttachSession {
    conn: TcpStream,
    endpoint: String,
    pub agent_id: AgentId,
    /// The ATTACHED payload: behavior id, run state, station id.
    pub info: Value,
}

/// Opens a control channel, answering the owner challenge with `key` if
/// the agent is protected.
pub async fn attach(endpoint: &str, agent_id: AgentId, key: Option<&KeyPair>) -> Result<Attached, MeshError> {
    let mut conn = tokio::time::timeout(DEFAULT_TIMEOUT, TcpStream::connect(endpoint))
        .await
        .map_err(|_| RpcError::Timeout(endpoint.to_string()))?
        .map_err(|source| RpcError::Connect { endpoint: endpoint.to_string(), source })?;
    conn.set_nodelay(true).ok();
    send_message(&mut conn, &Message::new("ATTACH", json!({ "agent_id": agent_id }))).await?;
    let mut reply = next(&mut conn, endpoint).await?;
    if reply.kind == "CHALLENGE" {
        let Some(key) = key else {
            return Err(MeshError::remote("ACCESS_DENIED", "agent is protected and no owner key was given"));
        };
        let nonce = reply.payload.get("nonce").and_then(Value::as_str).unwrap_or("");
        let nonce = b64_decode(nonce).map_err(|e| MeshError::Protocol(e.to_string()))?;
        let sig = answer_challenge(&nonce, key);
        let proof = json!({ "nonce": b64_encode(&nonce), "signature": b64_encode(&sig) });
        send_message(&mut conn, &Message::new("PROOF", proof)).await?;
        reply = next(&mut conn, endpoint).await?;
    }
    let reply = check(reply)?;
    match reply.kind.as_str() {
        "ATTACHED" => Ok(Attached::Session(AttachSession { conn, endpoint: endpoint.to_string(), agent_id, info: reply.payload })),
        "FINISHED" => Ok(Attached::Finished(decode(reply.payload)?)),
        other => Err(MeshError::Protocol(format!("ATTACH answered with {other}"))),
    }
}

/// Sends a handcrafted proof; for exercising the handshake.
pub async fn attach_with_proof(
    endpoint: &str,
    agent_id: AgentId,
    proof: impl FnOnce(&[u8]) -> (Vec<u8>, Vec<u8>),
) -> Result<Attached, MeshError> {
    let mut conn = TcpStream::connect(endpoint).await.map_err(|source| RpcError::Connect { endpoint: endpoint.to_string(), source })?;
    send_message(&mut conn, &Message::new("ATTACH", json!({ "agent_id": agent_id }))).await?;
    let reply = expect(next(&mut conn, endpoint).await?, "CHALLENGE")?;
    let nonce = b64_decode(reply.payload.get("nonce").and_then(Value::as_str).unwrap_or(""))
        .map_err(|e| MeshError::Protocol(e.to_string()))?;
    let (nonce, sig) = proof(&nonce);
    let msg = Message::new("PROOF", json!({ "nonce": b64_encode(&nonce), "signature": b64_encode(&sig) }));
    send_message(&mut conn, &msg).await?;
    let reply = check(next(&mut conn, endpoint).await?)?;
    match reply.kind.as_str() {
        "ATTACHED" => Ok(Attached::Session(AttachSession { conn, endpoint: endpoint.to_string(), agent_id, info: reply.payload })),
        "FINISHED" => Ok(Attached::Finished(decode(reply.payload)?)),
        other => Err(MeshError::Protocol(format!("ATTACH answered with {other}"))),
    }
}

async fn next(conn: &mut TcpStream, endpoint: &str) -> Result<Message, MeshError> {
    tokio::time::timeout(DEFAULT_TIMEOUT, recv_message(conn))
        .await
        .map_err(|_| RpcError::Timeout(endpoint.to_string()))??
        .ok_or_else(|| MeshError::Rpc(RpcError::Closed(endpoint.to_string())))
}

impl AttachSession {
    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    async fn request(&mut self, kind: &str, payload: Value) -> Result<Message, MeshError> {
        send_message(&mut self.conn, &Message::new(kind, payload)).await?;
        check(next(&mut self.conn, &self.endpoint).await?)
    }

    /// Sends a behavior command and returns the raw reply message (REPLY,
    /// STREAM_READY or FINISHED).
    pub async fn raw_command(&mut self, cmd: Value) -> Result<Message, MeshError> {
        self.request("COMMAND", cmd).await
    }

    pub async fn command(&mut self, cmd: Value) -> Result<Value, MeshError> {
        Ok(expect(self.raw_command(cmd).await?, "REPLY")?.payload)
    }

    pub async fn state(&mut self) -> Result<Value, MeshError> {
        Ok(expect(self.request("STATE", Value::Null).await?, "STATE")?.payload)
    }

    pub async fn list(&mut self, path: &str) -> Result<Vec<EntryInfo>, MeshError> {
        let v = self.command(json!({ "cmd": "LIST", "path": path })).await?;
        decode(v.get("entries").cloned().unwrap_or(Value::Null))
    }

    pub async fn stat(&mut self, path: &str) -> Result<EntryInfo, MeshError> {
        decode(self.command(json!({ "cmd": "STAT", "path": path })).await?)
    }

    pub async fn list_catalog(&mut self) -> Result<Vec<TableInfo>, MeshError> {
        let v = self.command(json!({ "cmd": "LIST_CATALOG" })).await?;
        decode(v.get("tables").cloned().unwrap_or(Value::Null))
    }

    /// `predicate` is either clause JSON or text such as `age > 30 AND city = 'Oslo'`.
    pub async fn query(&mut self, table: &str, columns: &[&str], predicate: Value) -> Result<QueryResult, MeshError> {
        decode(self.command(json!({ "cmd": "QUERY", "table": table, "columns": columns, "predicate": predicate })).await?)
    }

    async fn stream_conn(&self, ready: &StreamReady) -> Result<TcpStream, MeshError> {
        let host = self.endpoint.rsplit_once(':').map(|(h, _)| h).unwrap_or("127.0.0.1");
        let addr = format!("{host}:{}", ready.port);
        let token = hex::decode(&ready.token).map_err(|e| MeshError::Protocol(e.to_string()))?;
        let mut conn = TcpStream::connect(&addr).await.map_err(|source| RpcError::Connect { endpoint: addr, source })?;
        conn.set_nodelay(true).ok();
        conn.write_all(&token).await?;
        Ok(conn)
    }

    pub async fn read_file(&mut self, path: &str, transport: Transport) -> Result<Vec<u8>, MeshError> {
        match transport {
            Transport::Control => {
                let mut out = Vec::new();
                loop {
                    let v = self
                        .command(json!({ "cmd": "READ", "path": path, "transport": "CONTROL", "offset": out.len(), "length": CONTROL_CHUNK }))
                        .await?;
                    let chunk = b64_decode(v.get("data").and_then(Value::as_str).unwrap_or(""))
                        .map_err(|e| MeshError::Protocol(e.to_string()))?;
                    out.extend_from_slice(&chunk);
                    if v.get("eof").and_then(Value::as_bool).unwrap_or(true) || chunk.is_empty() {
                        return Ok(out);
                    }
                }
            }
            Transport::Stream => {
                let reply = expect(self.raw_command(json!({ "cmd": "READ", "path": path, "transport": "STREAM" })).await?, "STREAM_READY")?;
                let ready: StreamReady = decode(reply.payload)?;
                let mut conn = self.stream_conn(&ready).await?;
                let mut out = Vec::with_capacity(ready.size as usize);
                conn.read_to_end(&mut out).await?;
                if out.len() as u64 != ready.size {
                    return Err(MeshError::remote("IO_ERROR", format!("stream ended after {} of {} bytes", out.len(), ready.size)));
                }
                Ok(out)
            }
        }
    }

    pub async fn write_file(&mut self, path: &str, data: &[u8], transport: Transport) -> Result<(), MeshError> {
        match transport {
            Transport::Control => {
                let mut offset = 0;
                loop {
                    let end = (offset + CONTROL_CHUNK).min(data.len());
                    let cmd = json!({
                        "cmd": "WRITE", "path": path, "transport": "CONTROL",
                        "offset": offset, "data": b64_encode(&data[offset..end]),
                    });
                    self.command(cmd).await?;
                    offset = end;
                    if offset == data.len() {
                        return Ok(());
                    }
                }
            }
            Transport::Stream => {
                let cmd = json!({ "cmd": "WRITE", "path": path, "transport": "STREAM", "length": data.len() });
                let ready: StreamReady = decode(expect(self.raw_command(cmd).await?, "STREAM_READY")?.payload)?;
                let mut conn = self.stream_conn(&ready).await?;
                conn.write_all(data).await?;
                conn.shutdown().await?;
                // The station closes its side once the file is in place.
                let mut rest = Vec::new();
                conn.read_to_end(&mut rest).await?;
                let size = self.stat(path).await?.size;
                if size != data.len() as u64 {
                    return Err(MeshError::remote("IO_ERROR", format!("stored {size} of {} bytes", data.len())));
                }
                Ok(())
            }
        }
    }

    /// Ends the agent here and returns its result.
    pub async fn finish(mut self) -> Result<AgentOutcome, MeshError> {
        decode(expect(self.request("FINISH", Value::Null).await?, "FINISHED")?.payload)
    }

    /// Asks the agent to move; the outcome shows up in station events.
    pub async fn move_to(&mut self, dest: &str) -> Result<(), MeshError> {
        expect(self.request("MOVE", json!({ "dest": dest })).await?, "MOVING").map(|_| ())
    }

    /// Sends the agent home to finish. If it is already home the outcome
    /// comes back directly.
    pub async fn recall(mut self, origin: &str) -> Result<Option<AgentOutcome>, MeshError> {
        let reply = self.request("RECALL", json!({ "origin": origin })).await?;
        match reply.kind.as_str() {
            "FINISHED" => Ok(Some(decode(reply.payload)?)),
            "MOVING" => Ok(None),
            other => Err(MeshError::Protocol(format!("RECALL answered with {other}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Admin HTTP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdminClient {
    base: String,
    http: reqwest::Client,
}

impl AdminClient {
    /// `base` is like `http://127.0.0.1:7701`.
    pub fn new(base: impl Into<String>) -> Self {
        AdminClient { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn ok(resp: reqwest::Response) -> Result<reqwest::Response, MeshError> {
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let body: Value = resp.json().await.unwrap_or(Value::Null);
        let field = |k: &str| body.get(k).and_then(Value::as_str).map(str::to_string);
        Err(MeshError::Remote {
            code: field("code").unwrap_or_else(|| format!("HTTP_{}", status.as_u16())),
            message: field("message").unwrap_or_else(|| status.to_string()),
        })
    }

    pub async fn status(&self) -> Result<StationStatus, MeshError> {
        Ok(Self::ok(self.http.get(format!("{}/status", self.base)).send().await?).await?.json().await?)
    }

    pub async fn travel_log(&self, agent: &AgentId) -> Result<Vec<TravelEntry>, MeshError> {
        let resp = Self::ok(self.http.get(format!("{}/agents/{agent}/log", self.base)).send().await?).await?;
        let v: Value = resp.json().await?;
        decode(v.get("travel_log").cloned().unwrap_or(Value::Null))
    }

    pub async fn move_agent(&self, agent: &AgentId, dest: &str) -> Result<(), MeshError> {
        let url = format!("{}/agents/{agent}/move", self.base);
        Self::ok(self.http.post(url).json(&json!({ "dest": dest })).send().await?).await.map(|_| ())
    }

    /// Returns whether the certificate was newly added.
    pub async fn trust(&self, cert: &Certificate, token: Option<&str>) -> Result<bool, MeshError> {
        let mut req = self.http.post(format!("{}/trust", self.base)).json(cert);
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        let v: Value = Self::ok(req.send().await?).await?.json().await?;
        Ok(v.get("added").and_then(Value::as_bool).unwrap_or(false))
    }

    /// Station events after `since` (all history if `None`); with `follow`
    /// the stream stays open for new ones.
    pub async fn events(
        &self,
        follow: bool,
        since: Option<u64>,
    ) -> Result<impl Stream<Item = Result<StationEvent, MeshError>> + use<>, MeshError> {
        let url = format!("{}/events?follow={follow}&since={}", self.base, since.unwrap_or(0));
        let resp = Self::ok(self.http.get(url).send().await?).await?;
        Ok(ndjson(resp.bytes_stream()).map(|line| line.and_then(decode)))
    }
}

/// Splits a byte stream into JSON values, one per non-empty line.
pub fn ndjson<S, B, E>(bytes: S) -> impl Stream<Item = Result<Value, MeshError>>
where
    S: Stream<Item = Result<B, E>> + Unpin,
    B: AsRef<[u8]>,
    E: std::fmt::Display,
{
    futures::stream::unfold((bytes, Vec::<u8>::new(), false), |(mut bytes, mut buf, done)| async move {
        loop {
            if let Some(pos) = buf.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = buf.drain(..=pos).collect();
                let line = &line[..line.len() - 1];
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                let item = serde_json::from_slice(line).map_err(|e| MeshError::Protocol(e.to_string()));
                return Some((item, (bytes, buf, done)));
            }
            if done {
                return None;
            }
            match bytes.next().await {
                Some(Ok(chunk)) => buf.extend_from_slice(chunk.as_ref()),
                Some(Err(e)) => return Some((Err(MeshError::Http(e.to_string())), (bytes, buf, true))),
                None => {
                    buf.push(b'\n');
                    return match buf.iter().all(u8::is_ascii_whitespace) {
                        true => None,
                        false => {
                            let item = serde_json::from_slice(buf.trim_ascii()).map_err(|e| MeshError::Protocol(e.to_string()));
                            Some((item, (bytes, Vec::new(), true)))
                        }
                    };
                }
            }
        }
    })
}

// ---------------------------------------------------------------------------
// Discovery
// ---------------------------------------------------------------------------

pub async fn discover(registry: &str, filter: &Filter) -> Result<Vec<ServiceRecord>, MeshError> {
    let mut records = RegistryClient::new(registry).lookup(filter).await?;
    records.sort_by(|a, b| (a.kind as u8, &a.service_id).cmp(&(b.kind as u8, &b.service_id)));
    Ok(records)
}

/// Where an agent currently is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub station_id: String,
    pub endpoint: String,
    pub admin: String,
    pub run_state: Option<RunState>,
}

/// Finds an agent through its registry record, or failing that by asking
/// every registered station (private agents are never registered).
pub async fn locate(registry: &str, agent: &AgentId) -> Result<Location, MeshError> {
    let reg = RegistryClient::new(registry);
    let stations = reg.lookup(&Filter::kind(ServiceType::Station)).await?;
    let admin_of = |id: &str| {
        stations.iter().find(|s| s.service_id == id).and_then(|s| s.attr("admin")).unwrap_or_default().to_string()
    };
    if let Some(rec) = reg.lookup(&Filter::id(agent.to_hex())).await?.into_iter().find(|r| r.kind == ServiceType::Agent) {
        let station_id = rec.attr("station").unwrap_or_default().to_string();
        return Ok(Location { admin: admin_of(&station_id), station_id, endpoint: rec.endpoint, run_state: None });
    }
    let mut terminal = None;
    for s in &stations {
        let Ok(status) = station_status(&s.endpoint).await else { continue };
        if let Some(a) = status.agent(agent) {
            let loc = Location {
                station_id: status.station_id.clone(),
                endpoint: s.endpoint.clone(),
                admin: admin_of(&s.service_id),
                run_state: Some(a.run_state),
            };
            if !a.run_state.is_terminal() {
                return Ok(loc);
            }
            terminal = Some(loc);
        }
    }
    terminal.ok_or_else(|| MeshError::remote("NOT_FOUND", format!("agent {agent} is not known to any registered station")))
}

pub async fn travel_log(registry: &str, agent: &AgentId) -> Result<Vec<TravelEntry>, MeshError> {
    let loc = locate(registry, agent).await?;
    AdminClient::new(loc.admin).travel_log(agent).await
}

/// Sends an agent back to `origin` and waits for it to finish there.
pub async fn recall(registry: &str, agent: &AgentId, origin: &str, key: Option<&KeyPair>) -> Result<AgentOutcome, MeshError> {
    let loc = locate(registry, agent).await?;
    let session = match attach(&loc.endpoint, *agent, key).await? {
        Attached::Finished(o) => return Ok(o),
        Attached::Session(s) => s,
    };
    if let Some(o) = session.recall(origin).await? {
        return Ok(o);
    }
    wait_finished(origin, *agent, key, DEFAULT_TIMEOUT).await
}

/// Polls a station until the agent there is finished or failed.
pub async fn wait_finished(endpoint: &str, agent: AgentId, key: Option<&KeyPair>, timeout: Duration) -> Result<AgentOutcome, MeshError> {
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        match attach(endpoint, agent, key).await {
            Ok(Attached::Finished(o)) => return Ok(o),
            Ok(Attached::Session(_)) => {}
            Err(e) if e.code() == "NOT_RESIDENT" => {}
            Err(e) => return Err(e),
        }
        if tokio::time::Instant::now() >= deadline {
            return Err(MeshError::remote("TIMEOUT", format!("agent {agent} did not finish at {endpoint}")));
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}
