//! The behavior interface and the built-in behaviors.
//!
//! A behavior is the executable part of an agent. Stations resolve it by
//! `behavior_id` from a [`BehaviorRegistry`], restore it from the snapshot's
//! state blob, and drive it cooperatively through [`Behavior::step`] and
//! [`Behavior::handle_command`]. Everything a behavior may touch on the host
//! arrives through the [`AgentContext`].

pub mod connectivity;
pub mod data_query;
pub mod file_access;
pub mod sandbox;
pub mod search;
pub mod tables;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde_json::Value;
use thiserror::Error;

use crate::wire::{AgentId, TravelEntry};
pub use sandbox::{FsError, Sandbox};
pub use tables::{TableCatalog, TableInfo};

pub use connectivity::ConnectivityTest;
pub use data_query::DataQuery;
pub use file_access::FileAccess;
pub use search::Search;

pub const CONNECTIVITY_TEST: &str = "connectivity-test/1";
pub const FILE_ACCESS: &str = "file-access/1";
pub const SEARCH: &str = "search/1";
pub const DATA_QUERY: &str = "data-query/1";

/// What a behavior wants after one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BehaviorAction {
    Continue,
    MoveTo(String),
    Finish(Vec<u8>),
}

/// Data moved over a dedicated raw TCP channel instead of command frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamPlan {
    /// Send the whole file at `path` (already sandbox-resolved).
    Read { path: PathBuf, size: u64 },
    /// Receive up to `length` bytes into `path`.
    Write { path: PathBuf, length: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandOutcome {
    Reply(Value),
    Stream(StreamPlan),
}

/// A behavior-level failure, reported to clients as `{code, message}`.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{code}: {message}")]
pub struct BehaviorError {
    pub code: String,
    pub message: String,
}

impl BehaviorError {
    pub fn new(code: &str, message: impl fmt::Display) -> Self {
        BehaviorError { code: code.to_string(), message: message.to_string() }
    }

    pub fn bad_state(e: impl fmt::Display) -> Self {
        Self::new("SCHEMA_MISMATCH", e)
    }

    pub fn bad_params(e: impl fmt::Display) -> Self {
        Self::new("INVALID_PARAMS", e)
    }

    pub fn unsupported(what: &str) -> Self {
        Self::new("UNSUPPORTED_COMMAND", format!("unsupported command {what}"))
    }
}

impl From<FsError> for BehaviorError {
    fn from(e: FsError) -> Self {
        BehaviorError::new(e.code(), &e)
    }
}

/// Host capabilities and agent metadata handed to a behavior for one call.
pub struct AgentContext {
    pub agent_id: AgentId,
    pub station_id: String,
    /// Wire endpoint of the hosting station.
    pub endpoint: String,
    pub fs: Arc<Sandbox>,
    pub tables: Arc<TableCatalog>,
    pub itinerary: Vec<String>,
    hop_index: usize,
    pub travel_log: Vec<TravelEntry>,
    clock: Arc<dyn Fn() -> u64 + Send + Sync>,
    outbox: Vec<Value>,
}

impl AgentContext {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        agent_id: AgentId,
        station_id: String,
        endpoint: String,
        fs: Arc<Sandbox>,
        tables: Arc<TableCatalog>,
        itinerary: Vec<String>,
        hop_index: usize,
        travel_log: Vec<TravelEntry>,
    ) -> Self {
        AgentContext {
            agent_id,
            station_id,
            endpoint,
            fs,
            tables,
            itinerary,
            hop_index,
            travel_log,
            clock: Arc::new(crate::clock::monotonic_ms),
            outbox: Vec::new(),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Fn() -> u64 + Send + Sync>) -> Self {
        self.clock = clock;
        self
    }

    pub fn now(&self) -> u64 {
        (self.clock)()
    }

    pub fn hop_index(&self) -> usize {
        self.hop_index
    }

    /// Moves the itinerary cursor; clamped to the itinerary length.
    pub fn set_hop_index(&mut self, index: usize) {
        self.hop_index = index.min(self.itinerary.len());
    }

    /// Arrival time at the current station.
    pub fn arrived_at(&self) -> u64 {
        self.travel_log.last().map(|e| e.arrival).unwrap_or(0)
    }

    /// Queues a notification for attached clients and station observers.
    pub fn emit(&mut self, event: Value) {
        self.outbox.push(event);
    }

    pub fn take_outbox(&mut self) -> Vec<Value> {
        std::mem::take(&mut self.outbox)
    }

    pub fn travel_log_json(&self) -> Value {
        serde_json::to_value(&self.travel_log).expect("travel log serializes")
    }
}

/// Agent logic. Calls on one instance are never concurrent.
pub trait Behavior: Send {
    /// Called once per activation at a station, before the first step.
    fn on_arrive(&mut self, _ctx: &mut AgentContext) -> Result<(), BehaviorError> {
        Ok(())
    }

    fn step(&mut self, ctx: &mut AgentContext) -> Result<BehaviorAction, BehaviorError>;

    fn handle_command(&mut self, _ctx: &mut AgentContext, command: &Value) -> Result<CommandOutcome, BehaviorError> {
        let name = command.get("cmd").and_then(Value::as_str).unwrap_or("?");
        Err(BehaviorError::unsupported(name))
    }

    /// A requested move did not commit; the agent is still here.
    fn on_move_aborted(&mut self, _ctx: &mut AgentContext, _reason: &str) {}

    /// Result reported when the owner recalls the agent.
    fn on_recall(&mut self, ctx: &mut AgentContext) -> Vec<u8> {
        crate::wire::canonical_json(&serde_json::json!({ "travel_log": ctx.travel_log_json() }))
    }

    /// Serialized state carried in the snapshot.
    fn save_state(&self) -> Vec<u8>;
}

/// Creates behaviors of one kind.
pub trait BehaviorFactory: Send + Sync {
    fn behavior_id(&self) -> &'static str;

    /// Validates launch parameters and turns them into the initial state blob.
    fn initial_state(&self, params: &Value) -> Result<Vec<u8>, BehaviorError>;

    fn restore(&self, state: &[u8]) -> Result<Box<dyn Behavior>, BehaviorError>;
}

/// Behaviors known to a station, keyed by `behavior_id`.
#[derive(Clone, Default)]
pub struct BehaviorRegistry {
    factories: BTreeMap<String, Arc<dyn BehaviorFactory>>,
}

impl fmt::Debug for BehaviorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl BehaviorRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The four built-in behaviors.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(connectivity::Factory));
        r.register(Arc::new(file_access::Factory));
        r.register(Arc::new(search::Factory));
        r.register(Arc::new(data_query::Factory));
        r
    }

    pub fn register(&mut self, factory: Arc<dyn BehaviorFactory>) {
        self.factories.insert(factory.behavior_id().to_string(), factory);
    }

    pub fn get(&self, behavior_id: &str) -> Option<&Arc<dyn BehaviorFactory>> {
        self.factories.get(behavior_id)
    }

    pub fn contains(&self, behavior_id: &str) -> bool {
        self.factories.contains_key(behavior_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn initial_state(&self, behavior_id: &str, params: &Value) -> Result<Vec<u8>, BehaviorError> {
        self.get(behavior_id)
            .ok_or_else(|| BehaviorError::new("UNKNOWN_BEHAVIOR", behavior_id))?
            .initial_state(params)
    }

    pub fn restore(&self, behavior_id: &str, state: &[u8]) -> Result<Box<dyn Behavior>, BehaviorError> {
        self.get(behavior_id)
            .ok_or_else(|| BehaviorError::new("UNKNOWN_BEHAVIOR", behavior_id))?
            .restore(state)
    }
}

pub(crate) fn decode_state<T: serde::de::DeserializeOwned>(state: &[u8]) -> Result<T, BehaviorError> {
    serde_json::from_slice(state).map_err(BehaviorError::bad_state)
}

pub(crate) fn encode_state<T: serde::Serialize>(state: &T) -> Vec<u8> {
    crate::wire::canonical_bytes(state).expect("behavior state serializes")
}

pub(crate) fn str_field<'a>(v: &'a Value, key: &str) -> Result<&'a str, BehaviorError> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| BehaviorError::new("BAD_COMMAND", format!("missing string field {key:?}")))
}
