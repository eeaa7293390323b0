//! The lookup service: leased registrations, filtered discovery, expiry
//! sweeping and change notifications.
//!
//! [`Registry`] is the in-memory state machine. All mutations run under one
//! lock, so they form a single total order and events are delivered to each
//! subscriber in exactly that order. Time is passed in explicitly; the TCP
//! [`server`] feeds it the wall clock.

pub mod client;
pub mod server;

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

pub use client::RegistryClient;
pub use server::{RegistryServer, RegistryServerConfig};

pub const DEFAULT_MIN_LEASE_MS: u64 = 1_000;
pub const DEFAULT_MAX_LEASE_MS: u64 = 600_000;
pub const DEFAULT_LEASE_MS: u64 = 30_000;
pub const DEFAULT_SWEEP_MS: u64 = 1_000;
pub const SUBSCRIBER_BUFFER: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServiceType {
    Station,
    Agent,
}

/// What a service registers; the registry adds the lease.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub service_id: String,
    pub kind: ServiceType,
    pub endpoint: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub granted_at: u64,
    pub duration_ms: u64,
    pub expiry: u64,
}

impl Lease {
    fn grant(now: u64, duration_ms: u64) -> Self {
        Lease { granted_at: now, duration_ms, expiry: now + duration_ms }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRecord {
    pub service_id: String,
    pub kind: ServiceType,
    pub endpoint: String,
    pub attributes: BTreeMap<String, String>,
    pub lease: Lease,
}

impl ServiceRecord {
    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Registered,
    Renewed,
    Unregistered,
    Expired,
    Updated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEvent {
    pub kind: EventKind,
    pub record: ServiceRecord,
    pub at: u64,
}

/// Conjunctive match on kind, id and attribute equality.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Filter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ServiceType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_id: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

impl Filter {
    pub fn any() -> Self {
        Filter::default()
    }

    pub fn kind(kind: ServiceType) -> Self {
        Filter { kind: Some(kind), ..Filter::default() }
    }

    pub fn id(service_id: impl Into<String>) -> Self {
        Filter { service_id: Some(service_id.into()), ..Filter::default() }
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }

    pub fn matches(&self, record: &ServiceRecord) -> bool {
        self.kind.is_none_or(|k| k == record.kind)
            && self.service_id.as_ref().is_none_or(|id| *id == record.service_id)
            && self.attributes.iter().all(|(k, v)| record.attributes.get(k) == Some(v))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("lease duration {requested} ms outside [{min}, {max}]")]
    DurationOutOfRange { requested: u64, min: u64, max: u64 },
    #[error("no live registration for {0}")]
    NotFound(String),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::DurationOutOfRange { .. } => "DURATION_OUT_OF_RANGE",
            RegistryError::NotFound(_) => "NOT_FOUND",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LeasePolicy {
    pub min_lease_ms: u64,
    pub max_lease_ms: u64,
}

impl Default for LeasePolicy {
    fn default() -> Self {
        LeasePolicy { min_lease_ms: DEFAULT_MIN_LEASE_MS, max_lease_ms: DEFAULT_MAX_LEASE_MS }
    }
}

struct Subscriber {
    filter: Filter,
    tx: mpsc::Sender<RegistryEvent>,
}

#[derive(Default)]
struct State {
    records: HashMap<String, ServiceRecord>,
    subscribers: Vec<Subscriber>,
}

impl State {
    fn emit(&mut self, kind: EventKind, record: &ServiceRecord, at: u64) {
        let event = RegistryEvent { kind, record: record.clone(), at };
        // A full or closed buffer disconnects the subscriber; the registry
        // never waits on a consumer.
        self.subscribers.retain(|sub| {
            if !sub.filter.matches(&event.record) {
                return !sub.tx.is_closed();
            }
            sub.tx.try_send(event.clone()).is_ok()
        });
    }

    fn expire(&mut self, service_id: &str, now: u64) -> bool {
        if let Some(record) = self.records.remove(service_id) {
            self.emit(EventKind::Expired, &record, now);
            true
        } else {
            false
        }
    }

    fn live(&mut self, service_id: &str, now: u64) -> Option<&mut ServiceRecord> {
        let expired = self.records.get(service_id).is_some_and(|r| r.lease.expiry < now);
        if expired {
            self.expire(service_id, now);
            return None;
        }
        self.records.get_mut(service_id)
    }
}

/// In-memory lease registry.
pub struct Registry {
    policy: LeasePolicy,
    buffer: usize,
    state: Mutex<State>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::new(LeasePolicy::default())
    }
}

impl Registry {
    pub fn new(policy: LeasePolicy) -> Self {
        Self::with_buffer(policy, SUBSCRIBER_BUFFER)
    }

    pub fn with_buffer(policy: LeasePolicy, buffer: usize) -> Self {
        Registry { policy, buffer, state: Mutex::new(State::default()) }
    }

    pub fn policy(&self) -> LeasePolicy {
        self.policy
    }

    fn check_duration(&self, duration_ms: u64) -> Result<(), RegistryError> {
        if duration_ms < self.policy.min_lease_ms || duration_ms > self.policy.max_lease_ms {
            return Err(RegistryError::DurationOutOfRange {
                requested: duration_ms,
                min: self.policy.min_lease_ms,
                max: self.policy.max_lease_ms,
            });
        }
        Ok(())
    }

    pub fn register(&self, info: ServiceInfo, duration_ms: u64, now: u64) -> Result<Lease, RegistryError> {
        self.check_duration(duration_ms)?;
        let mut state = self.state.lock().unwrap();
        let replacing = state.live(&info.service_id, now).is_some();
        let lease = Lease::grant(now, duration_ms);
        let record = ServiceRecord {
            service_id: info.service_id,
            kind: info.kind,
            endpoint: info.endpoint,
            attributes: info.attributes,
            lease,
        };
        let kind = if replacing { EventKind::Updated } else { EventKind::Registered };
        state.emit(kind, &record, now);
        state.records.insert(record.service_id.clone(), record);
        Ok(lease)
    }

    pub fn renew(&self, service_id: &str, duration_ms: u64, now: u64) -> Result<Lease, RegistryError> {
        self.check_duration(duration_ms)?;
        let mut state = self.state.lock().unwrap();
        let record = state.live(service_id, now).ok_or_else(|| RegistryError::NotFound(service_id.into()))?;
        record.lease = Lease::grant(now, duration_ms);
        let (record, lease) = (record.clone(), record.lease);
        state.emit(EventKind::Renewed, &record, now);
        Ok(lease)
    }

    pub fn unregister(&self, service_id: &str, now: u64) -> Result<(), RegistryError> {
        let mut state = self.state.lock().unwrap();
        if state.live(service_id, now).is_none() {
            return Err(RegistryError::NotFound(service_id.into()));
        }
        let record = state.records.remove(service_id).expect("checked live");
        state.emit(EventKind::Unregistered, &record, now);
        Ok(())
    }

    /// Live records matching `filter`, ordered by service id. Records whose
    /// lease ran out are never returned, swept or not.
    pub fn lookup(&self, filter: &Filter, now: u64) -> Vec<ServiceRecord> {
        let state = self.state.lock().unwrap();
        let mut out: Vec<ServiceRecord> = state
            .records
            .values()
            .filter(|r| r.lease.expiry >= now && filter.matches(r))
            .cloned()
            .collect();
        out.sort_by(|a, b| a.service_id.cmp(&b.service_id));
        out
    }

    /// Removes every record with `expiry < now`, emitting one EXPIRED each.
    pub fn sweep(&self, now: u64) -> Vec<String> {
        let mut state = self.state.lock().unwrap();
        let mut expired: Vec<String> =
            state.records.values().filter(|r| r.lease.expiry < now).map(|r| r.service_id.clone()).collect();
        expired.sort();
        for id in &expired {
            state.expire(id, now);
        }
        expired
    }

    /// Earliest expiry among live records, used to schedule the next sweep.
    pub fn next_expiry(&self) -> Option<u64> {
        self.state.lock().unwrap().records.values().map(|r| r.lease.expiry).min()
    }

    /// Events matching `filter` emitted after this call. The receiver ends
    /// when the subscriber overflows its buffer or the registry goes away.
    pub fn subscribe(&self, filter: Filter) -> mpsc::Receiver<RegistryEvent> {
        let (tx, rx) = mpsc::channel(self.buffer);
        self.state.lock().unwrap().subscribers.push(Subscriber { filter, tx });
        rx
    }

    pub fn subscriber_count(&self) -> usize {
        let mut state = self.state.lock().unwrap();
        state.subscribers.retain(|s| !s.tx.is_closed());
        state.subscribers.len()
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
