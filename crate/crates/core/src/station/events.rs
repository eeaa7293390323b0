//! Local lifecycle events, kept in order and pushed to live followers.

use std::collections::VecDeque;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::broadcast;

use crate::clock::monotonic_ms;
use crate::wire::AgentId;

const HISTORY_LIMIT: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationEvent {
    pub seq: u64,
    pub at: u64,
    pub station_id: String,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub data: Value,
}

pub(crate) struct EventBus {
    station_id: String,
    history: Mutex<(u64, VecDeque<StationEvent>)>,
    live: broadcast::Sender<StationEvent>,
}

impl EventBus {
    pub fn new(station_id: &str) -> Self {
        EventBus {
            station_id: station_id.to_string(),
            history: Mutex::new((0, VecDeque::new())),
            live: broadcast::channel(4096).0,
        }
    }

    pub fn emit(&self, kind: &str, agent: Option<AgentId>, data: Value) -> StationEvent {
        let mut h = self.history.lock().unwrap();
        h.0 += 1;
        let event = StationEvent {
            seq: h.0,
            at: monotonic_ms(),
            station_id: self.station_id.clone(),
            kind: kind.to_string(),
            agent_id: agent.map(|a| a.to_hex()),
            data,
        };
        if h.1.len() == HISTORY_LIMIT {
            h.1.pop_front();
        }
        h.1.push_back(event.clone());
        // Sent under the lock so followers see history and live in one order.
        let _ = self.live.send(event.clone());
        event
    }

    pub fn history(&self) -> Vec<StationEvent> {
        self.history.lock().unwrap().1.iter().cloned().collect()
    }

    /// History so far plus a receiver for everything after it.
    pub fn follow(&self) -> (Vec<StationEvent>, broadcast::Receiver<StationEvent>) {
        let h = self.history.lock().unwrap();
        (h.1.iter().cloned().collect(), self.live.subscribe())
    }
}
