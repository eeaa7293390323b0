//! Atomic agent moves.
//!
//! The source station coordinates a two-phase commit with the destination:
//!
//! 1. source logs INIT with a checkpoint, suspends the agent, stamps departure
//! 2. source sends PREPARE; dest verifies, logs PREPARED, holds the snapshot
//! 3. source logs COMMIT and drops its instance
//! 4. source sends COMMIT; dest logs COMMITTED, activates, acks
//! 5. source logs FINALIZED
//!
//! Both sides append to a write-ahead [`TxnLog`]; [`plan_recovery`] turns a
//! log back into custody decisions after a crash. The station drives the
//! protocol; this module owns the records, the wire payloads and the rules.

mod log;
mod recovery;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::wire::{AgentId, AgentSnapshot, TravelEntry, TxnId};
pub use log::{LogError, LogRecord, Role, TxnLog, TxnState};
pub use recovery::{plan_recovery, Hold, RecoveredAgent, RecoveryPlan, Restart};

/// Source name used by launches from a client rather than another station.
pub const STARTER: &str = "starter";

pub const DEFAULT_PREPARE_TIMEOUT_MS: u64 = 10_000;
pub const DEFAULT_COMMIT_TIMEOUT_MS: u64 = 10_000;
pub const DEFAULT_BACKOFF_MIN_MS: u64 = 1_000;
pub const DEFAULT_BACKOFF_MAX_MS: u64 = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MovePhase {
    Init,
    Prepared,
    Committed,
    Aborted,
}

impl MovePhase {
    /// Position in the only allowed order INIT → PREPARED → {COMMITTED|ABORTED}.
    pub fn rank(self) -> u8 {
        match self {
            MovePhase::Init => 0,
            MovePhase::Prepared => 1,
            MovePhase::Committed | MovePhase::Aborted => 2,
        }
    }
}

impl fmt::Display for MovePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MovePhase::Init => "INIT",
            MovePhase::Prepared => "PREPARED",
            MovePhase::Committed => "COMMITTED",
            MovePhase::Aborted => "ABORTED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveTxn {
    pub txn_id: TxnId,
    pub agent_id: AgentId,
    pub source: String,
    pub dest: String,
    pub phase: MovePhase,
    pub snapshot_digest: String,
}

/// Protocol boundaries at which a test hook may run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MoveStep {
    /// Source logged INIT and stamped departure.
    Initiated = 1,
    /// Dest logged PREPARED (before replying).
    Prepared = 2,
    /// Source logged COMMIT and dropped its instance.
    Decided = 3,
    /// Dest logged COMMITTED and activated (before acking).
    Activated = 4,
    /// Source logged FINALIZED.
    Finalized = 5,
}

impl MoveStep {
    pub const ALL: [MoveStep; 5] =
        [MoveStep::Initiated, MoveStep::Prepared, MoveStep::Decided, MoveStep::Activated, MoveStep::Finalized];

    pub fn number(self) -> u8 {
        self as u8
    }
}

/// Why a move did not commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortReason {
    /// PREPARE_REJECTED, DEST_UNREACHABLE, TIMEOUT, BUSY or CRASHED.
    pub code: String,
    /// For rejections, the destination's admission code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl AbortReason {
    pub fn new(code: &str) -> Self {
        AbortReason { code: code.into(), detail: None }
    }

    pub fn rejected(code: &str) -> Self {
        AbortReason { code: "PREPARE_REJECTED".into(), detail: Some(code.into()) }
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.detail {
            Some(d) => write!(f, "{}({d})", self.code),
            None => f.write_str(&self.code),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MoveResult {
    Committed,
    Aborted(AbortReason),
}

/// Source-side view of a transaction, as answered to TXN_STATUS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TxnStatus {
    Pending,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareRequest {
    pub txn_id: TxnId,
    pub agent_id: AgentId,
    pub source: String,
    pub dest: String,
    #[serde(with = "crate::wire::b64")]
    pub snapshot: Vec<u8>,
    /// Recall: finish as soon as the agent is activated.
    #[serde(default)]
    pub finish_on_arrival: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnRef {
    pub txn_id: TxnId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReply {
    pub txn_id: TxnId,
    pub status: TxnStatus,
}

/// The snapshot with the current stop's departure stamped. Departure is
/// never earlier than the arrival it closes.
pub fn depart(snapshot: &AgentSnapshot, now: u64) -> AgentSnapshot {
    let mut s = snapshot.clone();
    if let Some(last) = s.travel_log.last_mut() {
        last.departure = Some(now.max(last.arrival));
    }
    s
}

/// The snapshot with a new arrival entry at `station_id`.
pub fn arrive(snapshot: &AgentSnapshot, station_id: &str, arrival: u64) -> AgentSnapshot {
    let mut s = snapshot.clone();
    s.travel_log.push(TravelEntry { station_id: station_id.to_string(), arrival, departure: None });
    s
}

/// Arrival stamp: now, but never before the previous departure.
pub fn arrival_time(snapshot: &AgentSnapshot, now: u64) -> u64 {
    let floor = snapshot.travel_log.last().and_then(|e| e.departure.or(Some(e.arrival))).unwrap_or(0);
    now.max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_ranks_are_monotone() {
        assert!(MovePhase::Init.rank() < MovePhase::Prepared.rank());
        assert!(MovePhase::Prepared.rank() < MovePhase::Committed.rank());
        assert_eq!(MovePhase::Committed.rank(), MovePhase::Aborted.rank());
    }

    #[test]
    fn reasons_print_with_detail() {
        assert_eq!(AbortReason::rejected("TAMPERED").to_string(), "PREPARE_REJECTED(TAMPERED)");
        assert_eq!(AbortReason::new("TIMEOUT").to_string(), "TIMEOUT");
    }
}
