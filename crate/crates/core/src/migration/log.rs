//! Append-only transaction log: one frame per record, fsync per append.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{MovePhase, MoveTxn, TxnStatus};
use crate::wire::{decode_frame, encode_frame, AgentId, FrameError, TxnId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum LogRecord {
    /// Source: move started; `checkpoint` is the snapshot to resume from.
    Init {
        txn: MoveTxn,
        #[serde(with = "crate::wire::b64")]
        checkpoint: Vec<u8>,
    },
    /// Dest: snapshot admitted and held inactive.
    Prepared {
        txn: MoveTxn,
        #[serde(with = "crate::wire::b64")]
        snapshot: Vec<u8>,
        #[serde(default)]
        finish_on_arrival: bool,
    },
    /// Source: decision to commit.
    Commit { txn_id: TxnId },
    /// Dest: agent activated at `arrival`.
    Committed { txn_id: TxnId, arrival: u64 },
    Abort { txn_id: TxnId },
    /// Source: dest acknowledged the commit.
    Finalized { txn_id: TxnId },
    /// The agent finished or failed here and will not run again.
    Retired {
        agent_id: AgentId,
        outcome: String,
        #[serde(with = "crate::wire::b64")]
        result: Vec<u8>,
        #[serde(with = "crate::wire::b64")]
        snapshot: Vec<u8>,
    },
}

impl LogRecord {
    pub fn name(&self) -> &'static str {
        match self {
            LogRecord::Init { .. } => "INIT",
            LogRecord::Prepared { .. } => "PREPARED",
            LogRecord::Commit { .. } => "COMMIT",
            LogRecord::Committed { .. } => "COMMITTED",
            LogRecord::Abort { .. } => "ABORT",
            LogRecord::Finalized { .. } => "FINALIZED",
            LogRecord::Retired { .. } => "RETIRED",
        }
    }

    pub fn txn_id(&self) -> Option<TxnId> {
        match self {
            LogRecord::Init { txn, .. } | LogRecord::Prepared { txn, .. } => Some(txn.txn_id),
            LogRecord::Commit { txn_id }
            | LogRecord::Committed { txn_id, .. }
            | LogRecord::Abort { txn_id }
            | LogRecord::Finalized { txn_id } => Some(*txn_id),
            LogRecord::Retired { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Source,
    Dest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnState {
    pub txn: MoveTxn,
    pub role: Role,
    pub finalized: bool,
}

impl TxnState {
    pub fn phase(&self) -> MovePhase {
        self.txn.phase
    }

    pub fn decided(&self) -> bool {
        matches!(self.txn.phase, MovePhase::Committed | MovePhase::Aborted)
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{record} not allowed for txn {txn_id} in state {state}")]
    IllegalTransition { txn_id: TxnId, record: &'static str, state: String },
    #[error("corrupt log {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("log is fenced")]
    Fenced,
    #[error("log io: {0}")]
    Io(#[from] io::Error),
}

/// Applies `record` to `states` if legal.
pub(crate) fn apply(states: &mut HashMap<TxnId, TxnState>, record: &LogRecord) -> Result<(), LogError> {
    let illegal = |txn_id: TxnId, state: Option<&TxnState>| LogError::IllegalTransition {
        txn_id,
        record: record.name(),
        state: state.map(|s| format!("{:?}/{}", s.role, s.txn.phase)).unwrap_or_else(|| "unknown".into()),
    };
    match record {
        LogRecord::Init { txn, .. } | LogRecord::Prepared { txn, .. } => {
            let (role, phase) = match record {
                LogRecord::Init { .. } => (Role::Source, MovePhase::Init),
                _ => (Role::Dest, MovePhase::Prepared),
            };
            if states.contains_key(&txn.txn_id) || txn.phase != phase {
                return Err(illegal(txn.txn_id, states.get(&txn.txn_id)));
            }
            states.insert(txn.txn_id, TxnState { txn: txn.clone(), role, finalized: false });
        }
        LogRecord::Commit { txn_id } | LogRecord::Committed { txn_id, .. } | LogRecord::Abort { txn_id } => {
            let st = states.get_mut(txn_id).ok_or_else(|| illegal(*txn_id, None))?;
            let ok = !st.decided()
                && match record {
                    LogRecord::Commit { .. } => st.role == Role::Source,
                    LogRecord::Committed { .. } => st.role == Role::Dest,
                    _ => true,
                };
            if !ok {
                return Err(illegal(*txn_id, Some(st)));
            }
            st.txn.phase = if matches!(record, LogRecord::Abort { .. }) { MovePhase::Aborted } else { MovePhase::Committed };
        }
        LogRecord::Finalized { txn_id } => {
            let st = states.get_mut(txn_id).ok_or_else(|| illegal(*txn_id, None))?;
            if st.role != Role::Source || st.txn.phase != MovePhase::Committed || st.finalized {
                return Err(illegal(*txn_id, Some(st)));
            }
            st.finalized = true;
        }
        LogRecord::Retired { .. } => {}
    }
    Ok(())
}

/// A station's durable transaction log.
// TODO: compact finalized and aborted txns once logs grow past a few MB.
#[derive(Debug)]
pub struct TxnLog {
    path: PathBuf,
    file: File,
    states: HashMap<TxnId, TxnState>,
    fence: Option<Arc<AtomicBool>>,
}

impl TxnLog {
    /// Opens or creates the log and replays it. A torn final frame (from a
    /// crash mid-append) is cut off; any other damage is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<LogRecord>), LogError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let len = file.metadata()?.len();
        let mut reader = BufReader::new(&mut file);
        let mut records = Vec::new();
        let mut states = HashMap::new();
        let mut good = 0u64;
        loop {
            if good == len {
                break;
            }
            match decode_frame(&mut reader) {
                Ok(value) => {
                    let record: LogRecord = serde_json::from_value(value)
                        .map_err(|e| LogError::Corrupt { path: path.clone(), reason: e.to_string() })?;
                    apply(&mut states, &record)
                        .map_err(|e| LogError::Corrupt { path: path.clone(), reason: e.to_string() })?;
                    records.push(record);
                    good = reader.stream_position()?;
                }
                Err(FrameError::Truncated) => {
                    tracing::warn!(path = %path.display(), at = good, "dropping torn log tail");
                    drop(reader);
                    file.set_len(good)?;
                    file.sync_all()?;
                    break;
                }
                Err(e) => return Err(LogError::Corrupt { path: path.clone(), reason: e.to_string() }),
            }
        }
        file.seek(SeekFrom::End(0))?;
        Ok((TxnLog { path, file, states, fence: None }, records))
    }

    /// Once `fence` is set, every append fails. Used to make a crashed
    /// station stop writing immediately.
    pub fn with_fence(mut self, fence: Arc<AtomicBool>) -> Self {
        self.fence = Some(fence);
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Validates, writes and fsyncs one record.
    pub fn append(&mut self, record: &LogRecord) -> Result<(), LogError> {
        if self.fence.as_ref().is_some_and(|f| f.load(Ordering::SeqCst)) {
            return Err(LogError::Fenced);
        }
        let mut next = HashMap::new();
        if let Some(id) = record.txn_id() {
            if let Some(st) = self.states.get(&id) {
                next.insert(id, st.clone());
            }
        }
        apply(&mut next, record)?;
        let frame = encode_frame(&serde_json::to_value(record).expect("record serializes"))
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        self.file.write_all(&frame)?;
        self.file.sync_data()?;
        self.states.extend(next);
        Ok(())
    }

    pub fn get(&self, txn_id: &TxnId) -> Option<&TxnState> {
        self.states.get(txn_id)
    }

    /// Answer to a destination asking how a source-side txn ended. Unknown
    /// txns are presumed aborted.
    pub fn status(&self, txn_id: &TxnId) -> TxnStatus {
        match self.states.get(txn_id) {
            Some(st) if st.role == Role::Source => match st.txn.phase {
                MovePhase::Init | MovePhase::Prepared => TxnStatus::Pending,
                MovePhase::Committed => TxnStatus::Committed,
                MovePhase::Aborted => TxnStatus::Aborted,
            },
            _ => TxnStatus::Aborted,
        }
    }
}
