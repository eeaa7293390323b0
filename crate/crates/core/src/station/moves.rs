//! Destination side of moves, plus background resolution of in-doubt holds
//! and commits the destination has not acknowledged yet.

use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::runner::{start_agent, Entry};
use super::{HeldTxn, Outgoing, Shared};
use crate::clock::monotonic_ms;
use crate::codeserver::{fetch, CodeBundle};
use crate::migration::{
    arrival_time, arrive, Hold, LogError, LogRecord, MovePhase, MoveStep, MoveTxn, PrepareRequest, Role, StatusReply, TxnRef,
    TxnStatus, STARTER,
};
use crate::security::{admit_agent, sha256_hex, Admission};
use crate::wire::{round_trip, unmarshal_snapshot, AgentSnapshot, Message, ServiceKind, TxnId};

const PEER_QUERY_TIMEOUT: Duration = Duration::from_secs(2);

fn txn_msg(kind: &str, txn_id: TxnId, payload: Value) -> Message {
    Message::new(kind, payload).with_txn(txn_id.to_hex())
}

fn rejected(txn_id: TxnId, code: &str, message: &str) -> Message {
    txn_msg("REJECTED", txn_id, json!({ "txn_id": txn_id, "code": code, "message": message }))
}

fn parse<T: serde::de::DeserializeOwned>(msg: &Message) -> Result<T, Message> {
    serde_json::from_value(msg.payload.clone()).map_err(|e| Message::error("MALFORMED", e))
}

/// Best-effort ABORT to a destination; it will ask us later otherwise.
pub(crate) async fn send_abort(shared: &Shared, dest: &str, txn_id: TxnId) {
    let msg = txn_msg("ABORT", txn_id, json!(TxnRef { txn_id }));
    if let Err(e) = round_trip(dest, &msg, PEER_QUERY_TIMEOUT).await {
        tracing::debug!(station = %shared.cfg.station_id, %dest, "abort not delivered: {e}");
    }
}

async fn send_commit(shared: &Shared, txn: &MoveTxn) -> bool {
    let msg = txn_msg("COMMIT", txn.txn_id, json!(TxnRef { txn_id: txn.txn_id }));
    match round_trip(&txn.dest, &msg, Duration::from_millis(shared.cfg.commit_timeout_ms)).await {
        Ok(reply) if reply.kind == "COMMITTED" => true,
        Ok(reply) => {
            tracing::warn!(txn = %txn.txn_id, "commit answered with {}", reply.kind);
            false
        }
        Err(e) => {
            tracing::info!(txn = %txn.txn_id, "commit not acknowledged: {e}");
            false
        }
    }
}

fn finalize(shared: &Shared, txn_id: TxnId) {
    match shared.append(&LogRecord::Finalized { txn_id }) {
        Ok(()) => {
            shared.step_done(MoveStep::Finalized, &txn_id);
        }
        Err(e) => tracing::warn!(txn = %txn_id, "cannot finalize: {e}"),
    }
}

/// Sends COMMIT for a decided move; on no ack, queues it for the resolver.
pub(crate) async fn push_commit(shared: &Arc<Shared>, mut out: Outgoing) {
    let txn_id = out.txn.txn_id;
    if send_commit(shared, &out.txn).await {
        if !shared.crashed() {
            finalize(shared, txn_id);
        }
        return;
    }
    if shared.crashed() {
        return;
    }
    out.next_try = monotonic_ms() + out.backoff;
    out.backoff = (out.backoff * 2).min(shared.cfg.backoff_max_ms);
    shared.outgoing.lock().unwrap().insert(txn_id, out);
}

/// Reply for a PREPARE already decided here, if any.
fn prepared_before(shared: &Shared, txn_id: &TxnId) -> Option<Message> {
    if let Some(st) = shared.log.lock().unwrap().get(txn_id) {
        return Some(match (st.role, st.phase()) {
            (Role::Dest, MovePhase::Aborted) => rejected(*txn_id, "TXN_ABORTED", "transaction was aborted"),
            (Role::Dest, _) => txn_msg("PREPARED", *txn_id, json!({ "txn_id": txn_id })),
            (Role::Source, _) => rejected(*txn_id, "SAME_STATION", "a station cannot move an agent to itself"),
        });
    }
    shared.rejected.lock().unwrap().get(txn_id).map(|(code, message)| rejected(*txn_id, code, message))
}

fn occupied(shared: &Shared, snapshot: &AgentSnapshot) -> bool {
    shared.residents.lock().unwrap().contains_key(&snapshot.agent_id)
        || shared.holds.lock().unwrap().values().any(|h| h.hold.txn.agent_id == snapshot.agent_id)
}

async fn bundle_bytes(shared: &Shared, snapshot: &AgentSnapshot) -> Result<Vec<u8>, (String, String)> {
    let r = &snapshot.bundle_ref;
    if let Some(b) = shared.bundles.lock().unwrap().get(&r.sha256) {
        return Ok(b.clone());
    }
    // fetch() only returns bytes matching the digest, so caching by digest is safe.
    let bytes = fetch(&shared.http, &r.url, &r.sha256).await.map_err(|e| {
        let code = match e.code() {
            "NOT_FOUND" | "IO_ERROR" => "BUNDLE_UNAVAILABLE",
            c => c,
        };
        (code.to_string(), e.to_string())
    })?;
    shared.bundles.lock().unwrap().insert(r.sha256.clone(), bytes.clone());
    Ok(bytes)
}

/// The admission pipeline for an arriving snapshot.
async fn admit(shared: &Shared, req: &PrepareRequest) -> Result<AgentSnapshot, (String, String)> {
    let err = |code: &str, m: String| Err((code.to_string(), m));
    let snapshot = match unmarshal_snapshot(&req.snapshot) {
        Ok(s) => s,
        Err(e) => return err("SCHEMA_MISMATCH", e.to_string()),
    };
    if snapshot.agent_id != req.agent_id {
        return err("SCHEMA_MISMATCH", "agent_id differs from the snapshot".into());
    }
    if !shared.behaviors.contains(&snapshot.behavior_id) {
        return err("UNKNOWN_BEHAVIOR", format!("behavior {} is not installed here", snapshot.behavior_id));
    }
    if occupied(shared, &snapshot) {
        return err("ALREADY_RESIDENT", format!("agent {} is already here", snapshot.agent_id));
    }
    let bundle = bundle_bytes(shared, &snapshot).await?;
    let admission = admit_agent(&snapshot, &bundle, &shared.trust.read().unwrap());
    if admission != Admission::Admitted {
        return err(admission.code(), "admission check failed".into());
    }
    match CodeBundle::decode(&bundle) {
        Ok(b) if b.manifest.behavior_id == snapshot.behavior_id => {}
        Ok(b) => return err("BEHAVIOR_MISMATCH", format!("bundle attests {}", b.manifest.behavior_id)),
        Err(e) => return err("MALFORMED_BUNDLE", e.to_string()),
    }
    if let Err(e) = shared.behaviors.restore(&snapshot.behavior_id, &snapshot.state_blob) {
        return err("SCHEMA_MISMATCH", e.to_string());
    }
    Ok(snapshot)
}

/// PREPARE: verify, log, hold inactive. `None` means the station crashed
/// before it could answer.
pub(crate) async fn on_prepare(shared: &Arc<Shared>, msg: &Message) -> Option<Message> {
    let req: PrepareRequest = match parse(msg) {
        Ok(r) => r,
        Err(m) => return Some(m),
    };
    let txn_id = req.txn_id;
    if let Some(reply) = prepared_before(shared, &txn_id) {
        return Some(reply);
    }
    // An older hold for the same agent is probably settled at its source by now.
    let stale: Vec<TxnId> = shared
        .holds
        .lock()
        .unwrap()
        .values()
        .filter(|h| h.hold.txn.agent_id == req.agent_id)
        .map(|h| h.hold.txn.txn_id)
        .collect();
    for t in stale {
        resolve_hold(shared, t).await;
    }

    let snapshot = match admit(shared, &req).await {
        Ok(s) => s,
        Err((code, message)) => {
            shared.rejected.lock().unwrap().insert(txn_id, (code.clone(), message.clone()));
            shared.events.emit(
                "PREPARE_REJECTED",
                Some(req.agent_id),
                json!({ "txn_id": txn_id, "source": req.source, "code": code, "message": message }),
            );
            return Some(rejected(txn_id, &code, &message));
        }
    };

    let guard = shared.txn_lock.lock().await;
    if let Some(reply) = prepared_before(shared, &txn_id) {
        return Some(reply);
    }
    if occupied(shared, &snapshot) {
        return Some(rejected(txn_id, "ALREADY_RESIDENT", "agent arrived meanwhile"));
    }
    let txn = MoveTxn {
        txn_id,
        agent_id: req.agent_id,
        source: req.source.clone(),
        dest: shared.endpoint.clone(),
        phase: MovePhase::Prepared,
        snapshot_digest: sha256_hex(&req.snapshot),
    };
    let record = LogRecord::Prepared { txn: txn.clone(), snapshot: req.snapshot.clone(), finish_on_arrival: req.finish_on_arrival };
    if let Err(e) = shared.append(&record) {
        return if shared.crashed() { None } else { Some(Message::error("LOG_ERROR", e)) };
    }
    let now = monotonic_ms();
    let held = HeldTxn {
        hold: Hold { txn, snapshot: req.snapshot, finish_on_arrival: req.finish_on_arrival },
        snapshot,
        since: now,
        next_try: now + shared.cfg.backoff_min_ms,
        backoff: shared.cfg.backoff_min_ms,
    };
    shared.holds.lock().unwrap().insert(txn_id, held);
    drop(guard);
    shared.events.emit("PREPARED", Some(req.agent_id), json!({ "txn_id": txn_id, "source": req.source }));
    if !shared.step_done(MoveStep::Prepared, &txn_id) {
        return None;
    }
    Some(txn_msg("PREPARED", txn_id, json!({ "txn_id": txn_id })))
}

/// Turns a hold into a running resident. Caller holds `txn_lock`.
async fn activate(shared: &Arc<Shared>, txn_id: TxnId) -> Result<(), LogError> {
    let Some(held) = shared.holds.lock().unwrap().remove(&txn_id) else {
        tracing::warn!(txn = %txn_id, "prepared txn has no hold");
        return Ok(());
    };
    let arrival = arrival_time(&held.snapshot, monotonic_ms());
    if let Err(e) = shared.append(&LogRecord::Committed { txn_id, arrival }) {
        shared.holds.lock().unwrap().insert(txn_id, held);
        return Err(e);
    }
    let snapshot = arrive(&held.snapshot, &shared.cfg.station_id, arrival);
    let agent_id = snapshot.agent_id;
    shared.events.emit(
        "ARRIVED",
        Some(agent_id),
        json!({ "txn_id": txn_id, "source": held.hold.txn.source, "arrival": arrival }),
    );
    let entry = if held.hold.finish_on_arrival {
        Entry::FinishNow
    } else {
        if snapshot.service_kind == ServiceKind::Service {
            shared.register_agent(&snapshot).await;
        }
        Entry::Arrive
    };
    start_agent(shared, snapshot, entry);
    Ok(())
}

fn discard_hold(shared: &Shared, txn_id: TxnId, why: &str) {
    if let Err(e) = shared.append(&LogRecord::Abort { txn_id }) {
        tracing::warn!(txn = %txn_id, "cannot log abort: {e}");
        return;
    }
    if let Some(held) = shared.holds.lock().unwrap().remove(&txn_id) {
        shared.events.emit("HOLD_DISCARDED", Some(held.hold.txn.agent_id), json!({ "txn_id": txn_id, "reason": why }));
    }
}

fn dest_phase(shared: &Shared, txn_id: &TxnId) -> Option<MovePhase> {
    shared.log.lock().unwrap().get(txn_id).filter(|s| s.role == Role::Dest).map(|s| s.phase())
}

pub(crate) async fn on_commit(shared: &Arc<Shared>, msg: &Message) -> Option<Message> {
    let TxnRef { txn_id } = match parse(msg) {
        Ok(r) => r,
        Err(m) => return Some(m),
    };
    let _guard = shared.txn_lock.lock().await;
    let committed = txn_msg("COMMITTED", txn_id, json!({ "txn_id": txn_id }));
    match dest_phase(shared, &txn_id) {
        Some(MovePhase::Committed) => Some(committed),
        Some(MovePhase::Aborted) => Some(Message::error("TXN_ABORTED", format!("txn {txn_id} was aborted"))),
        Some(MovePhase::Prepared) => match activate(shared, txn_id).await {
            Ok(()) if shared.step_done(MoveStep::Activated, &txn_id) => Some(committed),
            Ok(()) => None,
            Err(_) if shared.crashed() => None,
            Err(e) => Some(Message::error("LOG_ERROR", e)),
        },
        _ => Some(Message::error("UNKNOWN_TXN", format!("txn {txn_id} is unknown here"))),
    }
}

pub(crate) async fn on_abort(shared: &Arc<Shared>, msg: &Message) -> Message {
    let TxnRef { txn_id } = match parse(msg) {
        Ok(r) => r,
        Err(m) => return m,
    };
    let _guard = shared.txn_lock.lock().await;
    match dest_phase(shared, &txn_id) {
        Some(MovePhase::Prepared) => discard_hold(shared, txn_id, "ABORTED_BY_SOURCE"),
        Some(_) => {}
        None => {
            // A late PREPARE for this txn must not create a hold.
            shared.rejected.lock().unwrap().insert(txn_id, ("TXN_ABORTED".into(), "aborted by source".into()));
        }
    }
    txn_msg("ABORTED", txn_id, json!({ "txn_id": txn_id }))
}

pub(crate) fn on_txn_status(shared: &Shared, msg: &Message) -> Message {
    let TxnRef { txn_id } = match parse(msg) {
        Ok(r) => r,
        Err(m) => return m,
    };
    let status = shared.log.lock().unwrap().status(&txn_id);
    txn_msg("TXN_STATE", txn_id, json!(StatusReply { txn_id, status }))
}

/// Asks a hold's source how its txn ended and acts on the answer.
async fn resolve_hold(shared: &Arc<Shared>, txn_id: TxnId) {
    let Some((source, since)) = shared.holds.lock().unwrap().get(&txn_id).map(|h| (h.hold.txn.source.clone(), h.since)) else {
        return;
    };
    let now = monotonic_ms();
    if source == STARTER {
        // A launching client cannot be asked; it commits right away or never.
        let deadline = since + shared.cfg.commit_timeout_ms;
        if now >= deadline {
            let _guard = shared.txn_lock.lock().await;
            if dest_phase(shared, &txn_id) == Some(MovePhase::Prepared) {
                discard_hold(shared, txn_id, "PRESUMED_ABORT");
            }
        } else if let Some(h) = shared.holds.lock().unwrap().get_mut(&txn_id) {
            h.next_try = deadline;
        }
        return;
    }
    let query = txn_msg("TXN_STATUS", txn_id, json!(TxnRef { txn_id }));
    let answer = match round_trip(&source, &query, PEER_QUERY_TIMEOUT).await {
        Ok(m) if m.kind == "TXN_STATE" => serde_json::from_value::<StatusReply>(m.payload).ok().map(|r| r.status),
        _ => None,
    };
    match answer {
        Some(TxnStatus::Committed) => {
            let _guard = shared.txn_lock.lock().await;
            if dest_phase(shared, &txn_id) == Some(MovePhase::Prepared) && activate(shared, txn_id).await.is_ok() {
                shared.step_done(MoveStep::Activated, &txn_id);
            }
        }
        Some(TxnStatus::Aborted) => {
            let _guard = shared.txn_lock.lock().await;
            if dest_phase(shared, &txn_id) == Some(MovePhase::Prepared) {
                discard_hold(shared, txn_id, "ABORTED_BY_SOURCE");
            }
        }
        Some(TxnStatus::Pending) => {
            if let Some(h) = shared.holds.lock().unwrap().get_mut(&txn_id) {
                h.next_try = now + shared.cfg.backoff_min_ms;
            }
        }
        None => {
            if let Some(h) = shared.holds.lock().unwrap().get_mut(&txn_id) {
                h.next_try = now + h.backoff;
                h.backoff = (h.backoff * 2).min(shared.cfg.backoff_max_ms);
            }
        }
    }
}

/// One pass over holds and unacknowledged commits. `force` ignores backoff.
pub(crate) async fn resolve_pass(shared: &Arc<Shared>, force: bool) {
    let now = monotonic_ms();
    let holds: Vec<TxnId> =
        shared.holds.lock().unwrap().iter().filter(|(_, h)| force || h.next_try <= now).map(|(t, _)| *t).collect();
    for txn_id in holds {
        resolve_hold(shared, txn_id).await;
    }
    let due: Vec<TxnId> =
        shared.outgoing.lock().unwrap().iter().filter(|(_, o)| force || o.next_try <= now).map(|(t, _)| *t).collect();
    for txn_id in due {
        // Taken out while in flight so concurrent passes never double-finalize.
        let Some(out) = shared.outgoing.lock().unwrap().remove(&txn_id) else { continue };
        push_commit(shared, out).await;
    }
}

pub(crate) async fn resolver_loop(shared: Arc<Shared>) {
    let period = Duration::from_millis((shared.cfg.backoff_min_ms / 4).clamp(50, 1000));
    loop {
        tokio::time::sleep(period).await;
        resolve_pass(&shared, false).await;
    }
}
