//! One task per resident agent. It owns the behavior instance, serializes
//! steps and commands, and runs the source side of every move.

use std::panic::AssertUnwindSafe;
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tokio::sync::{mpsc, oneshot};

use super::{Outgoing, Resident, RunState, Shared};
use crate::agents::{AgentContext, Behavior, BehaviorAction, BehaviorError, CommandOutcome};
use crate::migration::{depart, AbortReason, LogRecord, MovePhase, MoveStep, MoveTxn, PrepareRequest};
use crate::wire::{canonical_json, marshal_snapshot, round_trip, AgentSnapshot, Message, RpcError, TxnId};

pub(crate) enum AgentMsg {
    Command { cmd: Value, reply: oneshot::Sender<Result<CommandOutcome, BehaviorError>> },
    Move { dest: String, finish_on_arrival: bool },
    Finish { reply: Option<oneshot::Sender<Terminal>> },
}

/// How an agent ended and what it left behind.
#[derive(Debug, Clone)]
pub(crate) struct Terminal {
    pub outcome: RunState,
    pub result: Vec<u8>,
}

/// How a runner enters its first step.
pub(crate) enum Entry {
    /// Fresh arrival (or launch).
    Arrive,
    /// Restarted from the log after a crash; state is as of arrival.
    Reactivate,
    /// A move out did not commit; resume from the checkpoint.
    Resume(String),
    /// Recalled here: finish as soon as it is up.
    FinishNow,
}

struct Host {
    behavior: Box<dyn Behavior>,
    ctx: AgentContext,
}

/// Inserts the resident and spawns its runner.
pub(crate) fn start_agent(shared: &Arc<Shared>, snapshot: AgentSnapshot, entry: Entry) {
    let (tx, rx) = mpsc::channel(64);
    let resident =
        Resident { snapshot: snapshot.clone(), run_state: RunState::Active, tx: Some(tx), result: None, txn: None, streaming: false };
    shared.residents.lock().unwrap().insert(snapshot.agent_id, resident);
    let runner = Runner { shared: shared.clone(), snapshot, rx };
    shared.spawn(runner.run(entry));
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "behavior panicked".into())
}

/// Runs `f` on a blocking thread within the step budget. A panic or an
/// overrun loses the host: the agent is failed by the caller.
async fn call<R, F>(host: Host, budget: Duration, f: F) -> Result<(Host, R), BehaviorError>
where
    R: Send + 'static,
    F: FnOnce(&mut Host) -> R + Send + 'static,
{
    let task = tokio::task::spawn_blocking(move || {
        let mut host = host;
        let r = std::panic::catch_unwind(AssertUnwindSafe(|| f(&mut host)));
        (host, r)
    });
    match tokio::time::timeout(budget, task).await {
        Err(_) => Err(BehaviorError::new("STEP_BUDGET_EXCEEDED", format!("behavior call ran past {} ms", budget.as_millis()))),
        Ok(Err(e)) => Err(BehaviorError::new("BEHAVIOR_PANIC", e)),
        Ok(Ok((_, Err(p)))) => Err(BehaviorError::new("BEHAVIOR_PANIC", panic_message(&*p))),
        Ok(Ok((host, Ok(r)))) => Ok((host, r)),
    }
}

struct Runner {
    shared: Arc<Shared>,
    /// Last checkpointed snapshot; the state blob may lag behind the host.
    snapshot: AgentSnapshot,
    rx: mpsc::Receiver<AgentMsg>,
}

impl Runner {
    fn restore(&self) -> Result<Host, BehaviorError> {
        let s = &self.snapshot;
        let behavior = self.shared.behaviors.restore(&s.behavior_id, &s.state_blob)?;
        let ctx = AgentContext::new(
            s.agent_id,
            self.shared.cfg.station_id.clone(),
            self.shared.endpoint.clone(),
            self.shared.fs.clone(),
            self.shared.tables.clone(),
            s.itinerary.clone(),
            s.hop_index,
            s.travel_log.clone(),
        );
        Ok(Host { behavior, ctx })
    }

    async fn run(mut self, entry: Entry) {
        let host = match self.restore() {
            Ok(h) => h,
            Err(e) => return self.fail(e).await,
        };
        let budget = self.shared.budget();
        let finish_now = matches!(entry, Entry::FinishNow);
        let entered = match entry {
            Entry::Resume(reason) => call(host, budget, move |h| {
                h.behavior.on_move_aborted(&mut h.ctx, &reason);
                Ok(())
            })
            .await,
            Entry::Arrive | Entry::Reactivate | Entry::FinishNow => {
                call(host, budget, |h| h.behavior.on_arrive(&mut h.ctx)).await
            }
        };
        let mut host = match entered {
            Ok((h, Ok(()))) => h,
            Ok((_, Err(e))) | Err(e) => return self.fail(e).await,
        };
        self.flush(&mut host);
        if finish_now {
            return self.finish_recall(host, None).await;
        }

        let tick = Duration::from_millis(self.shared.cfg.tick_ms);
        loop {
            if let Ok(msg) = self.rx.try_recv() {
                match self.handle(host, msg).await {
                    Some(h) => {
                        host = h;
                        continue;
                    }
                    None => return,
                }
            }
            let (h, action) = match call(host, budget, |h| h.behavior.step(&mut h.ctx)).await {
                Ok((h, Ok(a))) => (h, a),
                Ok((_, Err(e))) | Err(e) => return self.fail(e).await,
            };
            host = h;
            self.flush(&mut host);
            match action {
                BehaviorAction::Finish(result) => return self.finish(Some(host), RunState::Finished, result, None).await,
                BehaviorAction::MoveTo(dest) if dest != self.shared.endpoint => match self.do_move(host, dest, false).await {
                    Some(h) => host = h,
                    None => return,
                },
                // Continue, or a no-op move to this very station.
                _ => {
                    tokio::select! {
                        msg = self.rx.recv() => {
                            let Some(msg) = msg else { return };
                            match self.handle(host, msg).await {
                                Some(h) => host = h,
                                None => return,
                            }
                        }
                        _ = tokio::time::sleep(tick) => {}
                    }
                }
            }
        }
    }

    /// Handles one message; `None` means the agent left or ended.
    async fn handle(&mut self, host: Host, msg: AgentMsg) -> Option<Host> {
        match msg {
            AgentMsg::Command { cmd, reply } => {
                match call(host, self.shared.budget(), move |h| h.behavior.handle_command(&mut h.ctx, &cmd)).await {
                    Ok((mut h, outcome)) => {
                        let _ = reply.send(outcome);
                        self.flush(&mut h);
                        Some(h)
                    }
                    Err(e) => {
                        let _ = reply.send(Err(e.clone()));
                        self.fail(e).await;
                        None
                    }
                }
            }
            AgentMsg::Move { dest, finish_on_arrival } => {
                if dest != self.shared.endpoint {
                    self.do_move(host, dest, finish_on_arrival).await
                } else if finish_on_arrival {
                    self.finish_recall(host, None).await;
                    None
                } else {
                    Some(host)
                }
            }
            AgentMsg::Finish { reply } => {
                self.finish_recall(host, reply).await;
                None
            }
        }
    }

    /// Publishes behavior notifications and the itinerary cursor.
    fn flush(&self, host: &mut Host) {
        let id = self.snapshot.agent_id;
        for event in host.ctx.take_outbox() {
            self.shared.events.emit("AGENT_EVENT", Some(id), event);
        }
        if let Some(r) = self.shared.residents.lock().unwrap().get_mut(&id) {
            r.snapshot.hop_index = host.ctx.hop_index();
        }
    }

    /// The full current snapshot, with the behavior's state saved.
    fn checkpoint(&self, host: &Host) -> Result<AgentSnapshot, BehaviorError> {
        let state = std::panic::catch_unwind(AssertUnwindSafe(|| host.behavior.save_state()))
            .map_err(|p| BehaviorError::new("BEHAVIOR_PANIC", panic_message(&*p)))?;
        Ok(AgentSnapshot {
            state_blob: state,
            itinerary: host.ctx.itinerary.clone(),
            hop_index: host.ctx.hop_index(),
            travel_log: host.ctx.travel_log.clone(),
            ..self.snapshot.clone()
        })
    }

    fn set_state(&self, state: RunState, txn: Option<TxnId>) {
        if let Some(r) = self.shared.residents.lock().unwrap().get_mut(&self.snapshot.agent_id) {
            r.run_state = state;
            r.txn = txn;
        }
    }

    async fn finish_recall(&mut self, host: Host, reply: Option<oneshot::Sender<Terminal>>) {
        match call(host, self.shared.budget(), |h| {
            let result = h.behavior.on_recall(&mut h.ctx);
            (result, ())
        })
        .await
        {
            Ok((h, (result, ()))) => self.finish(Some(h), RunState::Finished, result, reply).await,
            Err(e) => self.fail(e).await,
        }
    }

    async fn fail(&mut self, e: BehaviorError) {
        tracing::warn!(agent = %self.snapshot.agent_id, "agent failed: {e}");
        let diag = canonical_json(&json!({ "code": e.code, "message": e.message }));
        self.finish(None, RunState::Failed, diag, None).await;
    }

    /// Retires the agent here. Without a host the last checkpoint is kept.
    async fn finish(&mut self, host: Option<Host>, outcome: RunState, result: Vec<u8>, reply: Option<oneshot::Sender<Terminal>>) {
        let shared = self.shared.clone();
        let (outcome, result) = match host.as_ref().map(|h| self.checkpoint(h)) {
            Some(Ok(s)) => {
                self.snapshot = s;
                (outcome, result)
            }
            Some(Err(e)) => (RunState::Failed, canonical_json(&json!({ "code": e.code, "message": e.message }))),
            None => (outcome, result),
        };
        let id = self.snapshot.agent_id;
        let record = LogRecord::Retired {
            agent_id: id,
            outcome: outcome.as_str().to_string(),
            result: result.clone(),
            snapshot: marshal_snapshot(&self.snapshot),
        };
        if let Err(e) = shared.append(&record) {
            tracing::warn!(agent = %id, "cannot retire agent: {e}");
            return;
        }
        if let Some(r) = shared.residents.lock().unwrap().get_mut(&id) {
            r.snapshot = self.snapshot.clone();
            r.run_state = outcome;
            r.result = Some(result.clone());
            r.tx = None;
            r.txn = None;
        }
        shared.unregister_agent(&self.snapshot).await;
        let data = match outcome {
            RunState::Failed => serde_json::from_slice(&result).unwrap_or(Value::Null),
            _ => json!({ "hops": self.snapshot.travel_log.len(), "result_bytes": result.len() }),
        };
        shared.events.emit(outcome.as_str(), Some(id), data);
        if let Some(reply) = reply {
            let _ = reply.send(Terminal { outcome, result });
        }
    }

    /// Source side of an atomic move. Returns the host if the agent stays.
    async fn do_move(&mut self, host: Host, dest: String, finish_on_arrival: bool) -> Option<Host> {
        let shared = self.shared.clone();
        let checkpoint = match self.checkpoint(&host) {
            Ok(s) => s,
            Err(e) => {
                self.fail(e).await;
                return None;
            }
        };
        self.snapshot = checkpoint.clone();
        let id = checkpoint.agent_id;

        // 1. INIT, suspend, stamp departure.
        let departing = depart(&checkpoint, crate::clock::monotonic_ms());
        let departure = departing.travel_log.last().and_then(|e| e.departure);
        let bytes = marshal_snapshot(&departing);
        let txn = MoveTxn {
            txn_id: TxnId::random(),
            agent_id: id,
            source: shared.endpoint.clone(),
            dest: dest.clone(),
            phase: MovePhase::Init,
            snapshot_digest: crate::security::sha256_hex(&bytes),
        };
        let txn_id = txn.txn_id;
        if let Err(e) = shared.append(&LogRecord::Init { txn: txn.clone(), checkpoint: marshal_snapshot(&checkpoint) }) {
            tracing::warn!(agent = %id, "cannot start move: {e}");
            if shared.crashed() {
                return None;
            }
            let mut host = host;
            self.abort_locally(&mut host, &txn, AbortReason::new("LOG_ERROR")).await;
            return Some(host);
        }
        self.set_state(RunState::Moving, Some(txn_id));
        shared.events.emit("MOVE_STARTED", Some(id), json!({ "txn_id": txn_id, "dest": dest }));
        if !shared.step_done(MoveStep::Initiated, &txn_id) {
            return None;
        }

        // 2. PREPARE.
        let req = PrepareRequest {
            txn_id,
            agent_id: id,
            source: shared.endpoint.clone(),
            dest: dest.clone(),
            snapshot: bytes,
            finish_on_arrival,
        };
        let msg = Message::new("PREPARE", serde_json::to_value(&req).expect("prepare serializes")).with_txn(txn_id.to_hex());
        let reply = round_trip(&dest, &msg, Duration::from_millis(shared.cfg.prepare_timeout_ms)).await;
        if shared.crashed() {
            return None;
        }
        let refused = match reply {
            Ok(m) if m.kind == "PREPARED" => None,
            Ok(m) => {
                let code = m.payload.get("code").and_then(Value::as_str).unwrap_or("UNKNOWN").to_string();
                Some(AbortReason::rejected(&code))
            }
            Err(RpcError::Timeout(_)) => Some(AbortReason::new("TIMEOUT")),
            Err(_) => Some(AbortReason::new("DEST_UNREACHABLE")),
        };
        if let Some(reason) = refused {
            let mut host = host;
            if let Err(e) = shared.append(&LogRecord::Abort { txn_id }) {
                tracing::warn!(agent = %id, "cannot log abort: {e}");
                return None;
            }
            let s = shared.clone();
            let d = dest.clone();
            shared.spawn(async move { super::moves::send_abort(&s, &d, txn_id).await });
            self.abort_locally(&mut host, &txn, reason).await;
            return Some(host);
        }

        // 3. COMMIT decision: the local instance is gone from here on.
        if let Err(e) = shared.append(&LogRecord::Commit { txn_id }) {
            tracing::warn!(agent = %id, "cannot log commit: {e}");
            return None;
        }
        drop(host);
        shared.residents.lock().unwrap().remove(&id);
        shared.events.emit("DEPARTED", Some(id), json!({ "txn_id": txn_id, "dest": dest, "departure": departure }));
        shared.events.emit("MOVE_COMMITTED", Some(id), json!({ "txn_id": txn_id, "dest": dest }));
        shared.unregister_agent(&checkpoint).await;
        if !shared.step_done(MoveStep::Decided, &txn_id) {
            return None;
        }

        // 4. COMMIT to dest; 5. FINALIZED on ack.
        super::moves::push_commit(&shared, Outgoing { txn, next_try: 0, backoff: shared.cfg.backoff_min_ms }).await;
        None
    }

    async fn abort_locally(&mut self, host: &mut Host, txn: &MoveTxn, reason: AbortReason) {
        let shared = &self.shared;
        self.set_state(RunState::Active, None);
        let text = reason.to_string();
        tracing::info!(agent = %txn.agent_id, dest = %txn.dest, "move aborted: {text}");
        // The behavior is told synchronously; a slow hook is not worth failing over.
        let r = std::panic::catch_unwind(AssertUnwindSafe(|| host.behavior.on_move_aborted(&mut host.ctx, &text)));
        if r.is_err() {
            tracing::warn!(agent = %txn.agent_id, "on_move_aborted panicked");
        }
        shared.events.emit(
            "MOVE_ABORTED",
            Some(txn.agent_id),
            json!({ "txn_id": txn.txn_id, "dest": txn.dest, "reason": reason }),
        );
        self.flush(host);
    }
}
