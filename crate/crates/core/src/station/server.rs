//! The station's wire port: migration messages, status, and attach sessions.

use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::oneshot;

use super::runner::{AgentMsg, Terminal};
use super::{moves, stream, Shared};
use crate::agents::CommandOutcome;
use crate::clock::now_ms;
use crate::security::ChallengeOutcome;
use crate::wire::{b64, b64_encode, recv_message, send_message, AgentId, Message};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

pub(crate) async fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    loop {
        match listener.accept().await {
            Ok((conn, _)) => {
                conn.set_nodelay(true).ok();
                let s = shared.clone();
                shared.spawn(async move { serve(s, conn).await });
            }
            Err(e) => {
                tracing::warn!("accept failed: {e}");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

/// Request/reply until the peer hangs up or switches to an attach session.
async fn serve(shared: Arc<Shared>, mut conn: TcpStream) {
    loop {
        let msg = match recv_message(&mut conn).await {
            Ok(Some(m)) => m,
            Ok(None) => return,
            Err(e) => {
                let _ = send_message(&mut conn, &Message::error(e.code(), &e)).await;
                return;
            }
        };
        let reply = match msg.kind.as_str() {
            "PING" => Some(Message::new("PONG", json!({ "station_id": shared.cfg.station_id }))),
            "PREPARE" => moves::on_prepare(&shared, &msg).await,
            "COMMIT" => moves::on_commit(&shared, &msg).await,
            "ABORT" => Some(moves::on_abort(&shared, &msg).await),
            "TXN_STATUS" => Some(moves::on_txn_status(&shared, &msg)),
            "STATUS" => Some(Message::new("STATION_STATUS", json!(shared.status()))),
            "ATTACH" => return attach(&shared, conn, &msg).await,
            other => Some(Message::error("UNKNOWN_MESSAGE", format!("unexpected message {other}"))),
        };
        // No reply means the station crashed mid-request.
        let Some(reply) = reply else { return };
        if shared.crashed() || send_message(&mut conn, &reply).await.is_err() {
            return;
        }
    }
}

#[derive(Deserialize)]
struct AttachReq {
    agent_id: AgentId,
}

#[derive(Deserialize)]
struct Proof {
    #[serde(with = "b64")]
    nonce: Vec<u8>,
    #[serde(with = "b64")]
    signature: Vec<u8>,
}

fn finished_msg(t: &Terminal) -> Message {
    Message::new("FINISHED", json!({ "outcome": t.outcome, "result": b64_encode(&t.result) }))
}

fn terminal_of(shared: &Shared, agent: &AgentId) -> Option<Terminal> {
    let residents = shared.residents.lock().unwrap();
    let r = residents.get(agent)?;
    r.run_state.is_terminal().then(|| Terminal { outcome: r.run_state, result: r.result.clone().unwrap_or_default() })
}

/// Challenge-response with the owner key unless the agent is open access.
async fn handshake(shared: &Shared, conn: &mut TcpStream, agent: AgentId) -> Result<(), Message> {
    let (open, owner) = {
        let residents = shared.residents.lock().unwrap();
        let r = residents.get(&agent).ok_or_else(|| Message::error("NOT_RESIDENT", format!("agent {agent} is not here")))?;
        (r.snapshot.open_access, r.snapshot.owner_cert.clone())
    };
    if open {
        return Ok(());
    }
    let nonce = shared.challenges.lock().unwrap().issue(agent, now_ms());
    send_message(conn, &Message::new("CHALLENGE", json!({ "nonce": b64_encode(&nonce) })))
        .await
        .map_err(|e| Message::error(e.code(), &e))?;
    let reply = tokio::time::timeout(HANDSHAKE_TIMEOUT, recv_message(conn))
        .await
        .map_err(|_| Message::error("ACCESS_DENIED", "no proof within the handshake deadline"))?;
    let proof = match reply {
        Ok(Some(m)) if m.kind == "PROOF" => {
            serde_json::from_value::<Proof>(m.payload).map_err(|e| Message::error("ACCESS_DENIED", format!("bad proof: {e}")))?
        }
        _ => return Err(Message::error("ACCESS_DENIED", "expected PROOF")),
    };
    let outcome = shared.challenges.lock().unwrap().verify(agent, &proof.nonce, &proof.signature, &owner, now_ms());
    match outcome {
        Ok(ChallengeOutcome::Ok) => Ok(()),
        Ok(ChallengeOutcome::Rejected) => Err(Message::error("ACCESS_DENIED", "proof does not verify under the owner certificate")),
        Err(e) => Err(Message::error("NONCE_UNKNOWN", e)),
    }
}

async fn attach(shared: &Arc<Shared>, mut conn: TcpStream, msg: &Message) {
    let agent = match serde_json::from_value::<AttachReq>(msg.payload.clone()) {
        Ok(r) => r.agent_id,
        Err(e) => {
            let _ = send_message(&mut conn, &Message::error("MALFORMED", e)).await;
            return;
        }
    };
    if let Err(reply) = handshake(shared, &mut conn, agent).await {
        let _ = send_message(&mut conn, &reply).await;
        return;
    }
    if let Some(t) = terminal_of(shared, &agent) {
        let _ = send_message(&mut conn, &finished_msg(&t)).await;
        return;
    }
    let hello = {
        let residents = shared.residents.lock().unwrap();
        let Some(r) = residents.get(&agent) else { return };
        json!({
            "agent_id": agent,
            "behavior_id": r.snapshot.behavior_id,
            "run_state": r.run_state,
            "station_id": shared.cfg.station_id,
        })
    };
    if send_message(&mut conn, &Message::new("ATTACHED", hello)).await.is_err() {
        return;
    }
    shared.events.emit("ATTACHED", Some(agent), Value::Null);

    loop {
        let msg = match recv_message(&mut conn).await {
            Ok(Some(m)) => m,
            _ => return,
        };
        let (reply, close) = session_request(shared, agent, msg).await;
        if send_message(&mut conn, &reply).await.is_err() || close {
            return;
        }
    }
}

/// What to say when the agent's runner is gone.
fn gone(shared: &Shared, agent: &AgentId) -> (Message, bool) {
    match terminal_of(shared, agent) {
        Some(t) => (finished_msg(&t), true),
        None => (Message::error("NOT_RESIDENT", "agent left this station"), true),
    }
}

fn sender(shared: &Shared, agent: &AgentId) -> Option<tokio::sync::mpsc::Sender<AgentMsg>> {
    shared.residents.lock().unwrap().get(agent).and_then(|r| r.tx.clone())
}

async fn finish(shared: &Shared, agent: AgentId) -> (Message, bool) {
    let Some(tx) = sender(shared, &agent) else { return gone(shared, &agent) };
    let (reply, rx) = oneshot::channel();
    if tx.send(AgentMsg::Finish { reply: Some(reply) }).await.is_err() {
        return gone(shared, &agent);
    }
    match rx.await {
        Ok(t) => (finished_msg(&t), true),
        Err(_) => gone(shared, &agent),
    }
}

async fn session_request(shared: &Arc<Shared>, agent: AgentId, msg: Message) -> (Message, bool) {
    match msg.kind.as_str() {
        "COMMAND" => {
            let Some(tx) = sender(shared, &agent) else { return gone(shared, &agent) };
            let (reply, rx) = oneshot::channel();
            if tx.send(AgentMsg::Command { cmd: msg.payload, reply }).await.is_err() {
                return gone(shared, &agent);
            }
            match rx.await {
                Ok(Ok(CommandOutcome::Reply(v))) => (Message::new("REPLY", v), false),
                Ok(Ok(CommandOutcome::Stream(plan))) => match stream::open(shared, agent, plan).await {
                    Ok(v) => (Message::new("STREAM_READY", v), false),
                    Err((code, m)) => (Message::error(&code, m), false),
                },
                Ok(Err(e)) => {
                    let close = terminal_of(shared, &agent).is_some();
                    (Message::error(&e.code, &e.message), close)
                }
                Err(_) => gone(shared, &agent),
            }
        }
        "FINISH" => finish(shared, agent).await,
        "MOVE" | "RECALL" => {
            let key = if msg.kind == "MOVE" { "dest" } else { "origin" };
            let Some(dest) = msg.payload.get(key).and_then(Value::as_str) else {
                return (Message::error("BAD_COMMAND", format!("{} needs {key}", msg.kind)), false);
            };
            let recall = msg.kind == "RECALL";
            if recall && dest == shared.endpoint {
                return finish(shared, agent).await;
            }
            match shared.request_move(&agent, dest, recall) {
                Ok(()) => (Message::new("MOVING", json!({ "dest": dest, "finish_on_arrival": recall })), recall),
                Err((_, code, m)) => (Message::error(code, m), false),
            }
        }
        "STATE" => {
            let residents = shared.residents.lock().unwrap();
            match residents.get(&agent) {
                Some(r) => (
                    Message::new(
                        "STATE",
                        json!({ "run_state": r.run_state, "hop_index": r.snapshot.hop_index, "travel_log": r.snapshot.travel_log }),
                    ),
                    false,
                ),
                None => (Message::error("NOT_RESIDENT", "agent left this station"), true),
            }
        }
        other => (Message::error("UNKNOWN_MESSAGE", format!("unexpected message {other} in session")), false),
    }
}
