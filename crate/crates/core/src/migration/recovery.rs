//! Custody decisions from a replayed log.

use std::collections::{BTreeMap, HashMap};

use super::{arrive, LogRecord, MoveTxn};
use crate::wire::{unmarshal_snapshot, AgentId, AgentSnapshot, TxnId};

/// How a recovered agent re-enters the station.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Restart {
    /// Was running here; activate again without a new travel entry.
    Reactivate,
    /// A move out never committed; resume from the checkpoint.
    ResumeAborted,
    /// Arrived on a recall; finish on activation.
    FinishOnArrival,
    /// Finished or failed here earlier.
    Retired { outcome: String, result: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveredAgent {
    pub snapshot: AgentSnapshot,
    pub restart: Restart,
}

/// A dest-side snapshot waiting for the source's decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hold {
    pub txn: MoveTxn,
    pub snapshot: Vec<u8>,
    pub finish_on_arrival: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryPlan {
    /// Agents this station owns, by id.
    pub agents: BTreeMap<AgentId, RecoveredAgent>,
    /// Source txns with no decision: the caller must log ABORT (and may
    /// tell the destination).
    pub abort: Vec<MoveTxn>,
    /// Source txns committed but never acknowledged: resend COMMIT.
    pub unfinalized: Vec<MoveTxn>,
    /// Dest txns prepared but undecided: ask the source.
    pub in_doubt: Vec<Hold>,
}

enum Custody {
    Here(RecoveredAgent),
    MovingOut { txn_id: TxnId, checkpoint: AgentSnapshot },
    Gone,
}

/// Works out, record by record, which agents this station owns. The last
/// custody-changing record for an agent wins.
pub fn plan_recovery(records: &[LogRecord], station_id: &str) -> Result<RecoveryPlan, String> {
    let mut txns: HashMap<TxnId, MoveTxn> = HashMap::new();
    let mut custody: BTreeMap<AgentId, Custody> = BTreeMap::new();
    let mut holds: BTreeMap<TxnId, Hold> = BTreeMap::new();
    let mut committed_out: BTreeMap<TxnId, MoveTxn> = BTreeMap::new();
    let decode = |bytes: &[u8]| unmarshal_snapshot(bytes).map_err(|e| e.to_string());

    for rec in records {
        match rec {
            LogRecord::Init { txn, checkpoint } => {
                txns.insert(txn.txn_id, txn.clone());
                custody.insert(txn.agent_id, Custody::MovingOut { txn_id: txn.txn_id, checkpoint: decode(checkpoint)? });
            }
            LogRecord::Prepared { txn, snapshot, finish_on_arrival } => {
                txns.insert(txn.txn_id, txn.clone());
                holds.insert(
                    txn.txn_id,
                    Hold { txn: txn.clone(), snapshot: snapshot.clone(), finish_on_arrival: *finish_on_arrival },
                );
            }
            LogRecord::Commit { txn_id } => {
                let txn = txns.get(txn_id).ok_or("COMMIT for unknown txn")?;
                custody.insert(txn.agent_id, Custody::Gone);
                committed_out.insert(*txn_id, txn.clone());
            }
            LogRecord::Committed { txn_id, arrival } => {
                let hold = holds.remove(txn_id).ok_or("COMMITTED without PREPARED")?;
                let snapshot = arrive(&decode(&hold.snapshot)?, station_id, *arrival);
                let restart = if hold.finish_on_arrival { Restart::FinishOnArrival } else { Restart::Reactivate };
                custody.insert(hold.txn.agent_id, Custody::Here(RecoveredAgent { snapshot, restart }));
            }
            LogRecord::Abort { txn_id } => {
                if holds.remove(txn_id).is_some() {
                    continue;
                }
                let txn = txns.get(txn_id).ok_or("ABORT for unknown txn")?;
                if let Some(Custody::MovingOut { txn_id: t, checkpoint }) = custody.remove(&txn.agent_id) {
                    if t == *txn_id {
                        let agent = RecoveredAgent { snapshot: checkpoint, restart: Restart::ResumeAborted };
                        custody.insert(txn.agent_id, Custody::Here(agent));
                    } else {
                        custody.insert(txn.agent_id, Custody::MovingOut { txn_id: t, checkpoint });
                    }
                }
            }
            LogRecord::Finalized { txn_id } => {
                committed_out.remove(txn_id);
            }
            LogRecord::Retired { agent_id, outcome, result, snapshot } => {
                let agent = RecoveredAgent {
                    snapshot: decode(snapshot)?,
                    restart: Restart::Retired { outcome: outcome.clone(), result: result.clone() },
                };
                custody.insert(*agent_id, Custody::Here(agent));
            }
        }
    }

    let mut plan = RecoveryPlan {
        unfinalized: committed_out.into_values().collect(),
        in_doubt: holds.into_values().collect(),
        ..Default::default()
    };
    for (agent_id, c) in custody {
        match c {
            Custody::Here(agent) => {
                plan.agents.insert(agent_id, agent);
            }
            Custody::MovingOut { txn_id, checkpoint } => {
                plan.abort.push(txns[&txn_id].clone());
                plan.agents.insert(agent_id, RecoveredAgent { snapshot: checkpoint, restart: Restart::ResumeAborted });
            }
            Custody::Gone => {}
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::migration::MovePhase;
    use crate::security::generate_keypair;
    use crate::wire::{marshal_snapshot, BundleRef, ServiceKind, TravelEntry};

    fn snapshot(agent: AgentId, station: &str) -> AgentSnapshot {
        let key = generate_keypair(Some([3; 32]));
        let cert = key.certificate("owner");
        AgentSnapshot {
            agent_id: agent,
            behavior_id: "b/1".into(),
            bundle_ref: BundleRef {
                url: "http://x/bundles/00".into(),
                sha256: "00".into(),
                signature: crate::security::sign_bundle(b"x", &key, &cert).unwrap(),
            },
            owner_cert: cert,
            service_kind: ServiceKind::Service,
            open_access: false,
            state_blob: vec![],
            itinerary: vec![],
            hop_index: 0,
            travel_log: vec![TravelEntry { station_id: station.into(), arrival: 10, departure: None }],
        }
    }

    fn txn(n: u8, agent: AgentId, phase: MovePhase) -> MoveTxn {
        MoveTxn {
            txn_id: TxnId::from_bytes([n; 16]),
            agent_id: agent,
            source: "a".into(),
            dest: "b".into(),
            phase,
            snapshot_digest: String::new(),
        }
    }

    const AGENT: AgentId = AgentId::from_bytes([5; 16]);

    #[test]
    fn undecided_source_aborts_and_resumes() {
        let s = snapshot(AGENT, "A");
        let t = txn(1, AGENT, MovePhase::Init);
        let plan = plan_recovery(&[LogRecord::Init { txn: t.clone(), checkpoint: marshal_snapshot(&s) }], "A").unwrap();
        assert_eq!(plan.abort, [t]);
        assert_eq!(plan.agents[&AGENT], RecoveredAgent { snapshot: s, restart: Restart::ResumeAborted });
    }

    #[test]
    fn committed_source_gives_up_custody() {
        let s = snapshot(AGENT, "A");
        let t = txn(1, AGENT, MovePhase::Init);
        let recs = [LogRecord::Init { txn: t.clone(), checkpoint: marshal_snapshot(&s) }, LogRecord::Commit { txn_id: t.txn_id }];
        let plan = plan_recovery(&recs, "A").unwrap();
        assert!(plan.agents.is_empty());
        assert_eq!(plan.unfinalized, std::slice::from_ref(&t));
        let mut recs = recs.to_vec();
        recs.push(LogRecord::Finalized { txn_id: t.txn_id });
        assert!(plan_recovery(&recs, "A").unwrap().unfinalized.is_empty());
    }

    #[test]
    fn dest_holds_and_activations() {
        let mut s = snapshot(AGENT, "A");
        s.travel_log[0].departure = Some(20);
        let t = txn(2, AGENT, MovePhase::Prepared);
        let prepared = LogRecord::Prepared { txn: t.clone(), snapshot: marshal_snapshot(&s), finish_on_arrival: false };
        let plan = plan_recovery(std::slice::from_ref(&prepared), "B").unwrap();
        assert!(plan.agents.is_empty());
        assert_eq!(plan.in_doubt.len(), 1);

        let plan = plan_recovery(&[prepared.clone(), LogRecord::Committed { txn_id: t.txn_id, arrival: 25 }], "B").unwrap();
        assert!(plan.in_doubt.is_empty());
        let got = &plan.agents[&AGENT];
        assert_eq!(got.restart, Restart::Reactivate);
        assert_eq!(got.snapshot.travel_log.len(), 2);
        assert_eq!(got.snapshot.travel_log[1], TravelEntry { station_id: "B".into(), arrival: 25, departure: None });

        let plan = plan_recovery(&[prepared, LogRecord::Abort { txn_id: t.txn_id }], "B").unwrap();
        assert!(plan.agents.is_empty() && plan.in_doubt.is_empty());
    }

    #[test]
    fn round_trip_through_a_station() {
        // Arrives, leaves, comes back, leaves again but undecided.
        let s = snapshot(AGENT, "A");
        let (t1, t2, t3) = (txn(1, AGENT, MovePhase::Prepared), txn(2, AGENT, MovePhase::Init), txn(3, AGENT, MovePhase::Prepared));
        let t4 = txn(4, AGENT, MovePhase::Init);
        let bytes = marshal_snapshot(&s);
        let recs = vec![
            LogRecord::Prepared { txn: t1.clone(), snapshot: bytes.clone(), finish_on_arrival: false },
            LogRecord::Committed { txn_id: t1.txn_id, arrival: 11 },
            LogRecord::Init { txn: t2.clone(), checkpoint: bytes.clone() },
            LogRecord::Commit { txn_id: t2.txn_id },
            LogRecord::Finalized { txn_id: t2.txn_id },
            LogRecord::Prepared { txn: t3.clone(), snapshot: bytes.clone(), finish_on_arrival: true },
            LogRecord::Committed { txn_id: t3.txn_id, arrival: 30 },
        ];
        let plan = plan_recovery(&recs, "B").unwrap();
        assert_eq!(plan.agents[&AGENT].restart, Restart::FinishOnArrival);

        let mut more = recs.clone();
        more.push(LogRecord::Init { txn: t4.clone(), checkpoint: bytes.clone() });
        more.push(LogRecord::Abort { txn_id: t4.txn_id });
        let plan = plan_recovery(&more, "B").unwrap();
        assert_eq!(plan.agents[&AGENT].restart, Restart::ResumeAborted);
        assert!(plan.abort.is_empty());

        more.push(LogRecord::Retired { agent_id: AGENT, outcome: "FINISHED".into(), result: b"r".to_vec(), snapshot: bytes });
        let plan = plan_recovery(&more, "B").unwrap();
        assert!(matches!(plan.agents[&AGENT].restart, Restart::Retired { .. }));
    }
}
