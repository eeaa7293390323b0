//! Proptest strategies for wire values.

use agentmesh::security::{generate_keypair, BundleSignature, Certificate};
use agentmesh::wire::{AgentId, AgentSnapshot, BundleRef, ServiceKind, TravelEntry};
use proptest::collection::{btree_map, vec};
use proptest::prelude::*;
use serde_json::{Map, Number, Value};

fn leaf() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(|n| Value::Number(n.into())),
        any::<u64>().prop_map(|n| Value::Number(n.into())),
        // Finite values whose shortest decimal form parses back exactly.
        (-1_000_000i64..1_000_000, 1u32..4).prop_map(|(n, d)| {
            let f = n as f64 / 10f64.powi(d as i32);
            Number::from_f64(f).map(Value::Number).unwrap_or(Value::Null)
        }),
        "\\PC{0,24}".prop_map(Value::String),
        ".{0,8}".prop_map(Value::String),
    ]
}

pub fn json_value() -> impl Strategy<Value = Value> {
    leaf().prop_recursive(4, 64, 6, |inner| {
        prop_oneof![
            vec(inner.clone(), 0..6).prop_map(Value::Array),
            btree_map("\\PC{0,10}", inner, 0..6).prop_map(|m| Value::Object(m.into_iter().collect::<Map<_, _>>())),
        ]
    })
}

pub fn json_object() -> impl Strategy<Value = Value> {
    btree_map("\\PC{0,12}", json_value(), 0..8).prop_map(|m| Value::Object(m.into_iter().collect()))
}

fn cert() -> impl Strategy<Value = Certificate> {
    (any::<[u8; 32]>(), "[a-z][a-z0-9-]{0,11}").prop_map(|(seed, subject)| generate_keypair(Some(seed)).certificate(&subject))
}

/// A well-formed travel log: each stay departs no earlier than it arrived,
/// and only the last stay may be open.
pub fn travel_log() -> impl Strategy<Value = Vec<TravelEntry>> {
    (vec(("[a-z]{1,8}", 0u64..5_000, 0u64..5_000), 0..8), any::<bool>(), 1_600_000_000_000u64..1_900_000_000_000).prop_map(
        |(stays, open_tail, start)| {
            let mut t = start;
            let n = stays.len();
            stays
                .into_iter()
                .enumerate()
                .map(|(i, (station_id, gap, dwell))| {
                    t += gap;
                    let arrival = t;
                    t += dwell;
                    let departure = if i + 1 == n && open_tail { None } else { Some(t) };
                    TravelEntry { station_id, arrival, departure }
                })
                .collect()
        },
    )
}

pub fn snapshot() -> impl Strategy<Value = AgentSnapshot> {
    (
        any::<[u8; 16]>(),
        "[a-z-]{1,16}/[0-9]",
        ("[a-z:/0-9.]{0,30}", "[0-9a-f]{64}", cert(), any::<[u8; 32]>(), any::<[u8; 32]>()),
        cert(),
        prop_oneof![Just(ServiceKind::Service), Just(ServiceKind::Private)],
        any::<bool>(),
        vec(any::<u8>(), 0..256),
        vec("[a-z0-9.:]{1,20}", 0..6),
        any::<prop::sample::Index>(),
        travel_log(),
    )
        .prop_map(|(id, behavior_id, (url, sha256, signer_cert, lo, hi), owner_cert, service_kind, open_access, state_blob, itinerary, hop, travel_log)| {
            let mut sig = [0u8; 64];
            sig[..32].copy_from_slice(&lo);
            sig[32..].copy_from_slice(&hi);
            let hop_index = hop.index(itinerary.len() + 1);
            AgentSnapshot {
                agent_id: AgentId::from_bytes(id),
                behavior_id,
                bundle_ref: BundleRef { url, sha256, signature: BundleSignature { signer_cert, sig } },
                owner_cert,
                service_kind,
                open_access,
                state_blob,
                itinerary,
                hop_index,
                travel_log,
            }
        })
}
