//! Randomized checks of the encoding, security, registry and query
//! invariants.

mod common;

use std::collections::BTreeMap;

use agentmesh::agents::search::weigh;
use agentmesh::agents::sandbox::Sandbox;
use agentmesh::agents::tables::{compare, Clause, Op, Predicate};
use agentmesh::codeserver::BundleStore;
use agentmesh::lookup::{EventKind, Filter, LeasePolicy, Registry, ServiceInfo, ServiceType};
use agentmesh::security::{generate_keypair, sign_bundle, verify_bundle, ChallengeBook, ChallengeOutcome, Verification};
use agentmesh::wire::{decode_frame, encode_frame, marshal_snapshot, read_frame, unmarshal_snapshot, AgentId, FrameError};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

use common::arb;

fn deep() -> ProptestConfig {
    ProptestConfig { cases: 1000, ..ProptestConfig::default() }
}

fn light() -> ProptestConfig {
    ProptestConfig { cases: 256, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(deep())]

    #[test]
    fn frame_round_trip(m in arb::json_object()) {
        let frame = encode_frame(&m).unwrap();
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        prop_assert_eq!(len, frame.len() - 4);
        prop_assert_eq!(decode_frame(&mut &frame[..]).unwrap(), m.clone());
        prop_assert_eq!(encode_frame(&m).unwrap(), frame);
    }

    #[test]
    fn snapshot_round_trip_is_byte_deterministic(s in arb::snapshot()) {
        let bytes = marshal_snapshot(&s);
        let back = unmarshal_snapshot(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(marshal_snapshot(&back), bytes.clone());
        // Re-encoding after a trip through a generic value changes nothing.
        let generic: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        prop_assert_eq!(agentmesh::wire::canonical_json(&generic), bytes);
        prop_assert_eq!(back.hop_index, s.hop_index);
        prop_assert_eq!(back.travel_log, s.travel_log);
    }
}

proptest! {
    #![proptest_config(light())]

    #[test]
    fn truncated_frames_are_reported(m in arb::json_object(), cut in any::<prop::sample::Index>()) {
        let frame = encode_frame(&m).unwrap();
        let at = cut.index(frame.len());
        prop_assert!(matches!(decode_frame(&mut &frame[..at]), Err(FrameError::Truncated)));
    }

    #[test]
    fn async_reader_agrees_with_blocking_decoder(ms in proptest::collection::vec(arb::json_object(), 1..5)) {
        let mut stream = Vec::new();
        for m in &ms {
            stream.extend(encode_frame(m).unwrap());
        }
        let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
        let got = rt.block_on(async {
            let mut r = &stream[..];
            let mut out = Vec::new();
            while let Some(v) = read_frame(&mut r).await.unwrap() {
                out.push(v);
            }
            out
        });
        prop_assert_eq!(got, ms);
    }

    #[test]
    fn snapshot_with_backwards_log_is_refused(s in arb::snapshot()) {
        prop_assume!(s.travel_log.len() >= 2);
        let mut bad = s.clone();
        bad.travel_log[1].arrival = bad.travel_log[0].arrival.saturating_sub(1);
        prop_assume!(bad.travel_log[0].departure.is_some_and(|d| d > bad.travel_log[1].arrival));
        prop_assert!(unmarshal_snapshot(&marshal_snapshot(&bad)).is_err());
    }

    #[test]
    fn signature_covers_every_byte(seed in any::<[u8; 32]>(), b in proptest::collection::vec(any::<u8>(), 0..512), flip in any::<prop::sample::Index>(), extra in any::<u8>()) {
        let key = generate_keypair(Some(seed));
        let cert = key.certificate("signer");
        let sig = sign_bundle(&b, &key, &cert).unwrap();
        prop_assert_eq!(verify_bundle(&b, &sig), Verification::Ok);
        let mut other = b.clone();
        if other.is_empty() {
            other.push(extra);
        } else {
            let i = flip.index(other.len());
            other[i] ^= extra | 1;
        }
        prop_assert_eq!(verify_bundle(&other, &sig), Verification::Tampered);
    }

    #[test]
    fn nonce_is_good_for_one_verification(seed in any::<[u8; 32]>(), now in 0u64..1_000_000, tries in 2usize..5) {
        let key = generate_keypair(Some(seed));
        let cert = key.certificate("owner");
        let agent = AgentId::random();
        let mut book = ChallengeBook::new(60_000);
        let nonce = book.issue(agent, now);
        let answer = agentmesh::security::answer_challenge(&nonce, &key);
        let oks = (0..tries).filter(|k| book.verify(agent, &nonce, &answer, &cert, now + *k as u64) == Ok(ChallengeOutcome::Ok)).count();
        prop_assert_eq!(oks, 1);
    }

    #[test]
    fn stored_bundles_come_back_by_digest(blobs in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..2048), 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let store = BundleStore::open(dir.path(), "http://127.0.0.1:1").unwrap();
        for b in &blobs {
            let digest = store.put(b).unwrap();
            let expect: String = Sha256::digest(b).iter().map(|x| format!("{x:02x}")).collect();
            prop_assert_eq!(&digest, &expect);
            prop_assert_eq!(store.put(b).unwrap(), digest.clone());
        }
        for b in &blobs {
            let digest: String = Sha256::digest(b).iter().map(|x| format!("{x:02x}")).collect();
            prop_assert_eq!(&store.get(&digest).unwrap(), b);
        }
    }

    #[test]
    fn sandbox_never_resolves_outside_root(parts in proptest::collection::vec(prop_oneof![Just(".."), Just("."), Just("a"), Just("b"), Just(""), Just("/"), Just("link")], 0..8)) {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("root");
        std::fs::create_dir_all(root.join("a/b")).unwrap();
        #[cfg(unix)]
        std::os::unix::fs::symlink(dir.path(), root.join("a/link")).unwrap();
        let fs = Sandbox::new(&root).unwrap();
        let rel = parts.join("/");
        if let Ok(p) = fs.resolve(&rel) {
            prop_assert!(p.starts_with(fs.root()), "{rel:?} resolved to {p:?}");
        }
    }

    #[test]
    fn weight_is_the_brute_force_term_count(
        words in proptest::collection::vec(prop_oneof![Just("mesh"), Just("Mesh"), Just("MESHY"), Just("grid"), Just("x9"), Just("héllo"), Just("_"), Just("a-b")], 0..40),
        seps in proptest::collection::vec(prop_oneof![Just(" "), Just(""), Just("."), Just("\n"), Just("é")], 40),
        terms in proptest::collection::vec(prop_oneof![Just("mesh"), Just("grid"), Just("x9"), Just("a"), Just("b"), Just("meshy")], 1..4),
    ) {
        let mut text = String::new();
        for (w, s) in words.iter().zip(&seps) {
            text.push_str(w);
            text.push_str(s);
        }
        let terms: Vec<String> = terms.into_iter().map(String::from).collect();
        let expect: u64 = terms.iter().map(|t| brute_count(&text, t)).sum();
        prop_assert_eq!(weigh(&text, &terms), expect);
    }

    #[test]
    fn predicate_text_round_trips(clauses in proptest::collection::vec(("[a-z_][a-z0-9_]{0,8}", 0usize..6, "[^\"]{0,12}"), 0..4)) {
        let p = Predicate(clauses.iter().map(|(c, op, v)| Clause::new(c, Op::ALL[*op], v)).collect());
        prop_assert_eq!(Predicate::parse(&p.to_text()).unwrap(), p);
    }

    #[test]
    fn comparison_is_a_total_order_per_pair(a in "-?[0-9]{0,3}(\\.[0-9]{0,2})?|[a-zA-Z0-9]{0,4}", b in "-?[0-9]{0,3}(\\.[0-9]{0,2})?|[a-zA-Z0-9]{0,4}") {
        let holds = |op| Clause::new("c", op, &b).matches(&a);
        prop_assert_eq!([holds(Op::Lt), holds(Op::Eq), holds(Op::Gt)].iter().filter(|x| **x).count(), 1);
        prop_assert_eq!(holds(Op::Ne), !holds(Op::Eq));
        prop_assert_eq!(holds(Op::Le), holds(Op::Lt) || holds(Op::Eq));
        prop_assert_eq!(holds(Op::Ge), holds(Op::Gt) || holds(Op::Eq));
        prop_assert_eq!(compare(&a, &b), compare(&b, &a).reverse());
    }
}

/// Occurrences of `term` as a whole lowercase ASCII-alphanumeric token.
fn brute_count(text: &str, term: &str) -> u64 {
    let lower = text.to_ascii_lowercase();
    let bytes = lower.as_bytes();
    let mut n = 0;
    let mut from = 0;
    while let Some(pos) = lower[from..].find(term) {
        let start = from + pos;
        let end = start + term.len();
        let left_ok = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
        let right_ok = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        if left_ok && right_ok {
            n += 1;
        }
        from = start + 1;
    }
    n
}

#[derive(Debug, Clone)]
enum RegOp {
    Register(usize, u64),
    Renew(usize, u64),
    Unregister(usize),
    Advance(u64),
    Sweep,
}

fn reg_op() -> impl Strategy<Value = RegOp> {
    prop_oneof![
        (0usize..3, 100u64..2_000).prop_map(|(i, d)| RegOp::Register(i, d)),
        (0usize..3, 100u64..2_000).prop_map(|(i, d)| RegOp::Renew(i, d)),
        (0usize..3).prop_map(RegOp::Unregister),
        (0u64..1_500).prop_map(RegOp::Advance),
        Just(RegOp::Sweep),
    ]
}

proptest! {
    #![proptest_config(light())]

    /// Lookup never shows a lapsed lease or two records for one id, and
    /// each lapse produces exactly one EXPIRED event.
    #[test]
    fn registry_is_safe_under_any_schedule(ops in proptest::collection::vec(reg_op(), 1..60)) {
        let reg = Registry::new(LeasePolicy { min_lease_ms: 100, max_lease_ms: 10_000 });
        let mut events = reg.subscribe(Filter::any());
        let ids = ["a", "b", "c"];
        let mut now = 1_000u64;
        // Model: live expiry per id.
        let mut model: BTreeMap<&str, u64> = BTreeMap::new();
        let mut lapses = 0usize;
        let lapse = |model: &mut BTreeMap<&str, u64>, id: &str, now: u64| {
            if model.get(id).is_some_and(|&e| e < now) {
                model.remove(id);
                true
            } else {
                false
            }
        };
        for op in ops {
            match op {
                RegOp::Register(i, d) => {
                    if lapse(&mut model, ids[i], now) { lapses += 1; }
                    let info = ServiceInfo { service_id: ids[i].into(), kind: ServiceType::Station, endpoint: "h:1".into(), attributes: BTreeMap::new() };
                    reg.register(info, d, now).unwrap();
                    model.insert(ids[i], now + d);
                }
                RegOp::Renew(i, d) => {
                    if lapse(&mut model, ids[i], now) { lapses += 1; }
                    let r = reg.renew(ids[i], d, now);
                    prop_assert_eq!(r.is_ok(), model.contains_key(ids[i]));
                    if r.is_ok() { model.insert(ids[i], now + d); }
                }
                RegOp::Unregister(i) => {
                    if lapse(&mut model, ids[i], now) { lapses += 1; }
                    let r = reg.unregister(ids[i], now);
                    prop_assert_eq!(r.is_ok(), model.remove(ids[i]).is_some());
                }
                RegOp::Advance(dt) => now += dt,
                RegOp::Sweep => {
                    for id in ids {
                        if lapse(&mut model, id, now) { lapses += 1; }
                    }
                    reg.sweep(now);
                }
            }
            let seen = reg.lookup(&Filter::any(), now);
            prop_assert!(seen.iter().all(|r| r.lease.expiry >= now));
            let mut uniq: Vec<_> = seen.iter().map(|r| r.service_id.clone()).collect();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), seen.len());
            let live: Vec<&str> = model.iter().filter(|(_, &e)| e >= now).map(|(id, _)| *id).collect();
            prop_assert_eq!(seen.iter().map(|r| r.service_id.as_str()).collect::<Vec<_>>(), live);
        }
        let mut expired = 0;
        while let Ok(e) = events.try_recv() {
            if e.kind == EventKind::Expired { expired += 1; }
        }
        prop_assert_eq!(expired, lapses);
    }
}
