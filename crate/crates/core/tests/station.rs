//! End-to-end behavior of stations and the client library over loopback.

use std::time::Duration;

use agentmesh::agents::{BehaviorRegistry, CONNECTIVITY_TEST, DATA_QUERY, FILE_ACCESS, SEARCH};
use agentmesh::client::{self, attach, attach_with_proof, AdminClient, Attached, MeshError, Transport};
use agentmesh::localmesh::{eventually, stranger, LocalMesh, MeshOptions};
use agentmesh::lookup::{Filter, RegistryClient, ServiceType};
use agentmesh::security::answer_challenge;
use agentmesh::station::{RunState, StationOptions};
use agentmesh::wire::{AgentId, ServiceKind};
use futures::StreamExt;
use serde_json::json;

const WAIT: Duration = Duration::from_secs(10);

fn session(a: Attached) -> client::AttachSession {
    match a {
        Attached::Session(s) => s,
        Attached::Finished(o) => panic!("agent already ended: {o:?}"),
    }
}

async fn finished_at(mesh: &LocalMesh, i: usize, agent: AgentId) -> client::AgentOutcome {
    client::wait_finished(mesh.endpoint(i), agent, Some(&mesh.owner_key), WAIT).await.unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn launched_service_agent_is_registered_with_its_station() {
    let mesh = LocalMesh::start(2).await.unwrap();
    let agent = mesh.launch(FILE_ACCESS, json!({}), 1).await.unwrap();
    let records = client::discover(&mesh.registry_endpoint(), &Filter::kind(ServiceType::Agent)).await.unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].service_id, agent.to_hex());
    assert_eq!(records[0].attr("station"), Some("station-2"));
    assert_eq!(records[0].attr("behavior_id"), Some(FILE_ACCESS));
    assert_eq!(records[0].attr("owner"), Some(mesh.owner_cert.fingerprint.as_str()));

    let all = client::discover(&mesh.registry_endpoint(), &Filter::any()).await.unwrap();
    assert_eq!(all.len(), 3, "two stations and one agent");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn launch_with_untrusted_owner_is_rejected() {
    let mesh = LocalMesh::start(1).await.unwrap();
    let (_, cert) = stranger("mallory");
    let mut spec = mesh.spec(FILE_ACCESS, json!({}), 0);
    spec.owner = cert;
    let err = client::launch(&spec, &BehaviorRegistry::builtin()).await.unwrap_err();
    match err {
        MeshError::Rejected { code, .. } => assert_eq!(code, "UNTRUSTED_SIGNER"),
        other => panic!("expected a rejection, got {other}"),
    }
    assert!(mesh.station(0).status().agents.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bad_launch_params_are_caught_before_sending() {
    let mesh = LocalMesh::start(1).await.unwrap();
    let before = mesh.station(0).events().len();
    let err = mesh.launch(CONNECTIVITY_TEST, json!({ "hops": "many" }), 0).await.unwrap_err();
    assert!(matches!(err, MeshError::Invalid(_)), "{err}");
    assert_eq!(err.code(), "INVALID_PARAMS");
    assert_eq!(mesh.station(0).events().len(), before);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unknown_behavior_and_tampered_bundle_are_rejected_by_the_station() {
    let mesh = LocalMesh::start(1).await.unwrap();
    let mut spec = mesh.spec(FILE_ACCESS, json!({}), 0);
    // Claims to be a search agent but carries a file-access bundle.
    spec.behavior_id = SEARCH.into();
    spec.params = json!({ "terms": ["x"] });
    let err = client::launch(&spec, &BehaviorRegistry::builtin()).await.unwrap_err();
    assert!(matches!(&err, MeshError::Rejected { code, .. } if code == "BEHAVIOR_MISMATCH"), "{err}");

    let mut spec = mesh.spec(FILE_ACCESS, json!({}), 0);
    spec.bundle_ref.sha256 = "00".repeat(32);
    let err = client::launch(&spec, &BehaviorRegistry::builtin()).await.unwrap_err();
    assert!(matches!(&err, MeshError::Rejected { code, .. } if code == "BUNDLE_UNAVAILABLE" || code == "HASH_MISMATCH"), "{err}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn owner_session_moves_files_both_ways() {
    let mesh = LocalMesh::start(1).await.unwrap();
    std::fs::create_dir_all(mesh.fs_root(0).join("docs")).unwrap();
    std::fs::write(mesh.fs_root(0).join("docs/a.txt"), b"alpha").unwrap();
    let agent = mesh.launch(FILE_ACCESS, json!({}), 0).await.unwrap();
    let mut s = session(mesh.attach(agent).await.unwrap());
    assert_eq!(s.info["station_id"], "station-1");

    let entries = s.list("docs").await.unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].name, "a.txt");
    assert_eq!(s.read_file("docs/a.txt", Transport::Control).await.unwrap(), b"alpha");
    assert_eq!(s.read_file("docs/a.txt", Transport::Stream).await.unwrap(), b"alpha");

    let data: Vec<u8> = (0..700_000u32).map(|i| (i * 7 % 256) as u8).collect();
    for t in [Transport::Control, Transport::Stream] {
        let path = format!("docs/{}.bin", t.as_str());
        s.write_file(&path, &data, t).await.unwrap();
        assert_eq!(std::fs::read(mesh.fs_root(0).join(&path)).unwrap(), data);
        assert_eq!(s.read_file(&path, t).await.unwrap(), data);
    }
    // Empty files go through both transports too.
    s.write_file("empty", b"", Transport::Stream).await.unwrap();
    assert_eq!(s.read_file("empty", Transport::Control).await.unwrap(), b"");
    assert_eq!(s.read_file("empty", Transport::Stream).await.unwrap(), b"");

    let err = s.read_file("../outside", Transport::Control).await.unwrap_err();
    assert_eq!(err.code(), "SANDBOX_VIOLATION");
    let outcome = s.finish().await.unwrap();
    assert_eq!(outcome.outcome, RunState::Finished);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn handshake_accepts_owner_and_rejects_wrong_key_and_replay() {
    let mesh = LocalMesh::start(1).await.unwrap();
    let agent = mesh.launch(FILE_ACCESS, json!({}), 0).await.unwrap();
    let ep = mesh.endpoint(0).to_string();

    let (wrong, _) = stranger("mallory");
    let err = attach(&ep, agent, Some(&wrong)).await.err().expect("wrong key must fail");
    assert_eq!(err.code(), "ACCESS_DENIED");
    let err = attach(&ep, agent, None).await.err().expect("no key must fail");
    assert_eq!(err.code(), "ACCESS_DENIED");

    // Record a good exchange, then replay it against a fresh challenge.
    let mut seen = None;
    let key = mesh.owner_key.clone();
    let first = attach_with_proof(&ep, agent, |nonce| {
        let sig = answer_challenge(nonce, &key).to_vec();
        seen = Some((nonce.to_vec(), sig.clone()));
        (nonce.to_vec(), sig)
    })
    .await
    .unwrap();
    drop(session(first));
    let (old_nonce, old_sig) = seen.unwrap();
    let err = attach_with_proof(&ep, agent, |_| (old_nonce, old_sig)).await.err().expect("replay must fail");
    assert_eq!(err.code(), "NONCE_UNKNOWN");

    session(attach(&ep, agent, Some(&mesh.owner_key)).await.unwrap());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn open_access_agent_needs_no_key() {
    let mesh = LocalMesh::start(1).await.unwrap();
    let mut spec = mesh.spec(FILE_ACCESS, json!({}), 0);
    spec.open_access = true;
    let agent = client::launch(&spec, &BehaviorRegistry::builtin()).await.unwrap();
    let mut s = session(attach(mesh.endpoint(0), agent, None).await.unwrap());
    assert!(s.list("").await.unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn attach_to_finished_agent_returns_stored_result() {
    let mesh = LocalMesh::start(1).await.unwrap();
    let mut spec = mesh.spec(CONNECTIVITY_TEST, json!({ "hops": 0 }), 0);
    spec.itinerary = vec![mesh.endpoint(0).to_string()];
    let agent = client::launch(&spec, &BehaviorRegistry::builtin()).await.unwrap();
    let outcome = finished_at(&mesh, 0, agent).await;
    assert_eq!(outcome.outcome, RunState::Finished);
    let result = outcome.result_json().unwrap();
    assert_eq!(result["travel_log"].as_array().unwrap().len(), 1);
    assert_eq!(result["remaining_hops"], 0);
    // A finished agent leaves the registry.
    let rc = RegistryClient::new(mesh.registry_endpoint());
    let mut left = false;
    for _ in 0..100 {
        if rc.lookup(&Filter::id(agent.to_hex())).await.unwrap().is_empty() {
            left = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert!(left, "record still present");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn admin_move_commits_and_updates_registry() {
    let mesh = LocalMesh::start(2).await.unwrap();
    let agent = mesh.launch(FILE_ACCESS, json!({}), 0).await.unwrap();
    let admin0 = AdminClient::new(mesh.station(0).admin_url());
    let events = admin0.events(true, None).await.unwrap();
    let mut events = std::pin::pin!(events);

    admin0.move_agent(&agent, mesh.endpoint(1)).await.unwrap();
    let committed = tokio::time::timeout(WAIT, async {
        while let Some(e) = events.next().await {
            let e = e.unwrap();
            if e.kind == "MOVE_COMMITTED" && e.agent_id.as_deref() == Some(agent.to_hex().as_str()) {
                return e;
            }
        }
        panic!("event stream ended");
    })
    .await
    .unwrap();
    assert_eq!(committed.data["dest"], mesh.endpoint(1));

    assert!(eventually(WAIT, || mesh.whereis(&agent) == Some(1)).await);
    let loc = client::locate(&mesh.registry_endpoint(), &agent).await.unwrap();
    assert_eq!(loc.station_id, "station-2");
    let log = client::travel_log(&mesh.registry_endpoint(), &agent).await.unwrap();
    let ids: Vec<_> = log.iter().map(|e| e.station_id.as_str()).collect();
    assert_eq!(ids, ["station-1", "station-2"]);
    assert!(log[0].departure.is_some());

    // Moving to where it already is, or moving a stranger, is refused.
    let admin1 = AdminClient::new(mesh.station(1).admin_url());
    assert_eq!(admin1.move_agent(&agent, mesh.endpoint(1)).await.unwrap_err().code(), "SAME_STATION");
    assert_eq!(admin0.move_agent(&agent, mesh.endpoint(1)).await.unwrap_err().code(), "NOT_RESIDENT");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn move_to_unreachable_station_aborts_and_agent_stays() {
    let mesh = LocalMesh::start(1).await.unwrap();
    let agent = mesh.launch(FILE_ACCESS, json!({}), 0).await.unwrap();
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string();
    mesh.station(0).request_move(&agent, &dead).unwrap();
    assert!(
        eventually(WAIT, || mesh.station(0).events().iter().any(|e| e.kind == "MOVE_ABORTED")).await,
        "no MOVE_ABORTED"
    );
    assert!(eventually(WAIT, || mesh.station(0).status().agent(&agent).map(|a| a.run_state) == Some(RunState::Active)).await);
    let mut s = session(mesh.attach(agent).await.unwrap());
    s.list("").await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn recall_finishes_agent_at_origin() {
    let mesh = LocalMesh::start(2).await.unwrap();
    let agent = mesh.launch(FILE_ACCESS, json!({}), 0).await.unwrap();
    mesh.station(0).request_move(&agent, mesh.endpoint(1)).unwrap();
    assert!(eventually(WAIT, || mesh.whereis(&agent) == Some(1)).await);

    let outcome = client::recall(&mesh.registry_endpoint(), &agent, mesh.endpoint(0), Some(&mesh.owner_key)).await.unwrap();
    assert_eq!(outcome.outcome, RunState::Finished);
    let st = mesh.station(0).status();
    assert_eq!(st.agent(&agent).unwrap().run_state, RunState::Finished);
    let log = mesh.station(0).travel_log(&agent).unwrap();
    let ids: Vec<_> = log.iter().map(|e| e.station_id.as_str()).collect();
    assert_eq!(ids, ["station-1", "station-2", "station-1"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn connectivity_log_after_ten_hops_has_ten_entries() {
    let mesh = LocalMesh::start(2).await.unwrap();
    let mut spec = mesh.spec(CONNECTIVITY_TEST, json!({ "hops": 9, "dwell_ms": 10 }), 0);
    spec.itinerary = vec![mesh.endpoint(0).to_string(), mesh.endpoint(1).to_string()];
    let agent = client::launch(&spec, &BehaviorRegistry::builtin()).await.unwrap();
    // Nine moves from station-1 end at station-2.
    finished_at(&mesh, 1, agent).await;
    let log = client::travel_log(&mesh.registry_endpoint(), &agent).await.unwrap();
    assert_eq!(log.len(), 10);
    assert!(log.windows(2).all(|w| w[0].departure.unwrap() <= w[1].arrival));

    let unknown = AgentId::random();
    let err = client::travel_log(&mesh.registry_endpoint(), &unknown).await.unwrap_err();
    assert_eq!(err.code(), "NOT_FOUND");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn private_agents_are_found_by_asking_stations() {
    let mesh = LocalMesh::start(2).await.unwrap();
    let mut spec = mesh.spec(FILE_ACCESS, json!({}), 1);
    spec.service_kind = ServiceKind::Private;
    let agent = client::launch(&spec, &BehaviorRegistry::builtin()).await.unwrap();
    let rc = RegistryClient::new(mesh.registry_endpoint());
    assert!(rc.lookup(&Filter::id(agent.to_hex())).await.unwrap().is_empty());
    let loc = client::locate(&mesh.registry_endpoint(), &agent).await.unwrap();
    assert_eq!(loc.endpoint, mesh.endpoint(1));
    assert_eq!(loc.run_state, Some(RunState::Active));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn trust_endpoint_requires_token_and_then_admits() {
    let opts = MeshOptions::stations(1).tweak(|_, cfg| cfg.admin_token = Some("sesame".into()));
    let mesh = LocalMesh::start_with(opts, |_| StationOptions::default()).await.unwrap();
    let admin = AdminClient::new(mesh.station(0).admin_url());
    let (_, cert) = stranger("carol");

    assert_eq!(admin.trust(&cert, None).await.unwrap_err().code(), "FORBIDDEN");
    assert_eq!(admin.trust(&cert, Some("guess")).await.unwrap_err().code(), "FORBIDDEN");
    let mut forged = cert.clone();
    forged.subject = "someone else".into();
    assert_eq!(admin.trust(&forged, Some("sesame")).await.unwrap_err().code(), "BAD_CERTIFICATE");

    let mut spec = mesh.spec(FILE_ACCESS, json!({}), 0);
    spec.owner = cert.clone();
    assert!(client::launch(&spec, &BehaviorRegistry::builtin()).await.is_err());
    assert!(admin.trust(&cert, Some("sesame")).await.unwrap());
    assert!(!admin.trust(&cert, Some("sesame")).await.unwrap());
    client::launch(&spec, &BehaviorRegistry::builtin()).await.unwrap();

    // Persisted for the next start.
    let stored = std::fs::read_to_string(&mesh.config(0).trust_store_path).unwrap();
    assert!(stored.contains(&cert.fingerprint));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn trust_endpoint_is_closed_without_a_token() {
    let mesh = LocalMesh::start(1).await.unwrap();
    let admin = AdminClient::new(mesh.station(0).admin_url());
    let (_, cert) = stranger("carol");
    assert_eq!(admin.trust(&cert, Some("anything")).await.unwrap_err().code(), "FORBIDDEN");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn search_agent_tours_itinerary_and_returns_ranked_hits() {
    let mesh = LocalMesh::start(2).await.unwrap();
    std::fs::write(mesh.fs_root(0).join("a.txt"), "grid grid mesh").unwrap();
    std::fs::write(mesh.fs_root(1).join("b.txt"), "grid grid grid").unwrap();
    std::fs::write(mesh.fs_root(1).join("c.txt"), "nothing here").unwrap();
    let mut spec = mesh.spec(SEARCH, json!({ "terms": ["grid", "MESH"] }), 0);
    spec.itinerary = vec![mesh.endpoint(0).to_string(), mesh.endpoint(1).to_string()];
    let agent = client::launch(&spec, &BehaviorRegistry::builtin()).await.unwrap();
    let outcome = finished_at(&mesh, 0, agent).await;
    let result = outcome.result_json().unwrap();
    assert_eq!(
        result["hits"],
        json!([
            { "path": "a.txt", "weight": 3, "station_id": "station-1" },
            { "path": "b.txt", "weight": 3, "station_id": "station-2" },
        ])
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn data_query_agent_answers_over_session() {
    let opts = MeshOptions::stations(1).tweak(|_, cfg| {
        let path = cfg.data_dir.parent().unwrap().join("staff.csv");
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, "name,age,city\nana,34,Oslo\nbo,27,Lima\ncy,41,Oslo\n").unwrap();
        cfg.tables.insert("staff".into(), path);
    });
    let mesh = LocalMesh::start_with(opts, |_| StationOptions::default()).await.unwrap();
    let agent = mesh.launch(DATA_QUERY, json!({}), 0).await.unwrap();
    let mut s = session(mesh.attach(agent).await.unwrap());
    let tables = s.list_catalog().await.unwrap();
    assert_eq!(tables[0].name, "staff");
    let r = s.query("staff", &["name"], json!("city = 'Oslo' AND age > 35")).await.unwrap();
    assert_eq!(r.rows, vec![vec!["cy".to_string()]]);
    assert_eq!(s.query("nope", &[], json!(null)).await.unwrap_err().code(), "UNKNOWN_TABLE");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn heartbeat_pause_lets_lease_lapse_and_resume_restores_it() {
    let opts = MeshOptions { stations: 1, lease_ms: 1_000, heartbeat_ms: 300, sweep_ms: 100, ..MeshOptions::default() };
    let mesh = LocalMesh::start_with(opts, |_| StationOptions::default()).await.unwrap();
    let rc = RegistryClient::new(mesh.registry_endpoint());
    let stations = || async { rc.lookup(&Filter::kind(ServiceType::Station)).await.unwrap().len() };
    assert_eq!(stations().await, 1);
    mesh.station(0).pause_heartbeat();
    tokio::time::sleep(Duration::from_millis(1_600)).await;
    assert_eq!(stations().await, 0);
    mesh.station(0).resume_heartbeat();
    tokio::time::sleep(Duration::from_millis(400)).await;
    assert_eq!(stations().await, 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn redelivered_protocol_messages_do_not_change_the_outcome() {
    use agentmesh::migration::{PrepareRequest, STARTER};
    use agentmesh::wire::{marshal_snapshot, round_trip, Message, TxnId};

    let mesh = LocalMesh::start(1).await.unwrap();
    let at = mesh.endpoint(0).to_string();
    let send = |kind: &'static str, txn: TxnId, payload: serde_json::Value| {
        let at = at.clone();
        async move { round_trip(&at, &Message::new(kind, payload).with_txn(txn.to_hex()), WAIT).await.unwrap() }
    };
    let prepare_for = |txn: TxnId| {
        let snapshot = mesh.spec(FILE_ACCESS, json!({}), 0).snapshot(&BehaviorRegistry::builtin()).unwrap();
        json!(PrepareRequest {
            txn_id: txn,
            agent_id: snapshot.agent_id,
            source: STARTER.into(),
            dest: mesh.endpoint(0).into(),
            snapshot: marshal_snapshot(&snapshot),
            finish_on_arrival: false,
        })
    };

    // Committed: a second PREPARE and COMMIT are answered the same way, and
    // a late ABORT leaves the agent running.
    let txn = TxnId::random();
    let prepare = prepare_for(txn);
    assert_eq!(send("PREPARE", txn, prepare.clone()).await.kind, "PREPARED");
    assert_eq!(send("PREPARE", txn, prepare.clone()).await.kind, "PREPARED");
    assert_eq!(send("COMMIT", txn, json!({ "txn_id": txn })).await.kind, "COMMITTED");
    assert_eq!(send("COMMIT", txn, json!({ "txn_id": txn })).await.kind, "COMMITTED");
    send("ABORT", txn, json!({ "txn_id": txn })).await;
    send("PREPARE", txn, prepare).await;
    let st = mesh.station(0).status();
    assert_eq!(st.agents.len(), 1);
    assert_eq!(st.agents[0].run_state, RunState::Active);
    assert!(st.holds.is_empty());

    // Aborted: repeated ABORTs agree, and COMMIT cannot revive it.
    let txn = TxnId::random();
    let prepare = prepare_for(txn);
    assert_eq!(send("PREPARE", txn, prepare.clone()).await.kind, "PREPARED");
    assert_eq!(send("ABORT", txn, json!({ "txn_id": txn })).await.kind, "ABORTED");
    assert_eq!(send("ABORT", txn, json!({ "txn_id": txn })).await.kind, "ABORTED");
    assert_ne!(send("COMMIT", txn, json!({ "txn_id": txn })).await.kind, "COMMITTED");
    assert_ne!(send("PREPARE", txn, prepare).await.kind, "PREPARED");
    let st = mesh.station(0).status();
    assert_eq!(st.agents.len(), 1, "only the first agent lives");
    assert!(st.holds.is_empty());
}
