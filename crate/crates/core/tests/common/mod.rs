//! Scenario runners and brute-force oracles shared by the integration tests
//! and the acceptance report.

#![allow(dead_code)]

pub mod arb;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use agentmesh::agents::{BehaviorRegistry, DATA_QUERY, FILE_ACCESS, SEARCH};
use agentmesh::client::{self, Attached};
use agentmesh::localmesh::{eventually, LocalMesh, MeshOptions};
use agentmesh::lookup::{EventKind, Filter, RegistryClient, ServiceType};
use agentmesh::migration::MoveStep;
use agentmesh::security::{
    answer_challenge, generate_keypair, sign_bundle, verify_challenge, admit_agent, ChallengeBook, ChallengeOutcome,
    TrustStore,
};
use agentmesh::station::{CrashSwitch, StationOptions};
use agentmesh::wire::{AgentId, AgentSnapshot, BundleRef, ServiceKind};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

// ---------------------------------------------------------------------------
// Crash injection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Source,
    Dest,
    Both,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::Source, Site::Dest, Site::Both];

    fn hits(self, station: usize) -> bool {
        match self {
            Site::Source => station == 0,
            Site::Dest => station == 1,
            Site::Both => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::Source => "source",
            Site::Dest => "dest",
            Site::Both => "both",
        }
    }
}

/// Moves a live file-access agent from station 0 to station 1, crashes the
/// chosen site right after `step`, restarts whatever died, and waits for the
/// mesh to settle. Ok carries the index of the single surviving instance.
pub async fn crash_scenario(step: MoveStep, site: Site) -> Result<usize, String> {
    let switches: Arc<Mutex<Vec<CrashSwitch>>> = Arc::default();
    let armed = Arc::new(AtomicBool::new(false));
    let opts = MeshOptions::stations(2).tweak(|_, cfg| {
        cfg.prepare_timeout_ms = 1_000;
        cfg.commit_timeout_ms = 1_000;
    });
    let mut mesh = LocalMesh::start_with(opts, |i| {
        let switches = switches.clone();
        let armed = armed.clone();
        StationOptions {
            hook: Some(Arc::new(move |s, _txn| {
                if s != step || !armed.swap(false, Ordering::SeqCst) {
                    return false;
                }
                let other = 1 - i;
                if site.hits(other) {
                    if let Some(sw) = switches.lock().unwrap().get(other) {
                        sw.trip();
                    }
                }
                site.hits(i)
            })),
            ..StationOptions::default()
        }
    })
    .await
    .map_err(|e| e.to_string())?;
    *switches.lock().unwrap() = (0..2).map(|i| mesh.station(i).crash_switch()).collect();

    let agent = mesh.launch(FILE_ACCESS, json!({}), 0).await.map_err(|e| e.to_string())?;
    armed.store(true, Ordering::SeqCst);
    mesh.station(0).request_move(&agent, mesh.endpoint(1)).map_err(|e| format!("move refused: {e}"))?;

    let expect: Vec<usize> = (0..2).filter(|&i| site.hits(i)).collect();
    let down = eventually(Duration::from_secs(10), || expect.iter().all(|&i| mesh.station(i).is_crashed())).await;
    if !down {
        return Err(format!("hook for {step:?} never fired"));
    }
    for &i in &expect {
        mesh.restart(i).await.map_err(|e| format!("restart {i}: {e}"))?;
    }

    let rc = RegistryClient::new(mesh.registry_endpoint());
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        for i in 0..2 {
            mesh.station(i).resolve_in_doubt().await;
        }
        let verdict = settled(&mesh, &rc, &agent).await;
        match verdict {
            Ok(at) => {
                // The survivor must still answer its owner.
                return match mesh.attach(agent).await {
                    Ok(Attached::Session(mut s)) => match s.list("").await {
                        Ok(_) => Ok(at),
                        Err(e) => Err(format!("survivor does not answer: {e}")),
                    },
                    Ok(Attached::Finished(o)) => Err(format!("survivor already ended: {o:?}")),
                    Err(e) => Err(format!("cannot attach survivor: {e}")),
                };
            }
            Err(why) if Instant::now() >= deadline => return Err(why),
            Err(_) => tokio::time::sleep(Duration::from_millis(100)).await,
        }
    }
}

async fn settled(mesh: &LocalMesh, rc: &RegistryClient, agent: &AgentId) -> Result<usize, String> {
    let statuses: Vec<_> = (0..2).map(|i| mesh.station(i).status()).collect();
    for s in &statuses {
        if !s.holds.is_empty() || s.unfinalized > 0 {
            return Err(format!("{} still has {} holds, {} unfinalized", s.station_id, s.holds.len(), s.unfinalized));
        }
    }
    let live: Vec<usize> = (0..2)
        .filter(|&i| statuses[i].agent(agent).is_some_and(|a| a.run_state == agentmesh::station::RunState::Active))
        .collect();
    if live.len() != 1 {
        return Err(format!("{} active instances: {:?}", live.len(), statuses.iter().map(|s| &s.agents).collect::<Vec<_>>()));
    }
    let others = (0..2).filter(|&i| i != live[0]).any(|i| statuses[i].agent(agent).is_some());
    if others {
        return Err("a stale copy is still resident".into());
    }
    let records = rc.lookup(&Filter::id(agent.to_hex())).await.map_err(|e| e.to_string())?;
    if records.len() > 1 {
        return Err(format!("{} registry records", records.len()));
    }
    if let Some(r) = records.first() {
        if r.attr("station") != Some(mesh.station_id(live[0])) {
            return Err(format!("registry points at {:?}", r.attr("station")));
        }
    }
    Ok(live[0])
}

// ---------------------------------------------------------------------------
// Lease expiry
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct LeaseRun {
    pub removed_after: Duration,
    pub expired_events: usize,
    pub reregistered_after: Duration,
    pub heartbeat: Duration,
}

/// Lease 2 s, sweep 500 ms. Kills a station, times its disappearance from
/// lookup, counts EXPIRED events, then restarts it.
pub async fn lease_scenario() -> Result<LeaseRun, String> {
    let heartbeat = Duration::from_millis(600);
    let opts = MeshOptions {
        stations: 1,
        lease_ms: 2_000,
        heartbeat_ms: heartbeat.as_millis() as u64,
        sweep_ms: 500,
        min_lease_ms: 500,
        tweak: None,
    };
    let mut mesh = LocalMesh::start_with(opts, |_| StationOptions::default()).await.map_err(|e| e.to_string())?;
    let id = mesh.station_id(0).to_string();
    let mut events = mesh.registry.registry().subscribe(Filter::id(id.clone()));
    let rc = RegistryClient::new(mesh.registry_endpoint());
    let present = || async {
        rc.lookup(&Filter::kind(ServiceType::Station)).await.map(|r| r.iter().any(|s| s.service_id == id))
    };
    if !present().await.map_err(|e| e.to_string())? {
        return Err("station never registered".into());
    }

    let killed = Instant::now();
    mesh.crash(0);
    let mut removed_after = None;
    while killed.elapsed() < Duration::from_secs(5) {
        if !present().await.map_err(|e| e.to_string())? {
            removed_after = Some(killed.elapsed());
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let removed_after = removed_after.ok_or("still listed after 5 s")?;
    // Leave time for a second, erroneous expiry to show up.
    tokio::time::sleep(Duration::from_millis(1_500)).await;
    let mut expired_events = 0;
    while let Ok(e) = events.try_recv() {
        if e.kind == EventKind::Expired {
            expired_events += 1;
        }
    }

    let restarted = Instant::now();
    mesh.restart(0).await.map_err(|e| e.to_string())?;
    let mut reregistered_after = None;
    while restarted.elapsed() < Duration::from_secs(5) {
        if present().await.map_err(|e| e.to_string())? {
            reregistered_after = Some(restarted.elapsed());
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    Ok(LeaseRun {
        removed_after,
        expired_events,
        reregistered_after: reregistered_after.ok_or("not listed 5 s after restart")?,
        heartbeat,
    })
}

// ---------------------------------------------------------------------------
// Admission matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Combo {
    pub hash_ok: bool,
    pub signer_trusted: bool,
    pub signature_ok: bool,
}

impl Combo {
    pub fn all() -> Vec<Combo> {
        let mut out = Vec::new();
        for hash_ok in [true, false] {
            for signer_trusted in [true, false] {
                for signature_ok in [true, false] {
                    out.push(Combo { hash_ok, signer_trusted, signature_ok });
                }
            }
        }
        out
    }

    /// First failing check in the order hash, trust, signature.
    pub fn expected(self) -> &'static str {
        if !self.hash_ok {
            "HASH_MISMATCH"
        } else if !self.signer_trusted {
            "UNTRUSTED_SIGNER"
        } else if !self.signature_ok {
            "TAMPERED"
        } else {
            "ADMITTED"
        }
    }
}

fn sha256_of(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Admission code for one combination on a fixed fixture: a seeded signer,
/// a separately trusted owner, and a small bundle.
pub fn admission_for(c: Combo) -> &'static str {
    let signer = generate_keypair(Some([7; 32]));
    let signer_cert = signer.certificate("publisher");
    let owner = generate_keypair(Some([9; 32]));
    let owner_cert = owner.certificate("owner");

    let signed = b"bundle: file-access 1".to_vec();
    // A tampered bundle is one whose bytes changed after signing.
    let presented = if c.signature_ok { signed.clone() } else { b"bundle: file-access 1!".to_vec() };
    let sha256 = if c.hash_ok { sha256_of(&presented) } else { sha256_of(b"something else") };

    let mut trust = TrustStore::new();
    trust.accept(&owner_cert);
    if c.signer_trusted {
        trust.accept(&signer_cert);
    }
    let snapshot = AgentSnapshot {
        agent_id: AgentId::random(),
        behavior_id: FILE_ACCESS.into(),
        bundle_ref: BundleRef {
            url: "http://127.0.0.1:1/bundles/x".into(),
            sha256,
            signature: sign_bundle(&signed, &signer, &signer_cert).unwrap(),
        },
        owner_cert,
        service_kind: ServiceKind::Service,
        open_access: false,
        state_blob: b"{}".to_vec(),
        itinerary: Vec::new(),
        hop_index: 0,
        travel_log: Vec::new(),
    };
    admit_agent(&snapshot, &presented, &trust).code()
}

/// Owner key accepted, wrong key rejected, replayed nonce refused.
pub fn handshake_checks() -> Result<(), String> {
    let owner = generate_keypair(Some([3; 32]));
    let cert = owner.certificate("owner");
    let stranger = generate_keypair(Some([4; 32]));
    let agent = AgentId::random();
    let mut book = ChallengeBook::new(30_000);

    let nonce = book.issue(agent, 1_000);
    let good = answer_challenge(&nonce, &owner);
    if verify_challenge(&nonce, &good, &cert) != ChallengeOutcome::Ok {
        return Err("owner answer rejected".into());
    }
    let bad = answer_challenge(&nonce, &stranger);
    if verify_challenge(&nonce, &bad, &cert) != ChallengeOutcome::Rejected {
        return Err("stranger answer accepted".into());
    }
    if book.verify(agent, &nonce, &good, &cert, 1_100) != Ok(ChallengeOutcome::Ok) {
        return Err("first use of nonce failed".into());
    }
    if book.verify(agent, &nonce, &good, &cert, 1_200).is_ok() {
        return Err("replayed nonce accepted".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Search oracle
// ---------------------------------------------------------------------------

const WORDS: &[&str] = &[
    "mesh", "agent", "grid", "lease", "owner", "station", "vector", "delta", "omega", "node", "route", "probe", "cache",
    "x1", "42", "alpha", "beta",
];

/// Writes `files` text files (and a few binary ones) spread over the
/// stations' roots, some in subdirectories.
pub fn write_corpus(mesh: &LocalMesh, files: usize, rng: &mut StdRng) {
    for n in 0..files {
        let root = mesh.fs_root(n % mesh.len());
        let rel = match n % 4 {
            0 => format!("doc{n:03}.txt"),
            1 => format!("notes/n{n:03}.md"),
            2 => format!("notes/deep/d{n:03}.txt"),
            _ => format!("misc{n:03}"),
        };
        let path = root.join(&rel);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        if n % 37 == 5 {
            std::fs::write(&path, [0xff, 0xfe, b'm', b'e', b's', b'h', 0x80]).unwrap();
            continue;
        }
        let words = rng.random_range(0..60);
        let mut text = String::new();
        for _ in 0..words {
            let w = WORDS[rng.random_range(0..WORDS.len())];
            let w = if rng.random_bool(0.2) { w.to_uppercase() } else { w.to_string() };
            text.push_str(&w);
            let sep = [" ", "\n", ", ", "-", ".", "_", "\t", "/"][rng.random_range(0..8)];
            text.push_str(sep);
        }
        std::fs::write(&path, text).unwrap();
    }
}

pub fn random_terms(rng: &mut StdRng) -> Vec<String> {
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| {
            let w = WORDS[rng.random_range(0..WORDS.len())];
            if rng.random_bool(0.3) {
                w.to_uppercase()
            } else {
                w.to_string()
            }
        })
        .collect()
}

fn count_term(text: &str, term: &str) -> u64 {
    let mut count = 0;
    let mut word = String::new();
    for ch in text.chars().chain(std::iter::once(' ')) {
        if ch.is_ascii_alphanumeric() {
            word.push(ch.to_ascii_lowercase());
        } else {
            if !word.is_empty() && word == term {
                count += 1;
            }
            word.clear();
        }
    }
    count
}

fn files_under(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            files_under(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.push((rel, path));
        }
    }
}

/// Brute-force ranking over every station root: `(path, weight, station)`.
pub fn search_oracle(mesh: &LocalMesh, terms: &[String]) -> (Vec<(String, u64, String)>, u64) {
    let terms: Vec<String> = terms.iter().map(|t| t.to_ascii_lowercase()).collect();
    let mut hits = Vec::new();
    let mut skipped = 0;
    for i in 0..mesh.len() {
        let mut files = Vec::new();
        files_under(mesh.fs_root(i), mesh.fs_root(i), &mut files);
        for (rel, path) in files {
            let Ok(text) = String::from_utf8(std::fs::read(path).unwrap()) else {
                skipped += 1;
                continue;
            };
            let weight: u64 = terms.iter().map(|t| count_term(&text, t)).sum();
            if weight > 0 {
                hits.push((rel, weight, mesh.station_id(i).to_string()));
            }
        }
    }
    hits.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)).then(a.0.cmp(&b.0)));
    (hits, skipped)
}

/// Sends a search agent over every station and returns its ranked hits and
/// skipped count.
pub async fn search_agent(mesh: &LocalMesh, terms: &[String]) -> Result<(Vec<(String, u64, String)>, u64), String> {
    let mut spec = mesh.spec(SEARCH, json!({ "terms": terms }), 0);
    spec.itinerary = (0..mesh.len()).map(|i| mesh.endpoint(i).to_string()).collect();
    spec.service_kind = ServiceKind::Private;
    let agent = client::launch(&spec, &BehaviorRegistry::builtin()).await.map_err(|e| e.to_string())?;
    let outcome = client::wait_finished(mesh.endpoint(0), agent, Some(&mesh.owner_key), Duration::from_secs(20))
        .await
        .map_err(|e| e.to_string())?;
    let result = outcome.result_json().ok_or("result is not JSON")?;
    let hits = result["hits"]
        .as_array()
        .ok_or("no hits array")?
        .iter()
        .map(|h| {
            (h["path"].as_str().unwrap_or_default().to_string(), h["weight"].as_u64().unwrap_or(0), h["station_id"].as_str().unwrap_or_default().to_string())
        })
        .collect();
    Ok((hits, result["skipped"].as_u64().unwrap_or(0)))
}

// ---------------------------------------------------------------------------
// Data-query oracle
// ---------------------------------------------------------------------------

pub const COLUMNS: [&str; 6] = ["id", "name", "age", "score", "city", "code"];
const NAMES: &[&str] = &["ana", "bo", "cy", "dee", "eli", "fay", "gus", "Hal", "ivy", "Jo"];
const CITIES: &[&str] = &["Oslo", "Lima", "Rome", "oslo", "Cairo", "Quito", "Perth"];

/// Rows of plain cells (no commas or quotes). `code` mixes numeric-looking
/// and alphabetic values so both comparison modes are exercised.
pub fn random_rows(n: usize, rng: &mut StdRng) -> Vec<Vec<String>> {
    (0..n)
        .map(|i| {
            let code = match rng.random_range(0..4) {
                0 => format!("{}", rng.random_range(0..50)),
                1 => format!("0{}", rng.random_range(0..50)),
                2 => format!("-{}.{}", rng.random_range(0..9), rng.random_range(0..99)),
                _ => format!("k{}", rng.random_range(0..50)),
            };
            vec![
                i.to_string(),
                NAMES[rng.random_range(0..NAMES.len())].to_string(),
                rng.random_range(18..80).to_string(),
                format!("{}.{:02}", rng.random_range(0..100), rng.random_range(0..100)),
                CITIES[rng.random_range(0..CITIES.len())].to_string(),
                code,
            ]
        })
        .collect()
}

pub fn write_csv(path: &Path, rows: &[Vec<String>]) {
    let mut text = COLUMNS.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

const OPS: [&str; 6] = ["=", "!=", "<", "<=", ">", ">="];

/// A conjunction of 1..=3 clauses as `(column, op, literal)`, with literals
/// drawn from existing cells most of the time.
pub fn random_clauses(rows: &[Vec<String>], rng: &mut StdRng) -> Vec<(String, String, String)> {
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| {
            let col = rng.random_range(0..COLUMNS.len());
            let op = OPS[rng.random_range(0..OPS.len())];
            let value = if rng.random_bool(0.8) {
                rows[rng.random_range(0..rows.len())][col].clone()
            } else {
                ["30", "50.5", "M", "k2", "-1", ".5", "007"][rng.random_range(0..7)].to_string()
            };
            (COLUMNS[col].to_string(), op.to_string(), value)
        })
        .collect()
}

fn looks_numeric(s: &str) -> bool {
    let s = s.strip_prefix('-').or_else(|| s.strip_prefix('+')).unwrap_or(s);
    let mut digits = 0;
    let mut dots = 0;
    for c in s.chars() {
        match c {
            '0'..='9' => digits += 1,
            '.' => dots += 1,
            _ => return false,
        }
    }
    digits > 0 && dots <= 1
}

fn clause_holds(cell: &str, op: &str, lit: &str) -> bool {
    let ord = if looks_numeric(cell) && looks_numeric(lit) {
        cell.parse::<f64>().unwrap().partial_cmp(&lit.parse::<f64>().unwrap()).unwrap()
    } else {
        cell.as_bytes().cmp(lit.as_bytes())
    };
    match op {
        "=" => ord.is_eq(),
        "!=" => ord.is_ne(),
        "<" => ord.is_lt(),
        "<=" => ord.is_le(),
        ">" => ord.is_gt(),
        ">=" => ord.is_ge(),
        _ => unreachable!(),
    }
}

/// Brute-force filter over the rows as written, projecting `select`.
pub fn query_oracle(rows: &[Vec<String>], clauses: &[(String, String, String)], select: &[&str]) -> Vec<Vec<String>> {
    let col = |name: &str| COLUMNS.iter().position(|c| *c == name).unwrap();
    let picked: Vec<usize> = if select.is_empty() { (0..COLUMNS.len()).collect() } else { select.iter().map(|c| col(c)).collect() };
    rows.iter()
        .filter(|r| clauses.iter().all(|(c, op, lit)| clause_holds(&r[col(c)], op, lit)))
        .map(|r| picked.iter().map(|&i| r[i].clone()).collect())
        .collect()
}

/// Text and structured forms of a predicate, alternating per case.
pub fn predicate_json(clauses: &[(String, String, String)], case: usize) -> Value {
    if case.is_multiple_of(2) {
        let parts: Vec<String> = clauses
            .iter()
            .enumerate()
            .map(|(k, (c, op, v))| match (case / 2 + k) % 3 {
                0 => format!("{c} {op} {v}"),
                1 => format!("{c}{op}'{v}'"),
                _ => format!("{c} {op} \"{v}\""),
            })
            .collect();
        let joiner = if case.is_multiple_of(4) { " AND " } else { " and " };
        Value::String(parts.join(joiner))
    } else {
        Value::Array(clauses.iter().map(|(c, op, v)| json!({ "column": c, "op": op, "value": v })).collect())
    }
}

/// A one-station mesh exposing `rows` as table `t`, and a data-query agent.
pub async fn data_query_mesh(rows: &[Vec<String>]) -> Result<(LocalMesh, AgentId), String> {
    let rows = rows.to_vec();
    let opts = MeshOptions::stations(1).tweak(move |_, cfg| {
        let path = cfg.data_dir.parent().unwrap().join("t.csv");
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        write_csv(&path, &rows);
        cfg.tables.insert("t".into(), path);
    });
    let mesh = LocalMesh::start_with(opts, |_| StationOptions::default()).await.map_err(|e| e.to_string())?;
    let agent = mesh.launch(DATA_QUERY, json!({}), 0).await.map_err(|e| e.to_string())?;
    Ok((mesh, agent))
}

pub fn seeded(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}
