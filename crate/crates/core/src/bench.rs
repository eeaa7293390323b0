//! Mobility soak and file-transfer throughput harness.
//!
//! Both runs stand up their own [`LocalMesh`] and observe it only through
//! the network APIs: station STATUS, registry lookup, admin HTTP, and attach
//! sessions.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::{CONNECTIVITY_TEST, FILE_ACCESS};
use crate::client::{self, AdminClient, Attached, MeshError, Transport};
use crate::localmesh::{LocalMesh, MeshOptions};
use crate::lookup::{Filter, RegistryClient};
use crate::station::{RunState, StationError, StationEvent};
use crate::wire::{AgentId, TravelEntry};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Station(#[from] StationError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{0}")]
    Failed(String),
}

/// How long a missing agent is tolerated before it counts as lost. Covers
/// the instant between a hold turning into a resident.
const LOSS_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoakParams {
    pub stations: usize,
    pub hops: u64,
    pub dwell_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoakReport {
    pub params: SoakParams,
    pub agent_id: Option<String>,
    pub hops_completed: u64,
    pub losses: u64,
    pub duplicates: u64,
    pub log_entries: u64,
    pub polls: u64,
    /// Whether the travel log matches the stations' ARRIVED/DEPARTED events.
    pub events_match: bool,
    /// Arrival and departure stamps never go backwards.
    pub timestamps_monotone: bool,
    pub wall_time_ms: u64,
    pub travel_log: Vec<TravelEntry>,
    pub passed: bool,
    /// First violated assertion.
    pub failure: Option<String>,
}

impl SoakReport {
    fn fail(&mut self, why: impl Into<String>) {
        if self.failure.is_none() {
            self.failure = Some(why.into());
        }
        self.passed = false;
    }
}

/// What one poll saw across the mesh.
#[derive(Debug, Default)]
struct Sighting {
    active: usize,
    /// Resident in any non-terminal state, or held as a prepared arrival.
    present: bool,
    terminal: Option<(usize, RunState)>,
    records: usize,
}

async fn sight(mesh: &LocalMesh, registry: &RegistryClient, agent: &AgentId, reverse: bool) -> Sighting {
    let mut out = Sighting::default();
    let mut order: Vec<usize> = (0..mesh.len()).collect();
    if reverse {
        order.reverse();
    }
    let hex = agent.to_hex();
    for i in order {
        let Ok(status) = client::station_status(mesh.endpoint(i)).await else { continue };
        if let Some(a) = status.agent(agent) {
            match a.run_state {
                RunState::Active => {
                    out.active += 1;
                    out.present = true;
                }
                s if s.is_terminal() => out.terminal = Some((i, s)),
                _ => out.present = true,
            }
        }
        if status.holds.iter().any(|h| h.agent_id == hex) {
            out.present = true;
        }
    }
    out.records = registry.lookup(&Filter::id(&hex)).await.map(|r| r.len()).unwrap_or(0);
    out
}

/// One connectivity agent hopping round-robin over `stations` stations.
/// A hop is one station visit, so the launch arrival counts as the first.
pub async fn soak(params: SoakParams) -> Result<SoakReport, BenchError> {
    let mesh = LocalMesh::start_with(MeshOptions::stations(params.stations), |_| Default::default()).await?;
    soak_on(&mesh, params).await
}

pub async fn soak_on(mesh: &LocalMesh, params: SoakParams) -> Result<SoakReport, BenchError> {
    let mut report = SoakReport {
        params,
        agent_id: None,
        hops_completed: 0,
        losses: 0,
        duplicates: 0,
        log_entries: 0,
        polls: 0,
        events_match: false,
        timestamps_monotone: false,
        wall_time_ms: 0,
        travel_log: Vec::new(),
        passed: true,
        failure: None,
    };
    if params.stations < 2 || params.hops == 0 {
        return Err(BenchError::Failed("soak needs at least 2 stations and 1 hop".into()));
    }
    let registry = RegistryClient::new(mesh.registry_endpoint());
    let mut spec = mesh.spec(CONNECTIVITY_TEST, json!({ "hops": params.hops - 1, "dwell_ms": params.dwell_ms }), 0);
    spec.itinerary = (0..mesh.len()).map(|i| mesh.endpoint(i).to_string()).collect();

    let started = Instant::now();
    let agent = client::launch(&spec, &crate::agents::BehaviorRegistry::builtin()).await?;
    report.agent_id = Some(agent.to_hex());
    let budget = Duration::from_millis(params.hops * (params.dwell_ms + 250)) + Duration::from_secs(30);
    let poll = Duration::from_millis(params.dwell_ms.clamp(10, 1000));
    let mut missing_since: Option<Instant> = None;

    let finished_at = loop {
        tokio::time::sleep(poll).await;
        report.polls += 1;
        let mut seen = sight(mesh, &registry, &agent, false).await;
        if seen.active > 1 || seen.records > 1 {
            // Polls are not atomic across stations; a real duplicate survives
            // a second look in the opposite order.
            seen = sight(mesh, &registry, &agent, true).await;
            if seen.active > 1 || seen.records > 1 {
                report.duplicates += 1;
                report.fail(format!("{} active instances and {} registry records at poll {}", seen.active, seen.records, report.polls));
            }
        }
        if let Some((i, state)) = seen.terminal {
            if !seen.present {
                break (i, state);
            }
        }
        if seen.present {
            missing_since = None;
        } else {
            let since = *missing_since.get_or_insert_with(Instant::now);
            if since.elapsed() > LOSS_GRACE {
                report.losses += 1;
                report.fail(format!("agent missing from every station for over {LOSS_GRACE:?}"));
                report.wall_time_ms = started.elapsed().as_millis() as u64;
                return Ok(report);
            }
        }
        if started.elapsed() > budget {
            report.fail(format!("agent did not finish within {budget:?}"));
            report.wall_time_ms = started.elapsed().as_millis() as u64;
            return Ok(report);
        }
    };
    report.wall_time_ms = started.elapsed().as_millis() as u64;
    let (last, state) = finished_at;
    if state != RunState::Finished {
        report.fail(format!("agent ended {}", state.as_str()));
    }

    let admin = AdminClient::new(mesh.station(last).admin_url());
    let log = admin.travel_log(&agent).await?;
    report.log_entries = log.len() as u64;
    report.hops_completed = log.len() as u64;
    report.timestamps_monotone = monotone(&log);
    report.events_match = log == log_from_events(mesh, &agent).await?;
    report.travel_log = log;

    if report.hops_completed != params.hops {
        report.fail(format!("completed {} of {} hops", report.hops_completed, params.hops));
    }
    if !report.timestamps_monotone {
        report.fail("travel log timestamps go backwards");
    }
    if !report.events_match {
        report.fail("travel log differs from station events");
    }
    Ok(report)
}

fn monotone(log: &[TravelEntry]) -> bool {
    let mut last = 0;
    log.iter().all(|e| {
        let ok = e.arrival >= last && e.departure.is_none_or(|d| d >= e.arrival);
        last = e.departure.unwrap_or(e.arrival);
        ok
    })
}

/// Rebuilds the travel log from every station's ARRIVED and DEPARTED events.
async fn log_from_events(mesh: &LocalMesh, agent: &AgentId) -> Result<Vec<TravelEntry>, MeshError> {
    use futures::StreamExt;

    let mut arrivals: Vec<(u64, u64, TravelEntry)> = Vec::new();
    let mut departures: HashMap<(String, String), u64> = HashMap::new();
    let hex = agent.to_hex();
    for i in 0..mesh.len() {
        let admin = AdminClient::new(mesh.station(i).admin_url());
        let events: Vec<StationEvent> = admin.events(false, None).await?.filter_map(|e| async { e.ok() }).collect().await;
        for e in events.into_iter().filter(|e| e.agent_id.as_deref() == Some(hex.as_str())) {
            let txn = e.data.get("txn_id").and_then(|t| t.as_str()).unwrap_or("").to_string();
            match e.kind.as_str() {
                "ARRIVED" => {
                    let arrival = e.data.get("arrival").and_then(|a| a.as_u64()).unwrap_or(0);
                    let entry = TravelEntry { station_id: e.station_id.clone(), arrival, departure: None };
                    arrivals.push((arrival, e.seq, entry));
                }
                "DEPARTED" => {
                    let departure = e.data.get("departure").and_then(|d| d.as_u64()).unwrap_or(0);
                    departures.insert((e.station_id.clone(), txn), departure);
                }
                _ => {}
            }
        }
    }
    arrivals.sort_by_key(|(arrival, seq, _)| (*arrival, *seq));
    // Each stay ends with the departure logged right after that arrival.
    let mut log: Vec<TravelEntry> = arrivals.into_iter().map(|(_, _, e)| e).collect();
    let mut by_station: HashMap<String, Vec<u64>> = HashMap::new();
    for ((station, _), d) in departures {
        by_station.entry(station).or_default().push(d);
    }
    for v in by_station.values_mut() {
        v.sort_unstable();
    }
    for i in 0..log.len() {
        let Some(next) = log.get(i + 1).map(|e| e.arrival) else { break };
        let entry = &mut log[i];
        entry.departure = by_station
            .get(&entry.station_id)
            .and_then(|ds| ds.iter().copied().find(|&d| d >= entry.arrival && d <= next));
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// Throughput
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub direction: String,
    pub transport: String,
    pub size: u64,
    #[serde(rename = "MB_per_s")]
    pub mb_per_s: f64,
}

/// Megabytes (10^6) per second; zero for an empty transfer.
pub fn rate(bytes: u64, elapsed: Duration) -> f64 {
    let secs = elapsed.as_secs_f64();
    if bytes == 0 || secs <= 0.0 {
        return 0.0;
    }
    bytes as f64 / 1e6 / secs
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

/// Writes then reads a random file of `size` bytes through a file-access
/// agent, `trials` times, and returns one write and one read row per trial.
/// Any byte mismatch fails the run.
pub async fn throughput(size: u64, transport: Transport, trials: usize) -> Result<Vec<ThroughputRow>, BenchError> {
    let mesh = LocalMesh::start(1).await?;
    throughput_on(&mesh, 0, &[transport], size, trials).await
}

/// Runs every transport in turn within each trial, so they share conditions.
pub async fn throughput_on(
    mesh: &LocalMesh,
    station: usize,
    transports: &[Transport],
    size: u64,
    trials: usize,
) -> Result<Vec<ThroughputRow>, BenchError> {
    let agent = mesh.launch(FILE_ACCESS, json!({}), station).await?;
    let Attached::Session(mut session) = mesh.attach(agent).await? else {
        return Err(BenchError::Failed("file-access agent ended early".into()));
    };
    let mut rows = Vec::new();
    let mut data = vec![0u8; size as usize];
    for trial in 0..trials {
        rand::rng().fill_bytes(&mut data);
        for &t in transports {
            let path = format!("bench-{}-{trial}.bin", t.as_str().to_ascii_lowercase());
            let started = Instant::now();
            session.write_file(&path, &data, t).await?;
            let write = started.elapsed();
            let stored = std::fs::read(mesh.fs_root(station).join(&path)).map_err(StationError::Io)?;
            if stored != data {
                return Err(BenchError::Failed(format!("{} write of {size} bytes stored different bytes", t.as_str())));
            }
            let started = Instant::now();
            let back = session.read_file(&path, t).await?;
            let read = started.elapsed();
            if back != data {
                return Err(BenchError::Failed(format!("{} read of {size} bytes returned different bytes", t.as_str())));
            }
            let _ = std::fs::remove_file(mesh.fs_root(station).join(&path));
            for (direction, elapsed) in [("write", write), ("read", read)] {
                rows.push(ThroughputRow {
                    direction: direction.into(),
                    transport: t.as_str().into(),
                    size,
                    mb_per_s: rate(size, elapsed),
                });
            }
        }
    }
    session.finish().await?;
    Ok(rows)
}

/// Median rate per (direction, transport).
pub fn medians(rows: &[ThroughputRow]) -> Vec<ThroughputRow> {
    let mut groups: Vec<((String, String, u64), Vec<f64>)> = Vec::new();
    for r in rows {
        let key = (r.direction.clone(), r.transport.clone(), r.size);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.mb_per_s),
            None => groups.push((key, vec![r.mb_per_s])),
        }
    }
    groups
        .into_iter()
        .map(|((direction, transport, size), mut v)| ThroughputRow { direction, transport, size, mb_per_s: median(&mut v) })
        .collect()
}

pub fn write_csv(rows: &[ThroughputRow], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
