//! Leases in action: a station that stops renewing drops out of the
//! registry, and comes back with its next heartbeat.
//!
//!     cargo run --example lease_healing

use std::time::{Duration, Instant};

use agentmesh::localmesh::{LocalMesh, MeshOptions};
use agentmesh::lookup::{Filter, ServiceType};
use agentmesh::station::StationOptions;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let opts = MeshOptions { stations: 2, lease_ms: 2_000, heartbeat_ms: 600, sweep_ms: 500, ..MeshOptions::default() };
    let mesh = LocalMesh::start_with(opts, |_| StationOptions::default()).await?;
    let mut events = mesh.registry.registry().subscribe(Filter::kind(ServiceType::Station));
    let started = Instant::now();
    let watcher = tokio::spawn(async move {
        while let Some(e) = events.recv().await {
            if !matches!(e.kind, agentmesh::lookup::EventKind::Renewed) {
                println!("{:>6} ms  {:?} {}", started.elapsed().as_millis(), e.kind, e.record.service_id);
            }
        }
    });

    println!("pausing heartbeat of {}", mesh.station_id(1));
    mesh.station(1).pause_heartbeat();
    tokio::time::sleep(Duration::from_secs(3)).await;
    println!("resuming");
    mesh.station(1).resume_heartbeat();
    tokio::time::sleep(Duration::from_millis(500)).await;
    watcher.abort();
    Ok(())
}
