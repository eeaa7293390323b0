//! Crash both stations in the middle of a move, right after the source has
//! logged its decision, then restart them and watch recovery settle on a
//! single live copy.
//!
//!     cargo run --example crash_recovery

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use agentmesh::agents::FILE_ACCESS;
use agentmesh::localmesh::{eventually, LocalMesh, MeshOptions};
use agentmesh::migration::MoveStep;
use agentmesh::station::{CrashSwitch, StationOptions};
use serde_json::json;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dest_switch: Arc<Mutex<Option<CrashSwitch>>> = Arc::default();
    let armed = Arc::new(AtomicBool::new(false));
    let (sw, arm) = (dest_switch.clone(), armed.clone());
    let mut mesh = LocalMesh::start_with(MeshOptions::stations(2), move |i| {
        let (sw, arm) = (sw.clone(), arm.clone());
        StationOptions {
            // The source dies right after logging COMMIT and takes the
            // destination down with it.
            hook: (i == 0).then(|| {
                Arc::new(move |step: MoveStep, _: &_| {
                    if step != MoveStep::Decided || !arm.swap(false, Ordering::SeqCst) {
                        return false;
                    }
                    if let Some(s) = sw.lock().unwrap().as_ref() {
                        s.trip();
                    }
                    true
                }) as agentmesh::station::StepHook
            }),
            ..StationOptions::default()
        }
    })
    .await?;
    *dest_switch.lock().unwrap() = Some(mesh.station(1).crash_switch());

    let agent = mesh.launch(FILE_ACCESS, json!({}), 0).await?;
    armed.store(true, Ordering::SeqCst);
    mesh.station(0).request_move(&agent, mesh.endpoint(1))?;
    eventually(Duration::from_secs(5), || mesh.station(0).is_crashed() && mesh.station(1).is_crashed()).await;
    println!("both stations crashed mid-move");

    mesh.restart(0).await?;
    mesh.restart(1).await?;
    for i in 0..2 {
        let st = mesh.station(i).status();
        println!("{} after restart: {} agents, {} in-doubt holds, {} unfinalized", st.station_id, st.agents.len(), st.holds.len(), st.unfinalized);
    }

    eventually(Duration::from_secs(10), || {
        (0..2).all(|i| {
            let st = mesh.station(i).status();
            st.holds.is_empty() && st.unfinalized == 0
        })
    })
    .await;
    let live: Vec<_> = (0..2).filter(|&i| mesh.station(i).status().agent(&agent).is_some()).map(|i| mesh.station_id(i)).collect();
    println!("agent now lives at {live:?}");
    Ok(())
}
