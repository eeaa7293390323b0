//! Move an agent between stations with the admin API, read the travel log
//! it carries, then recall it home.
//!
//!     cargo run --example migration_and_recall

use std::time::Duration;

use agentmesh::agents::FILE_ACCESS;
use agentmesh::client::{self, AdminClient};
use agentmesh::localmesh::{eventually, LocalMesh};
use serde_json::json;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mesh = LocalMesh::start(3).await?;
    let agent = mesh.launch(FILE_ACCESS, json!({}), 0).await?;

    for (from, to) in [(0, 1), (1, 2)] {
        AdminClient::new(mesh.station(from).admin_url()).move_agent(&agent, mesh.endpoint(to)).await?;
        eventually(Duration::from_secs(10), || mesh.whereis(&agent) == Some(to)).await;
        println!("moved {} -> {}", mesh.station_id(from), mesh.station_id(to));
    }

    for e in client::travel_log(&mesh.registry_endpoint(), &agent).await? {
        println!("{:<10} arrived {} departed {:?}", e.station_id, e.arrival, e.departure);
    }

    let outcome = client::recall(&mesh.registry_endpoint(), &agent, mesh.endpoint(0), Some(&mesh.owner_key)).await?;
    println!("recalled to {}: {:?}", mesh.station_id(0), outcome.outcome);
    Ok(())
}
