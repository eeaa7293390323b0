//! Start a three-station mesh, launch an agent, and find it again through
//! the registry.
//!
//!     cargo run --example launch_and_discover

use agentmesh::agents::FILE_ACCESS;
use agentmesh::client;
use agentmesh::localmesh::LocalMesh;
use agentmesh::lookup::{Filter, ServiceType};
use serde_json::json;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mesh = LocalMesh::start(3).await?;
    println!("registry at {}", mesh.registry_endpoint());

    let agent = mesh.launch(FILE_ACCESS, json!({}), 1).await?;
    println!("launched {agent} at {}", mesh.station_id(1));

    for r in client::discover(&mesh.registry_endpoint(), &Filter::any()).await? {
        println!("{:<34} {:<8} {:<22} {:?}", r.service_id, format!("{:?}", r.kind), r.endpoint, r.attributes);
    }

    let stations = client::discover(&mesh.registry_endpoint(), &Filter::kind(ServiceType::Station)).await?;
    println!("{} stations", stations.len());

    let loc = client::locate(&mesh.registry_endpoint(), &agent).await?;
    println!("{agent} is at {} ({})", loc.station_id, loc.endpoint);
    Ok(())
}
