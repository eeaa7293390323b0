//! Send a search agent around every station; it scores files against the
//! query terms and comes home with one ranked list.
//!
//!     cargo run --example search_tour -- grid mesh

use agentmesh::agents::{BehaviorRegistry, SEARCH};
use agentmesh::client;
use agentmesh::localmesh::LocalMesh;
use std::time::Duration;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut terms: Vec<String> = std::env::args().skip(1).collect();
    if terms.is_empty() {
        terms = vec!["grid".into(), "mesh".into()];
    }
    let mesh = LocalMesh::start(3).await?;
    let docs = [
        ("plan.txt", "The grid needs a mesh of stations. Grid first."),
        ("notes/todo.md", "mesh mesh mesh"),
        ("log.txt", "nothing relevant"),
    ];
    for i in 0..mesh.len() {
        for (path, text) in docs {
            let p = mesh.fs_root(i).join(path);
            std::fs::create_dir_all(p.parent().unwrap())?;
            std::fs::write(p, format!("{text} (copy {i})"))?;
        }
    }

    let mut spec = mesh.spec(SEARCH, serde_json::json!({ "terms": terms }), 0);
    spec.itinerary = (0..mesh.len()).map(|i| mesh.endpoint(i).to_string()).collect();
    let agent = client::launch(&spec, &BehaviorRegistry::builtin()).await?;
    let outcome = client::wait_finished(mesh.endpoint(0), agent, Some(&mesh.owner_key), Duration::from_secs(20)).await?;

    let result = outcome.result_json().unwrap_or_default();
    for hit in result["hits"].as_array().into_iter().flatten() {
        println!("{:>4}  {}:{}", hit["weight"], hit["station_id"].as_str().unwrap_or(""), hit["path"].as_str().unwrap_or(""));
    }
    println!("skipped {} unreadable files", result["skipped"]);
    Ok(())
}
