//! The HTTP gateway a browser console talks to. Starts a mesh and a gateway,
//! drives a few calls over HTTP, then keeps serving until Ctrl-C.
//!
//!     cargo run --example gateway
//!     curl localhost:<port>/api/registry

use agentmesh::localmesh::LocalMesh;
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mesh = LocalMesh::start(2).await?;
    let gw = mesh.gateway().await?;
    let http = reqwest::Client::new();
    let url = |p: &str| format!("{}{p}", gw.url());

    let launched: Value = http
        .post(url("/api/agents"))
        .json(&json!({ "behavior_id": "file-access/1", "dest": "station-1" }))
        .send()
        .await?
        .json()
        .await?;
    let agent = launched["agent_id"].as_str().unwrap_or_default().to_string();
    println!("POST /api/agents -> {launched}");

    let moved = http.post(url(&format!("/api/agents/{agent}/move"))).json(&json!({ "dest": "station-2" })).send().await?;
    println!("POST /api/agents/{agent}/move -> {}", moved.status());
    tokio::time::sleep(std::time::Duration::from_millis(300)).await;

    let loc: Value = http.get(url(&format!("/api/agents/{agent}/location"))).send().await?.json().await?;
    println!("GET location -> {loc}");

    let session: Value = http.post(url(&format!("/api/agents/{agent}/attach-session"))).send().await?.json().await?;
    let sid = session["session_id"].as_str().unwrap_or_default();
    http.put(url(&format!("/api/sessions/{sid}/files?path=hello.txt"))).body("hello from the console").send().await?;
    let listing: Value = http.post(url(&format!("/api/sessions/{sid}/command"))).json(&json!({ "cmd": "LIST", "path": "" })).send().await?.json().await?;
    println!("LIST -> {listing}");

    println!("gateway serving at {} (Ctrl-C to stop)", gw.url());
    tokio::signal::ctrl_c().await?;
    Ok(())
}
