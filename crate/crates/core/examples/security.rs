//! What a station checks before running an arriving agent, and how an
//! owner proves who they are when attaching.
//!
//!     cargo run --example security

use agentmesh::agents::FILE_ACCESS;
use agentmesh::client::attach;
use agentmesh::codeserver::CodeBundle;
use agentmesh::localmesh::{stranger, LocalMesh};
use agentmesh::security::{admit_agent, sha256_hex, TrustStore};
use agentmesh::agents::BehaviorRegistry;
use serde_json::json;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mesh = LocalMesh::start(1).await?;
    let bundle = CodeBundle::new(FILE_ACCESS, "1", format!("builtin {FILE_ACCESS}").into_bytes()).encode();
    let snapshot = mesh.spec(FILE_ACCESS, json!({}), 0).snapshot(&BehaviorRegistry::builtin())?;

    let mut trusted = TrustStore::new();
    trusted.accept(&mesh.owner_cert);
    let mut tampered = bundle.clone();
    *tampered.last_mut().unwrap() ^= 1;
    let mut rehashed = snapshot.clone();
    rehashed.bundle_ref.sha256 = sha256_hex(&tampered);

    println!("intact, trusted        -> {}", admit_agent(&snapshot, &bundle, &trusted).code());
    println!("intact, nobody trusted -> {}", admit_agent(&snapshot, &bundle, &TrustStore::new()).code());
    println!("bytes swapped          -> {}", admit_agent(&snapshot, &tampered, &trusted).code());
    println!("swapped and re-hashed  -> {}", admit_agent(&rehashed, &tampered, &trusted).code());

    let agent = mesh.launch(FILE_ACCESS, json!({}), 0).await?;
    let (wrong, _) = stranger("mallory");
    for (who, key) in [("owner key", &mesh.owner_key), ("other key", &wrong)] {
        match attach(mesh.endpoint(0), agent, Some(key)).await {
            Ok(_) => println!("{who}: granted"),
            Err(e) => println!("{who}: {}", e.code()),
        }
    }
    Ok(())
}
