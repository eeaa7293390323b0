//! Attach to a file-access agent as its owner and move files both ways,
//! over the control channel and the bulk stream.
//!
//!     cargo run --example file_access

use agentmesh::agents::FILE_ACCESS;
use agentmesh::client::{Attached, Transport};
use agentmesh::localmesh::LocalMesh;
use serde_json::json;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mesh = LocalMesh::start(1).await?;
    std::fs::create_dir_all(mesh.fs_root(0).join("reports"))?;
    std::fs::write(mesh.fs_root(0).join("reports/q3.txt"), "revenue up, costs flat\n")?;

    let agent = mesh.launch(FILE_ACCESS, json!({}), 0).await?;
    let Attached::Session(mut s) = mesh.attach(agent).await? else {
        return Err("agent already finished".into());
    };

    for e in s.list("reports").await? {
        println!("{:?} {} ({} bytes)", e.kind, e.name, e.size);
    }
    let text = s.read_file("reports/q3.txt", Transport::Control).await?;
    print!("q3.txt: {}", String::from_utf8_lossy(&text));

    let blob: Vec<u8> = (0..4 << 20).map(|i: u32| (i % 251) as u8).collect();
    s.write_file("upload.bin", &blob, Transport::Stream).await?;
    let back = s.read_file("upload.bin", Transport::Stream).await?;
    println!("stream round trip of {} bytes: {}", blob.len(), if back == blob { "identical" } else { "DIFFERENT" });

    match s.read_file("../../etc/passwd", Transport::Control).await {
        Err(e) => println!("escape attempt refused: {}", e.code()),
        Ok(_) => println!("escape attempt succeeded?!"),
    }

    let outcome = s.finish().await?;
    println!("agent ended {:?}", outcome.outcome);
    Ok(())
}
