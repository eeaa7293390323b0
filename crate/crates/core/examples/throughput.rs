//! Compare file transfer over the framed control channel with the raw bulk
//! stream.
//!
//!     cargo run --release --example throughput -- 16777216 5

use agentmesh::bench::{medians, throughput_on};
use agentmesh::client::Transport;
use agentmesh::localmesh::LocalMesh;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let size: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(4 << 20);
    let trials: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);

    let mesh = LocalMesh::start(1).await?;
    let rows = throughput_on(&mesh, 0, &[Transport::Control, Transport::Stream], size, trials).await?;
    println!("{size} bytes, {trials} trials, median MB/s:");
    for r in medians(&rows) {
        println!("  {:<5} {:<7} {:>9.1}", r.direction, r.transport, r.mb_per_s);
    }
    Ok(())
}
