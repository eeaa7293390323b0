//! Hop one connectivity-test agent around a ring of stations while polling
//! every station and the registry for losses and duplicates.
//!
//!     cargo run --release --example soak -- 3 300 50

use agentmesh::bench::{soak, SoakParams};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let params = SoakParams {
        stations: args.first().copied().unwrap_or(3) as usize,
        hops: args.get(1).copied().unwrap_or(60),
        dwell_ms: args.get(2).copied().unwrap_or(50),
    };
    println!("soak: {} stations, {} hops, {} ms dwell", params.stations, params.hops, params.dwell_ms);
    let r = soak(params).await?;
    println!(
        "hops {}  losses {}  duplicates {}  log entries {}  polls {}  {:.1}s",
        r.hops_completed,
        r.losses,
        r.duplicates,
        r.log_entries,
        r.polls,
        r.wall_time_ms as f64 / 1000.0
    );
    println!("{}", if r.passed { "PASS".to_string() } else { format!("FAIL: {}", r.failure.unwrap_or_default()) });
    Ok(())
}
