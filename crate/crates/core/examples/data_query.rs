//! A station exposes a CSV file as a table; a data-query agent answers
//! conjunctive filters over it.
//!
//!     cargo run --example data_query

use agentmesh::agents::DATA_QUERY;
use agentmesh::client::Attached;
use agentmesh::localmesh::{LocalMesh, MeshOptions};
use agentmesh::station::StationOptions;
use serde_json::json;

const STAFF: &str = "\
name,age,city,salary
ana,34,Oslo,5200.50
bo,27,Lima,3100
cy,41,Oslo,6100
dee,52,Rome,7300.25
eli,29,Oslo,4100
";

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let opts = MeshOptions::stations(1).tweak(|_, cfg| {
        let path = cfg.data_dir.parent().unwrap().join("staff.csv");
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, STAFF).unwrap();
        cfg.tables.insert("staff".into(), path);
    });
    let mesh = LocalMesh::start_with(opts, |_| StationOptions::default()).await?;
    let agent = mesh.launch(DATA_QUERY, json!({}), 0).await?;
    let Attached::Session(mut s) = mesh.attach(agent).await? else {
        return Err("agent already finished".into());
    };

    for t in s.list_catalog().await? {
        println!("table {} ({})", t.name, t.columns.join(", "));
    }

    let queries = [
        json!("city = Oslo AND age > 30"),
        json!("salary >= 5000"),
        json!([{ "column": "name", "op": "<", "value": "c" }]),
    ];
    for q in queries {
        let r = s.query("staff", &["name", "age", "salary"], q.clone()).await?;
        println!("{q}");
        for row in r.rows {
            println!("    {}", row.join("  "));
        }
    }

    match s.query("payroll", &[], json!(null)).await {
        Err(e) => println!("unknown table: {}", e.code()),
        Ok(_) => println!("unexpected answer"),
    }
    Ok(())
}
