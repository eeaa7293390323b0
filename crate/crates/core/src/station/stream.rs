//! Raw TCP data channel for bulk file transfer.
//!
//! The station binds an ephemeral port and hands out a 16-byte token. The
//! first client to present the token gets the transfer; the port closes
//! after one transfer or 30 s, whichever comes first.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

use super::Shared;
use crate::agents::StreamPlan;
use crate::wire::AgentId;

pub const TOKEN_LEN: usize = 16;
pub const TOKEN_TTL: Duration = Duration::from_secs(30);
const IO_BUF: usize = 1 << 20;

struct Release<'a>(&'a Shared, AgentId);

impl Drop for Release<'_> {
    fn drop(&mut self) {
        if let Some(r) = self.0.residents.lock().unwrap().get_mut(&self.1) {
            r.streaming = false;
        }
    }
}

/// Opens the channel and returns the STREAM_READY payload.
pub(crate) async fn open(shared: &Arc<Shared>, agent: AgentId, plan: StreamPlan) -> Result<Value, (String, String)> {
    {
        let mut residents = shared.residents.lock().unwrap();
        let r = residents.get_mut(&agent).ok_or(("NOT_RESIDENT".to_string(), "agent left".to_string()))?;
        if r.streaming {
            return Err(("BUSY".into(), "a stream is already open for this agent".into()));
        }
        r.streaming = true;
    }
    let ip = shared.endpoint.parse::<SocketAddr>().map(|a| a.ip()).unwrap_or([127, 0, 0, 1].into());
    let listener = match TcpListener::bind((ip, 0)).await {
        Ok(l) => l,
        Err(e) => {
            drop(Release(shared, agent));
            return Err(("IO_ERROR".into(), e.to_string()));
        }
    };
    let port = listener.local_addr().map(|a| a.port()).unwrap_or(0);
    let token: [u8; TOKEN_LEN] = rand::random();
    let size = match &plan {
        StreamPlan::Read { size, .. } => *size,
        StreamPlan::Write { length, .. } => *length,
    };
    let s = shared.clone();
    shared.spawn(async move {
        let _release = Release(&s, agent);
        let served = tokio::time::timeout(TOKEN_TTL, async {
            loop {
                let Ok((mut conn, _)) = listener.accept().await else { return None };
                let mut presented = [0u8; TOKEN_LEN];
                let ok = tokio::time::timeout(Duration::from_secs(5), conn.read_exact(&mut presented)).await;
                if matches!(ok, Ok(Ok(_))) && presented == token {
                    return Some(conn);
                }
                // Wrong or missing token: drop the connection, keep the token.
            }
        })
        .await;
        let Ok(Some(conn)) = served else {
            tracing::debug!(%agent, "stream token expired unused");
            return;
        };
        drop(listener);
        match transfer(conn, &plan).await {
            Ok(bytes) => {
                s.events.emit("STREAM_DONE", Some(agent), json!({ "bytes": bytes, "direction": direction(&plan) }));
            }
            Err(e) => {
                tracing::info!(%agent, "stream transfer failed: {e}");
                s.events.emit("STREAM_FAILED", Some(agent), json!({ "direction": direction(&plan), "message": e.to_string() }));
            }
        }
    });
    Ok(json!({ "port": port, "token": hex::encode(token), "size": size }))
}

fn direction(plan: &StreamPlan) -> &'static str {
    match plan {
        StreamPlan::Read { .. } => "READ",
        StreamPlan::Write { .. } => "WRITE",
    }
}

async fn transfer(mut conn: TcpStream, plan: &StreamPlan) -> std::io::Result<u64> {
    conn.set_nodelay(true).ok();
    match plan {
        StreamPlan::Read { path, .. } => {
            let file = tokio::fs::File::open(path).await?;
            let n = tokio::io::copy_buf(&mut tokio::io::BufReader::with_capacity(IO_BUF, file), &mut conn).await?;
            conn.shutdown().await?;
            Ok(n)
        }
        StreamPlan::Write { path, length } => {
            let dir = path.parent().ok_or_else(|| std::io::Error::other("target has no parent directory"))?;
            let (file, tmp) = tempfile::NamedTempFile::new_in(dir)?.into_parts();
            let mut file = tokio::io::BufWriter::with_capacity(IO_BUF, tokio::fs::File::from_std(file));
            // Read one byte past the limit to detect an oversized upload.
            let n = tokio::io::copy(&mut (&mut conn).take(length + 1), &mut file).await?;
            if n != *length {
                return Err(std::io::Error::other(format!("expected {length} bytes, got {n}{}", if n > *length { "+" } else { "" })));
            }
            file.flush().await?;
            drop(file);
            tmp.persist(path).map_err(|e| e.error)?;
            // Closing tells the client the data is in place.
            conn.shutdown().await.ok();
            Ok(n)
        }
    }
}
