//! TCP front end of the registry.
//!
//! Requests: REGISTER, RENEW, UNREGISTER, LOOKUP, SUBSCRIBE, PING. A
//! SUBSCRIBE turns the connection into a one-way stream of EVENT frames.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

use super::{Filter, LeasePolicy, Registry, RegistryError, ServiceInfo};
use crate::clock::now_ms;
use crate::wire::{recv_message, send_message, FrameError, Message};

#[derive(Debug, Clone)]
pub struct RegistryServerConfig {
    pub listen: String,
    pub policy: LeasePolicy,
    pub sweep_ms: u64,
}

impl Default for RegistryServerConfig {
    fn default() -> Self {
        RegistryServerConfig {
            listen: "127.0.0.1:0".into(),
            policy: LeasePolicy::default(),
            sweep_ms: super::DEFAULT_SWEEP_MS,
        }
    }
}

/// A running registry daemon. Dropping it stops the listener and sweeper.
pub struct RegistryServer {
    addr: SocketAddr,
    registry: Arc<Registry>,
    tasks: Vec<JoinHandle<()>>,
}

impl RegistryServer {
    pub async fn start(config: RegistryServerConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind(&config.listen).await?;
        let addr = listener.local_addr()?;
        let registry = Arc::new(Registry::new(config.policy));
        let accept = tokio::spawn(accept_loop(listener, registry.clone()));
        let sweeper = tokio::spawn(sweep_loop(registry.clone(), config.sweep_ms));
        tracing::info!(%addr, "registry listening");
        Ok(RegistryServer { addr, registry, tasks: vec![accept, sweeper] })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn shutdown(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }

    /// Resolves when the daemon's tasks exit (normally never).
    pub async fn wait(mut self) {
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
    }
}

impl Drop for RegistryServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Sweeps every `sweep_ms`, or sooner when a lease is about to lapse.
async fn sweep_loop(registry: Arc<Registry>, sweep_ms: u64) {
    loop {
        let now = now_ms();
        let mut wake = now + sweep_ms;
        if let Some(expiry) = registry.next_expiry() {
            wake = wake.min(expiry + 1);
        }
        tokio::time::sleep(Duration::from_millis(wake.saturating_sub(now).max(1))).await;
        let expired = registry.sweep(now_ms());
        if !expired.is_empty() {
            tracing::info!(?expired, "leases expired");
        }
    }
}

async fn accept_loop(listener: TcpListener, registry: Arc<Registry>) {
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                stream.set_nodelay(true).ok();
                tokio::spawn(serve_connection(stream, registry.clone()));
            }
            Err(e) => {
                tracing::warn!("registry accept failed: {e}");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

#[derive(Deserialize)]
struct RegisterReq {
    service: ServiceInfo,
    duration_ms: u64,
}

#[derive(Deserialize)]
struct RenewReq {
    service_id: String,
    duration_ms: u64,
}

#[derive(Deserialize)]
struct IdReq {
    service_id: String,
}

#[derive(Deserialize, Default)]
struct FilterReq {
    #[serde(default)]
    filter: Filter,
}

fn parse<T: for<'de> Deserialize<'de>>(payload: Value) -> Result<T, Message> {
    serde_json::from_value(payload).map_err(|e| Message::error("BAD_REQUEST", e))
}

fn registry_error(e: RegistryError) -> Message {
    Message::error(e.code(), &e)
}

async fn serve_connection(mut stream: TcpStream, registry: Arc<Registry>) {
    loop {
        let msg = match recv_message(&mut stream).await {
            Ok(Some(m)) => m,
            Ok(None) => return,
            Err(FrameError::Io(_)) => return,
            Err(e) => {
                let _ = send_message(&mut stream, &Message::error(e.code(), &e)).await;
                return;
            }
        };
        if msg.kind == "SUBSCRIBE" {
            let filter = match parse::<FilterReq>(msg.payload) {
                Ok(req) => req.filter,
                Err(reply) => {
                    let _ = send_message(&mut stream, &reply).await;
                    continue;
                }
            };
            stream_events(stream, &registry, filter).await;
            return;
        }
        let reply = handle(&registry, msg);
        if send_message(&mut stream, &reply).await.is_err() {
            return;
        }
    }
}

fn handle(registry: &Registry, msg: Message) -> Message {
    let now = now_ms();
    let result = match msg.kind.as_str() {
        "PING" => Ok(Message::bare("PONG")),
        "REGISTER" => parse::<RegisterReq>(msg.payload).and_then(|req| {
            registry
                .register(req.service, req.duration_ms, now)
                .map(|lease| Message::new("LEASE", json!(lease)))
                .map_err(registry_error)
        }),
        "RENEW" => parse::<RenewReq>(msg.payload).and_then(|req| {
            registry
                .renew(&req.service_id, req.duration_ms, now)
                .map(|lease| Message::new("LEASE", json!(lease)))
                .map_err(registry_error)
        }),
        "UNREGISTER" => parse::<IdReq>(msg.payload).and_then(|req| {
            registry.unregister(&req.service_id, now).map(|_| Message::bare("OK")).map_err(registry_error)
        }),
        "LOOKUP" => {
            let req = if msg.payload.is_null() { Ok(FilterReq::default()) } else { parse::<FilterReq>(msg.payload) };
            req.map(|req| Message::new("RECORDS", json!({ "records": registry.lookup(&req.filter, now) })))
        }
        other => Err(Message::error("UNKNOWN_REQUEST", format!("unknown request type {other}"))),
    };
    result.unwrap_or_else(|e| e)
}

async fn stream_events(mut stream: TcpStream, registry: &Registry, filter: Filter) {
    let mut rx = registry.subscribe(filter);
    if send_message(&mut stream, &Message::bare("SUBSCRIBED")).await.is_err() {
        return;
    }
    let (mut reader, mut writer) = stream.split();
    let mut sink = [0u8; 64];
    loop {
        tokio::select! {
            event = rx.recv() => {
                let Some(event) = event else {
                    // Overflowed: tell the subscriber, then hang up so it reconciles.
                    let _ = send_message(&mut writer, &Message::error("OVERFLOW", "subscriber buffer overflowed")).await;
                    return;
                };
                if send_message(&mut writer, &Message::new("EVENT", json!(event))).await.is_err() {
                    return;
                }
            }
            read = tokio::io::AsyncReadExt::read(&mut reader, &mut sink) => {
                if matches!(read, Ok(0) | Err(_)) {
                    return;
                }
            }
        }
    }
}
