use std::time::Duration;

use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::net::TcpStream;

use super::{Filter, Lease, RegistryEvent, ServiceInfo, ServiceRecord};
use crate::wire::{recv_message, round_trip, send_message, FrameError, Message, RpcError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("unexpected reply: {0}")]
    Protocol(String),
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::Remote { code, .. } => code,
            ClientError::Rpc(_) => "UNREACHABLE",
            ClientError::Protocol(_) => "PROTOCOL",
        }
    }

    pub fn is_not_found(&self) -> bool {
        self.code() == "NOT_FOUND"
    }
}

impl From<FrameError> for ClientError {
    fn from(e: FrameError) -> Self {
        ClientError::Rpc(RpcError::Frame(e))
    }
}

/// Typed client for the registry's wire protocol. Each call uses its own
/// short-lived connection, so a client is cheap to clone and share.
#[derive(Debug, Clone)]
pub struct RegistryClient {
    endpoint: String,
    timeout: Duration,
}

impl RegistryClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RegistryClient { endpoint: endpoint.into(), timeout: Duration::from_secs(5) }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    async fn call<T: DeserializeOwned>(&self, kind: &str, payload: Value, expect: &str) -> Result<T, ClientError> {
        let reply = round_trip(&self.endpoint, &Message::new(kind, payload), self.timeout).await?;
        expect_reply(reply, expect)
    }

    pub async fn register(&self, service: &ServiceInfo, duration_ms: u64) -> Result<Lease, ClientError> {
        self.call("REGISTER", json!({ "service": service, "duration_ms": duration_ms }), "LEASE").await
    }

    pub async fn renew(&self, service_id: &str, duration_ms: u64) -> Result<Lease, ClientError> {
        self.call("RENEW", json!({ "service_id": service_id, "duration_ms": duration_ms }), "LEASE").await
    }

    pub async fn unregister(&self, service_id: &str) -> Result<(), ClientError> {
        let reply = round_trip(&self.endpoint, &Message::new("UNREGISTER", json!({ "service_id": service_id })), self.timeout).await?;
        expect_ok(reply)
    }

    pub async fn lookup(&self, filter: &Filter) -> Result<Vec<ServiceRecord>, ClientError> {
        #[derive(serde::Deserialize)]
        struct Records {
            records: Vec<ServiceRecord>,
        }
        let r: Records = self.call("LOOKUP", json!({ "filter": filter }), "RECORDS").await?;
        Ok(r.records)
    }

    pub async fn ping(&self) -> Result<(), ClientError> {
        let reply = round_trip(&self.endpoint, &Message::bare("PING"), self.timeout).await?;
        if reply.kind == "PONG" { Ok(()) } else { Err(ClientError::Protocol(reply.kind)) }
    }

    pub async fn subscribe(&self, filter: &Filter) -> Result<Subscription, ClientError> {
        let mut stream = tokio::time::timeout(self.timeout, TcpStream::connect(&self.endpoint))
            .await
            .map_err(|_| RpcError::Timeout(self.endpoint.clone()))?
            .map_err(|source| RpcError::Connect { endpoint: self.endpoint.clone(), source })?;
        send_message(&mut stream, &Message::new("SUBSCRIBE", json!({ "filter": filter }))).await?;
        let reply = recv_message(&mut stream).await?.ok_or_else(|| RpcError::Closed(self.endpoint.clone()))?;
        if let Some((code, message)) = reply.as_error() {
            return Err(ClientError::Remote { code, message });
        }
        if reply.kind != "SUBSCRIBED" {
            return Err(ClientError::Protocol(reply.kind));
        }
        Ok(Subscription { stream })
    }
}

/// Server-pushed registry events.
pub struct Subscription {
    stream: TcpStream,
}

impl Subscription {
    /// Next event, or `None` once the registry hangs up (including after a
    /// buffer overflow, which must be followed by a fresh lookup).
    pub async fn next(&mut self) -> Option<Result<RegistryEvent, ClientError>> {
        match recv_message(&mut self.stream).await {
            Ok(Some(msg)) if msg.kind == "EVENT" => {
                Some(serde_json::from_value(msg.payload).map_err(|e| ClientError::Protocol(e.to_string())))
            }
            Ok(Some(msg)) => match msg.as_error() {
                Some((code, message)) => Some(Err(ClientError::Remote { code, message })),
                None => Some(Err(ClientError::Protocol(msg.kind))),
            },
            Ok(None) => None,
            Err(e) => Some(Err(e.into())),
        }
    }
}

pub(crate) fn expect_reply<T: DeserializeOwned>(reply: Message, expect: &str) -> Result<T, ClientError> {
    if let Some((code, message)) = reply.as_error() {
        return Err(ClientError::Remote { code, message });
    }
    if reply.kind != expect {
        return Err(ClientError::Protocol(format!("expected {expect}, got {}", reply.kind)));
    }
    serde_json::from_value(reply.payload).map_err(|e| ClientError::Protocol(e.to_string()))
}

pub(crate) fn expect_ok(reply: Message) -> Result<(), ClientError> {
    if let Some((code, message)) = reply.as_error() {
        return Err(ClientError::Remote { code, message });
    }
    Ok(())
}
