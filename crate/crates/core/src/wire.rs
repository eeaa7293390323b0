//! Shared domain types, canonical JSON, and the length-prefixed frame codec.
//!
//! Every network channel in the mesh (registry, station wire port, attach
//! sessions) carries frames: a 4-byte big-endian body length followed by a
//! UTF-8 JSON object. Anything that is hashed or signed goes through
//! [`canonical_json`] so digests are reproducible.

use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::security::{BundleSignature, Certificate};

/// Largest permitted frame body. Bulk data belongs on the stream channel.
pub const MAX_FRAME_BODY: usize = 1 << 24;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame body of {0} bytes exceeds the {MAX_FRAME_BODY}-byte cap")]
    Oversize(usize),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl FrameError {
    pub fn code(&self) -> &'static str {
        match self {
            FrameError::Oversize(_) => "OVERSIZE",
            FrameError::Malformed(_) => "MALFORMED",
            FrameError::Truncated => "TRUNCATED",
            FrameError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("schema mismatch: {0}")]
pub struct SchemaMismatch(pub String);

// ---------------------------------------------------------------------------
// Canonical JSON
// ---------------------------------------------------------------------------

/// Serializes a JSON value with lexicographically sorted object keys and no
/// insignificant whitespace.
pub fn canonical_json(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_canonical(value, &mut out);
    out
}

/// Canonical encoding of any serializable value.
pub fn canonical_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    Ok(canonical_json(&serde_json::to_value(value)?))
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                // Strings never fail to serialize.
                serde_json::to_writer(&mut *out, key).expect("string serialization");
                out.push(b':');
                write_canonical(&map[key], out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        scalar => serde_json::to_writer(&mut *out, scalar).expect("scalar serialization"),
    }
}

// ---------------------------------------------------------------------------
// Frames
// ---------------------------------------------------------------------------

/// Encodes a JSON object as one frame.
pub fn encode_frame(message: &Value) -> Result<Vec<u8>, FrameError> {
    if !message.is_object() {
        return Err(FrameError::Malformed("frame body must be a JSON object".into()));
    }
    let body = canonical_json(message);
    if body.len() > MAX_FRAME_BODY {
        return Err(FrameError::Oversize(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

fn parse_body(body: &[u8]) -> Result<Value, FrameError> {
    let text = std::str::from_utf8(body).map_err(|e| FrameError::Malformed(e.to_string()))?;
    let value: Value =
        serde_json::from_str(text).map_err(|e| FrameError::Malformed(e.to_string()))?;
    if !value.is_object() {
        return Err(FrameError::Malformed("frame body is not a JSON object".into()));
    }
    Ok(value)
}

fn map_eof(e: io::Error) -> FrameError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        FrameError::Truncated
    } else {
        FrameError::Io(e)
    }
}

/// Reads exactly one frame from a blocking byte source.
pub fn decode_frame<R: Read>(reader: &mut R) -> Result<Value, FrameError> {
    let mut len = [0u8; 4];
    reader.read_exact(&mut len).map_err(map_eof)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BODY {
        return Err(FrameError::Oversize(len));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).map_err(map_eof)?;
    parse_body(&body)
}

pub fn write_frame_sync<W: Write>(writer: &mut W, message: &Value) -> Result<(), FrameError> {
    writer.write_all(&encode_frame(message)?)?;
    Ok(())
}

/// Async counterpart of [`decode_frame`]. Returns `Ok(None)` on a clean EOF at
/// a frame boundary.
pub async fn read_frame<R: AsyncRead + Unpin>(reader: &mut R) -> Result<Option<Value>, FrameError> {
    let mut len = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = reader.read(&mut len[filled..]).await?;
        if n == 0 {
            return if filled == 0 { Ok(None) } else { Err(FrameError::Truncated) };
        }
        filled += n;
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BODY {
        return Err(FrameError::Oversize(len));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).await.map_err(map_eof)?;
    parse_body(&body).map(Some)
}

pub async fn write_frame<W: AsyncWrite + Unpin>(writer: &mut W, message: &Value) -> Result<(), FrameError> {
    let bytes = encode_frame(message)?;
    writer.write_all(&bytes).await?;
    writer.flush().await?;
    Ok(())
}

/// A decoded frame split into its conventional parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: String,
    pub txn_id: Option<String>,
    pub payload: Value,
}

impl Message {
    pub fn new(kind: impl Into<String>, payload: Value) -> Self {
        Message { kind: kind.into(), txn_id: None, payload }
    }

    pub fn bare(kind: impl Into<String>) -> Self {
        Message::new(kind, Value::Null)
    }

    pub fn with_txn(mut self, txn_id: impl Into<String>) -> Self {
        self.txn_id = Some(txn_id.into());
        self
    }

    pub fn error(code: &str, message: impl fmt::Display) -> Self {
        Message::new("ERROR", serde_json::json!({ "code": code, "message": message.to_string() }))
    }

    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        map.insert("type".into(), Value::String(self.kind.clone()));
        if let Some(txn) = &self.txn_id {
            map.insert("txn_id".into(), Value::String(txn.clone()));
        }
        if !self.payload.is_null() {
            map.insert("payload".into(), self.payload.clone());
        }
        Value::Object(map)
    }

    pub fn from_value(value: Value) -> Result<Self, FrameError> {
        let Value::Object(mut map) = value else {
            return Err(FrameError::Malformed("frame body is not a JSON object".into()));
        };
        let kind = match map.remove("type") {
            Some(Value::String(s)) => s,
            _ => return Err(FrameError::Malformed("missing \"type\"".into())),
        };
        let txn_id = match map.remove("txn_id") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(FrameError::Malformed("\"txn_id\" must be a string".into())),
        };
        let payload = map.remove("payload").unwrap_or(Value::Null);
        Ok(Message { kind, txn_id, payload })
    }

    /// For `ERROR` messages, the `(code, message)` pair.
    pub fn as_error(&self) -> Option<(String, String)> {
        if self.kind != "ERROR" {
            return None;
        }
        let code = self.payload.get("code").and_then(Value::as_str).unwrap_or("UNKNOWN");
        let msg = self.payload.get("message").and_then(Value::as_str).unwrap_or("");
        Some((code.to_string(), msg.to_string()))
    }
}

pub async fn send_message<W: AsyncWrite + Unpin>(writer: &mut W, msg: &Message) -> Result<(), FrameError> {
    write_frame(writer, &msg.to_value()).await
}

pub async fn recv_message<R: AsyncRead + Unpin>(reader: &mut R) -> Result<Option<Message>, FrameError> {
    match read_frame(reader).await? {
        Some(v) => Message::from_value(v).map(Some),
        None => Ok(None),
    }
}

/// Transport failure of a single request/response exchange.
#[derive(Debug, Error)]
pub enum RpcError {
    #[error("cannot connect to {endpoint}: {source}")]
    Connect { endpoint: String, source: io::Error },
    #[error("no reply from {0} within the deadline")]
    Timeout(String),
    #[error("connection to {0} closed before a reply")]
    Closed(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Opens a connection, sends one message, and waits for one reply.
pub async fn round_trip(endpoint: &str, request: &Message, timeout: std::time::Duration) -> Result<Message, RpcError> {
    let exchange = async {
        let mut stream = tokio::net::TcpStream::connect(endpoint)
            .await
            .map_err(|source| RpcError::Connect { endpoint: endpoint.to_string(), source })?;
        stream.set_nodelay(true).ok();
        send_message(&mut stream, request).await?;
        recv_message(&mut stream).await?.ok_or_else(|| RpcError::Closed(endpoint.to_string()))
    };
    tokio::time::timeout(timeout, exchange).await.map_err(|_| RpcError::Timeout(endpoint.to_string()))?
}

// ---------------------------------------------------------------------------
// Identifiers
// ---------------------------------------------------------------------------

macro_rules! hex_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name([u8; 16]);

        impl $name {
            pub fn random() -> Self {
                $name(rand::random())
            }

            pub const fn from_bytes(bytes: [u8; 16]) -> Self {
                $name(bytes)
            }

            pub fn as_bytes(&self) -> &[u8; 16] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl FromStr for $name {
            type Err = SchemaMismatch;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                if s.len() != 32 || s.bytes().any(|b| b.is_ascii_uppercase()) {
                    return Err(SchemaMismatch(format!("expected 32 lowercase hex chars, got {s:?}")));
                }
                let mut out = [0u8; 16];
                hex::decode_to_slice(s, &mut out).map_err(|e| SchemaMismatch(e.to_string()))?;
                Ok($name(out))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_id!(
    /// 128-bit agent identity, stable across migrations.
    AgentId
);
hex_id!(
    /// 128-bit migration transaction identity.
    TxnId
);

// ---------------------------------------------------------------------------
// Snapshot
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServiceKind {
    /// Registered with the lookup service wherever it resides.
    Service,
    /// Never registered; reachable only through its station.
    Private,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TravelEntry {
    pub station_id: String,
    pub arrival: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub departure: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleRef {
    pub url: String,
    pub sha256: String,
    pub signature: BundleSignature,
}

/// The marshalled agent: everything except its code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSnapshot {
    pub agent_id: AgentId,
    pub behavior_id: String,
    pub bundle_ref: BundleRef,
    pub owner_cert: Certificate,
    pub service_kind: ServiceKind,
    pub open_access: bool,
    #[serde(with = "b64")]
    pub state_blob: Vec<u8>,
    pub itinerary: Vec<String>,
    pub hop_index: usize,
    pub travel_log: Vec<TravelEntry>,
}

impl AgentSnapshot {
    /// Checks the structural invariants a marshalled snapshot must satisfy.
    pub fn validate(&self) -> Result<(), SchemaMismatch> {
        if self.hop_index > self.itinerary.len() {
            return Err(SchemaMismatch(format!(
                "hop_index {} exceeds itinerary length {}",
                self.hop_index,
                self.itinerary.len()
            )));
        }
        validate_travel_log(&self.travel_log)
    }

    /// Whole-snapshot SHA-256 over the canonical encoding.
    pub fn digest(&self) -> String {
        crate::security::sha256_hex(&marshal_snapshot(self))
    }
}

pub fn validate_travel_log(log: &[TravelEntry]) -> Result<(), SchemaMismatch> {
    let mut last = 0u64;
    for (i, entry) in log.iter().enumerate() {
        if entry.arrival < last {
            return Err(SchemaMismatch(format!("travel_log[{i}] arrival goes backwards")));
        }
        last = entry.arrival;
        if let Some(dep) = entry.departure {
            if dep < entry.arrival {
                return Err(SchemaMismatch(format!("travel_log[{i}] departs before arriving")));
            }
            last = dep;
        } else if i + 1 != log.len() {
            return Err(SchemaMismatch(format!("travel_log[{i}] has no departure but is not last")));
        }
    }
    Ok(())
}

/// Canonical marshalled form of a snapshot.
pub fn marshal_snapshot(snapshot: &AgentSnapshot) -> Vec<u8> {
    canonical_bytes(snapshot).expect("snapshot serializes")
}

pub fn unmarshal_snapshot(bytes: &[u8]) -> Result<AgentSnapshot, SchemaMismatch> {
    let snapshot: AgentSnapshot =
        serde_json::from_slice(bytes).map_err(|e| SchemaMismatch(e.to_string()))?;
    snapshot.validate()?;
    Ok(snapshot)
}

/// Serde adapter for byte vectors carried as standard base64 strings.
pub mod b64 {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

pub fn b64_encode(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn b64_decode(text: &str) -> Result<Vec<u8>, SchemaMismatch> {
    base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| SchemaMismatch(format!("bad base64: {e}")))
}
