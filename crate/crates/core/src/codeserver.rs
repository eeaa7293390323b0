//! Signed, content-addressed code bundles served over HTTP.
//!
//! A bundle is `u32 BE manifest length || canonical manifest JSON || payload`.
//! Published bytes live on disk under their SHA-256 and are served at
//! `GET /bundles/<sha256>`. Publishing is local to the server host.

use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::task::JoinHandle;

use crate::security::{sha256_hex, sign_bundle, Certificate, KeyPair, SecurityError};
use crate::wire::{canonical_bytes, BundleRef};

#[derive(Debug, Error)]
pub enum CodeError {
    #[error("bundle not found")]
    NotFound,
    #[error("bundle bytes do not match the expected sha256")]
    HashMismatch,
    #[error("malformed bundle: {0}")]
    Malformed(String),
    #[error("fetch failed: {0}")]
    Transport(String),
    #[error(transparent)]
    Security(#[from] SecurityError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl CodeError {
    pub fn code(&self) -> &'static str {
        match self {
            CodeError::NotFound => "NOT_FOUND",
            CodeError::HashMismatch => "HASH_MISMATCH",
            CodeError::Malformed(_) => "MALFORMED_BUNDLE",
            CodeError::Transport(_) => "BUNDLE_UNAVAILABLE",
            CodeError::Security(_) => "KEY_CERT_MISMATCH",
            CodeError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub behavior_id: String,
    pub version: String,
    #[serde(default)]
    pub state_schema_hint: Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBundle {
    pub manifest: BundleManifest,
    pub payload: Vec<u8>,
}

impl CodeBundle {
    pub fn new(behavior_id: &str, version: &str, payload: Vec<u8>) -> Self {
        CodeBundle {
            manifest: BundleManifest {
                behavior_id: behavior_id.to_string(),
                version: version.to_string(),
                state_schema_hint: Value::Null,
            },
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = canonical_bytes(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(4 + manifest.len() + self.payload.len());
        out.extend_from_slice(&(manifest.len() as u32).to_be_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodeError> {
        let len_bytes: [u8; 4] = bytes
            .get(..4)
            .ok_or_else(|| CodeError::Malformed("shorter than the length prefix".into()))?
            .try_into()
            .expect("4 bytes");
        let len = u32::from_be_bytes(len_bytes) as usize;
        let manifest = bytes
            .get(4..4 + len)
            .ok_or_else(|| CodeError::Malformed("manifest runs past end".into()))?;
        let manifest: BundleManifest =
            serde_json::from_slice(manifest).map_err(|e| CodeError::Malformed(e.to_string()))?;
        if manifest.behavior_id.is_empty() {
            return Err(CodeError::Malformed("empty behavior_id".into()));
        }
        Ok(CodeBundle { manifest, payload: bytes[4 + len..].to_vec() })
    }
}

fn is_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Immutable on-disk bundle store keyed by digest.
#[derive(Debug, Clone)]
pub struct BundleStore {
    dir: PathBuf,
    base_url: String,
}

impl BundleStore {
    /// `base_url` is the public origin of the HTTP server, e.g.
    /// `http://127.0.0.1:8700`.
    pub fn open(dir: impl Into<PathBuf>, base_url: impl Into<String>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(BundleStore { dir, base_url: base_url.into().trim_end_matches('/').to_string() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn set_base_url(&mut self, base_url: impl Into<String>) {
        self.base_url = base_url.into().trim_end_matches('/').to_string();
    }

    pub fn url_for(&self, digest: &str) -> String {
        format!("{}/bundles/{digest}", self.base_url)
    }

    /// Stores the bundle (once; same bytes give the same reference) and signs
    /// it with the owner's key.
    pub fn publish(&self, bundle: &CodeBundle, key: &KeyPair, cert: &Certificate) -> Result<BundleRef, CodeError> {
        let bytes = bundle.encode();
        let signature = sign_bundle(&bytes, key, cert)?;
        let digest = self.put(&bytes)?;
        Ok(BundleRef { url: self.url_for(&digest), sha256: digest, signature })
    }

    /// Writes raw bytes under their digest: temp file, fsync, rename.
    pub fn put(&self, bytes: &[u8]) -> Result<String, CodeError> {
        let digest = sha256_hex(bytes);
        let target = self.dir.join(&digest);
        if target.exists() {
            return Ok(digest);
        }
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&target).map_err(|e| CodeError::Io(e.error))?;
        Ok(digest)
    }

    /// Raw bytes as stored, without verification.
    pub fn read_raw(&self, digest: &str) -> Result<Vec<u8>, CodeError> {
        if !is_digest(digest) {
            return Err(CodeError::NotFound);
        }
        match fs::read(self.dir.join(digest)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(CodeError::NotFound),
            Err(e) => Err(e.into()),
        }
    }

    pub fn get(&self, digest: &str) -> Result<Vec<u8>, CodeError> {
        let bytes = self.read_raw(digest)?;
        if sha256_hex(&bytes) != digest {
            return Err(CodeError::HashMismatch);
        }
        Ok(bytes)
    }
}

/// Downloads a bundle and checks its digest before returning it.
pub async fn fetch(http: &reqwest::Client, url: &str, expected_sha256: &str) -> Result<Vec<u8>, CodeError> {
    let resp = http.get(url).send().await.map_err(|e| CodeError::Transport(e.to_string()))?;
    if resp.status() == reqwest::StatusCode::NOT_FOUND {
        return Err(CodeError::NotFound);
    }
    if !resp.status().is_success() {
        return Err(CodeError::Transport(format!("HTTP {}", resp.status())));
    }
    let bytes = resp.bytes().await.map_err(|e| CodeError::Transport(e.to_string()))?;
    if sha256_hex(&bytes) != expected_sha256 {
        return Err(CodeError::HashMismatch);
    }
    Ok(bytes.to_vec())
}

/// HTTP server over a [`BundleStore`].
pub struct CodeServer {
    addr: SocketAddr,
    store: BundleStore,
    task: JoinHandle<()>,
}

impl CodeServer {
    /// Binds `listen` and serves `dir`. The store's base URL is set to the
    /// bound address.
    pub async fn start(listen: &str, dir: impl Into<PathBuf>) -> io::Result<Self> {
        let listener = tokio::net::TcpListener::bind(listen).await?;
        let addr = listener.local_addr()?;
        let store = BundleStore::open(dir, format!("http://{addr}"))?;
        let app = router(store.clone());
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        tracing::info!(%addr, "code server listening");
        Ok(CodeServer { addr, store, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &BundleStore {
        &self.store
    }

    pub async fn wait(mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for CodeServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub fn router(store: BundleStore) -> Router {
    Router::new().route("/bundles/{digest}", get(get_bundle)).with_state(Arc::new(store))
}

async fn get_bundle(State(store): State<Arc<BundleStore>>, UrlPath(digest): UrlPath<String>) -> Response {
    // Served as stored; fetchers verify the digest themselves.
    match store.read_raw(&digest) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Err(CodeError::NotFound) => StatusCode::NOT_FOUND.into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::security::generate_keypair;

    #[test]
    fn encoding_layout() {
        let b = CodeBundle::new("x/1", "1", vec![9, 9]);
        let bytes = b.encode();
        let manifest = br#"{"behavior_id":"x/1","state_schema_hint":null,"version":"1"}"#;
        assert_eq!(&bytes[..4], &(manifest.len() as u32).to_be_bytes());
        assert_eq!(&bytes[4..4 + manifest.len()], manifest);
        assert_eq!(&bytes[4 + manifest.len()..], &[9, 9]);
        assert_eq!(CodeBundle::decode(&bytes).unwrap(), b);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(CodeBundle::decode(&[0, 0]).is_err());
        assert!(CodeBundle::decode(&[0, 0, 0, 9, b'{']).is_err());
        let empty_id = CodeBundle::new("", "1", vec![]).encode();
        assert!(CodeBundle::decode(&empty_id).is_err());
    }

    #[test]
    fn publish_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = BundleStore::open(dir.path(), "http://h:1").unwrap();
        let k = generate_keypair(Some([1; 32]));
        let cert = k.certificate("o");
        let bundle = CodeBundle::new("x/1", "1", vec![1, 2, 3]);
        let a = store.publish(&bundle, &k, &cert).unwrap();
        let b = store.publish(&bundle, &k, &cert).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.url, format!("http://h:1/bundles/{}", a.sha256));
        assert_eq!(store.get(&a.sha256).unwrap(), bundle.encode());
        assert!(matches!(store.get(&"0".repeat(64)), Err(CodeError::NotFound)));
        assert!(matches!(store.get("../etc/passwd"), Err(CodeError::NotFound)));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = BundleStore::open(dir.path(), "http://h:1").unwrap();
        let digest = store.put(b"payload").unwrap();
        fs::write(dir.path().join(&digest), b"pAyload").unwrap();
        assert!(matches!(store.get(&digest), Err(CodeError::HashMismatch)));
    }
}
