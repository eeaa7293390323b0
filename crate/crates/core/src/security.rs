//! Keys, certificates, bundle signatures, trust-store admission and the
//! owner-only challenge-response handshake.
//!
//! Admission runs three checks in a fixed order (content hash, trust,
//! signature) and reports the first failure, so the outcome for any
//! combination of faults is deterministic.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use ed25519_dalek::{Signer, Verifier};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::{b64, canonical_json, AgentId, AgentSnapshot};

pub const NONCE_TTL_MS: u64 = 60_000;
const CHALLENGE_CONTEXT: &[u8] = b"agentmesh/attach-challenge/v1:";

#[derive(Debug, Error)]
pub enum SecurityError {
    #[error("certificate public key does not match the signing key")]
    KeyCertMismatch,
    #[error("malformed key material: {0}")]
    BadKey(String),
    #[error("keystore {path}: {source}")]
    Keystore { path: String, source: io::Error },
    #[error("trust store {path}: {source}")]
    TrustStore { path: String, source: io::Error },
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Keys and certificates
// ---------------------------------------------------------------------------

/// An Ed25519 signing key together with its public half.
#[derive(Clone)]
pub struct KeyPair {
    signing: ed25519_dalek::SigningKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_key", &hex::encode(self.public_key()))
            .finish_non_exhaustive()
    }
}

/// Creates a key pair. A fixed seed yields the same pair every time.
pub fn generate_keypair(seed: Option<[u8; 32]>) -> KeyPair {
    let seed = seed.unwrap_or_else(rand::random);
    KeyPair { signing: ed25519_dalek::SigningKey::from_bytes(&seed) }
}

impl KeyPair {
    pub fn public_key(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn sign(&self, message: &[u8]) -> [u8; 64] {
        self.signing.sign(message).to_bytes()
    }

    /// Self-signed certificate binding `subject` to this key.
    pub fn certificate(&self, subject: &str) -> Certificate {
        Certificate::new(subject, self.public_key())
    }
}

pub fn verify_signature(public_key: &[u8; 32], message: &[u8], sig: &[u8; 64]) -> bool {
    let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(public_key) else {
        return false;
    };
    key.verify(message, &ed25519_dalek::Signature::from_bytes(sig)).is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub subject: String,
    #[serde(with = "b64_array32")]
    pub public_key: [u8; 32],
    pub fingerprint: String,
}

impl Certificate {
    pub fn new(subject: &str, public_key: [u8; 32]) -> Self {
        let fingerprint = Self::compute_fingerprint(subject, &public_key);
        Certificate { subject: subject.to_string(), public_key, fingerprint }
    }

    /// SHA-256 over the canonical certificate body without its fingerprint.
    pub fn compute_fingerprint(subject: &str, public_key: &[u8; 32]) -> String {
        let body = serde_json::json!({
            "public_key": crate::wire::b64_encode(public_key),
            "subject": subject,
        });
        sha256_hex(&canonical_json(&body))
    }

    pub fn fingerprint_is_valid(&self) -> bool {
        self.fingerprint == Self::compute_fingerprint(&self.subject, &self.public_key)
    }

    pub fn to_canonical_json(&self) -> Vec<u8> {
        crate::wire::canonical_bytes(self).expect("certificate serializes")
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let bytes = fs::read(path)?;
        let cert: Certificate = serde_json::from_slice(&bytes)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        if !cert.fingerprint_is_valid() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "certificate fingerprint does not match"));
        }
        Ok(cert)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_canonical_json())
    }
}

/// On-disk private key store: one administrator or owner identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keystore {
    pub subject: String,
    #[serde(with = "b64_array32")]
    pub secret_seed: [u8; 32],
    pub certificate: Certificate,
}

impl Keystore {
    pub fn create(subject: &str, seed: Option<[u8; 32]>) -> Self {
        let pair = generate_keypair(seed);
        Keystore { subject: subject.to_string(), secret_seed: pair.seed(), certificate: pair.certificate(subject) }
    }

    pub fn keypair(&self) -> KeyPair {
        generate_keypair(Some(self.secret_seed))
    }

    pub fn load(path: &Path) -> Result<Self, SecurityError> {
        let err = |source| SecurityError::Keystore { path: path.display().to_string(), source };
        let bytes = fs::read(path).map_err(err)?;
        let store: Keystore = serde_json::from_slice(&bytes)
            .map_err(|e| err(io::Error::new(io::ErrorKind::InvalidData, e)))?;
        if store.keypair().public_key() != store.certificate.public_key || !store.certificate.fingerprint_is_valid() {
            return Err(err(io::Error::new(io::ErrorKind::InvalidData, "key and certificate disagree")));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), SecurityError> {
        let bytes = crate::wire::canonical_bytes(self).expect("keystore serializes");
        fs::write(path, bytes).map_err(|source| SecurityError::Keystore { path: path.display().to_string(), source })
    }
}

// ---------------------------------------------------------------------------
// Bundle signatures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSignature {
    pub signer_cert: Certificate,
    #[serde(with = "b64_array64")]
    pub sig: [u8; 64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verification {
    Ok,
    Tampered,
}

pub fn sign_bundle(bundle: &[u8], key: &KeyPair, cert: &Certificate) -> Result<BundleSignature, SecurityError> {
    if cert.public_key != key.public_key() {
        return Err(SecurityError::KeyCertMismatch);
    }
    Ok(BundleSignature { signer_cert: cert.clone(), sig: key.sign(bundle) })
}

pub fn verify_bundle(bundle: &[u8], sig: &BundleSignature) -> Verification {
    if verify_signature(&sig.signer_cert.public_key, bundle, &sig.sig) {
        Verification::Ok
    } else {
        Verification::Tampered
    }
}

// ---------------------------------------------------------------------------
// Trust store and admission
// ---------------------------------------------------------------------------

/// Certificate fingerprints an administrator has accepted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrustStore {
    trusted: BTreeSet<String>,
}

impl TrustStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accept(&mut self, cert: &Certificate) -> bool {
        self.trusted.insert(cert.fingerprint.clone())
    }

    pub fn accept_fingerprint(&mut self, fingerprint: &str) -> bool {
        self.trusted.insert(fingerprint.to_string())
    }

    pub fn reject(&mut self, fingerprint: &str) -> bool {
        self.trusted.remove(fingerprint)
    }

    pub fn contains(&self, fingerprint: &str) -> bool {
        self.trusted.contains(fingerprint)
    }

    /// A certificate is trusted only if its fingerprint actually matches its
    /// contents and that fingerprint was accepted.
    pub fn trusts(&self, cert: &Certificate) -> bool {
        cert.fingerprint_is_valid() && self.contains(&cert.fingerprint)
    }

    pub fn fingerprints(&self) -> impl Iterator<Item = &str> {
        self.trusted.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.trusted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trusted.is_empty()
    }

    /// Sorted fingerprints, one per line, LF-terminated.
    pub fn to_file_contents(&self) -> String {
        self.trusted.iter().map(|f| format!("{f}\n")).collect()
    }

    pub fn parse(contents: &str) -> Self {
        let trusted = contents.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        TrustStore { trusted }
    }

    pub fn load(path: &Path) -> Result<Self, SecurityError> {
        fs::read_to_string(path)
            .map(|s| Self::parse(&s))
            .map_err(|source| SecurityError::TrustStore { path: path.display().to_string(), source })
    }

    pub fn save(&self, path: &Path) -> Result<(), SecurityError> {
        fs::write(path, self.to_file_contents())
            .map_err(|source| SecurityError::TrustStore { path: path.display().to_string(), source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Admission {
    Admitted,
    HashMismatch,
    UntrustedSigner,
    Tampered,
}

impl Admission {
    pub fn code(self) -> &'static str {
        match self {
            Admission::Admitted => "ADMITTED",
            Admission::HashMismatch => "HASH_MISMATCH",
            Admission::UntrustedSigner => "UNTRUSTED_SIGNER",
            Admission::Tampered => "TAMPERED",
        }
    }
}

impl fmt::Display for Admission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Decides whether an arriving agent may execute here.
///
/// Order: digest of the fetched bytes against the reference, then trust in
/// both the bundle signer and the agent owner, then the bundle signature.
pub fn admit_agent(snapshot: &AgentSnapshot, bundle: &[u8], trust: &TrustStore) -> Admission {
    let bundle_ref = &snapshot.bundle_ref;
    if sha256_hex(bundle) != bundle_ref.sha256 {
        return Admission::HashMismatch;
    }
    if !trust.trusts(&bundle_ref.signature.signer_cert) || !trust.trusts(&snapshot.owner_cert) {
        return Admission::UntrustedSigner;
    }
    match verify_bundle(bundle, &bundle_ref.signature) {
        Verification::Ok => Admission::Admitted,
        Verification::Tampered => Admission::Tampered,
    }
}

// ---------------------------------------------------------------------------
// Challenge-response
// ---------------------------------------------------------------------------

pub type Nonce = [u8; 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChallengeOutcome {
    Ok,
    Rejected,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("nonce was never issued, has expired, or was already used")]
pub struct NonceUnknown;

pub fn issue_challenge() -> Nonce {
    rand::random()
}

/// Proof of owner-key possession for a challenge.
pub fn answer_challenge(nonce: &[u8], owner_key: &KeyPair) -> [u8; 64] {
    owner_key.sign(&challenge_message(nonce))
}

fn challenge_message(nonce: &[u8]) -> Vec<u8> {
    let mut msg = CHALLENGE_CONTEXT.to_vec();
    msg.extend_from_slice(nonce);
    msg
}

/// Outstanding challenges. Every nonce is bound to one agent, expires after
/// the TTL, and is consumed by its first verification attempt.
#[derive(Debug)]
pub struct ChallengeBook {
    ttl_ms: u64,
    issued: HashMap<Nonce, (AgentId, u64)>,
}

impl Default for ChallengeBook {
    fn default() -> Self {
        Self::new(NONCE_TTL_MS)
    }
}

impl ChallengeBook {
    pub fn new(ttl_ms: u64) -> Self {
        ChallengeBook { ttl_ms, issued: HashMap::new() }
    }

    pub fn issue(&mut self, agent: AgentId, now_ms: u64) -> Nonce {
        self.issued.retain(|_, (_, at)| now_ms.saturating_sub(*at) <= self.ttl_ms);
        let nonce = issue_challenge();
        self.issued.insert(nonce, (agent, now_ms));
        nonce
    }

    pub fn verify(
        &mut self,
        agent: AgentId,
        nonce: &[u8],
        answer: &[u8],
        owner_cert: &Certificate,
        now_ms: u64,
    ) -> Result<ChallengeOutcome, NonceUnknown> {
        let nonce: Nonce = nonce.try_into().map_err(|_| NonceUnknown)?;
        let (bound, at) = self.issued.remove(&nonce).ok_or(NonceUnknown)?;
        if bound != agent || now_ms.saturating_sub(at) > self.ttl_ms {
            return Err(NonceUnknown);
        }
        Ok(verify_challenge(&nonce, answer, owner_cert))
    }

    pub fn outstanding(&self) -> usize {
        self.issued.len()
    }
}

/// Stateless signature check of a challenge answer.
pub fn verify_challenge(nonce: &[u8], answer: &[u8], owner_cert: &Certificate) -> ChallengeOutcome {
    let Ok(sig) = <[u8; 64]>::try_from(answer) else {
        return ChallengeOutcome::Rejected;
    };
    if verify_signature(&owner_cert.public_key, &challenge_message(nonce), &sig) {
        ChallengeOutcome::Ok
    } else {
        ChallengeOutcome::Rejected
    }
}

macro_rules! b64_array {
    ($modname:ident, $n:expr) => {
        mod $modname {
            use serde::{Deserializer, Serializer};

            pub fn serialize<S: Serializer>(bytes: &[u8; $n], s: S) -> Result<S::Ok, S::Error> {
                super::b64::serialize(bytes, s)
            }

            pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; $n], D::Error> {
                let v = super::b64::deserialize(d)?;
                let len = v.len();
                v.try_into()
                    .map_err(|_| serde::de::Error::custom(format!("expected {} bytes, got {len}", $n)))
            }
        }
    };
}

b64_array!(b64_array32, 32);
b64_array!(b64_array64, 64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_keys_are_deterministic() {
        let a = generate_keypair(Some([7; 32]));
        let b = generate_keypair(Some([7; 32]));
        assert_eq!(a.public_key(), b.public_key());
    }

    #[test]
    fn distinct_seeds_distinct_keys() {
        let keys: BTreeSet<[u8; 32]> =
            (0u8..64).map(|i| generate_keypair(Some([i; 32])).public_key()).collect();
        assert_eq!(keys.len(), 64);
    }

    #[test]
    fn random_key_signs_and_verifies() {
        let k = generate_keypair(None);
        let sig = k.sign(b"msg");
        assert!(verify_signature(&k.public_key(), b"msg", &sig));
        assert!(!verify_signature(&k.public_key(), b"msh", &sig));
    }

    #[test]
    fn sign_bundle_cases() {
        let k = generate_keypair(Some([1; 32]));
        let cert = k.certificate("owner");
        let empty = sign_bundle(b"", &k, &cert).unwrap();
        assert_eq!(verify_bundle(b"", &empty), Verification::Ok);
        let big = vec![0xa5u8; 1 << 20];
        let sig = sign_bundle(&big, &k, &cert).unwrap();
        assert_eq!(verify_bundle(&big, &sig), Verification::Ok);
        let other = generate_keypair(Some([2; 32])).certificate("other");
        assert!(matches!(sign_bundle(b"x", &k, &other), Err(SecurityError::KeyCertMismatch)));
    }

    #[test]
    fn tampering_is_detected() {
        let k = generate_keypair(Some([1; 32]));
        let cert = k.certificate("owner");
        let mut bundle = b"signed contents".to_vec();
        let mut sig = sign_bundle(&bundle, &k, &cert).unwrap();
        bundle[3] ^= 1;
        assert_eq!(verify_bundle(&bundle, &sig), Verification::Tampered);
        bundle[3] ^= 1;
        sig.sig = [0; 64];
        assert_eq!(verify_bundle(&bundle, &sig), Verification::Tampered);
    }

    #[test]
    fn forged_fingerprint_is_not_trusted() {
        let honest = generate_keypair(Some([1; 32])).certificate("admin");
        let mut forged = generate_keypair(Some([9; 32])).certificate("mallory");
        forged.fingerprint = honest.fingerprint.clone();
        let mut trust = TrustStore::new();
        trust.accept(&honest);
        assert!(trust.trusts(&honest));
        assert!(!trust.trusts(&forged));
    }

    #[test]
    fn trust_store_file_format() {
        let mut t = TrustStore::new();
        t.accept_fingerprint("bb");
        t.accept_fingerprint("aa");
        assert_eq!(t.to_file_contents(), "aa\nbb\n");
        assert_eq!(TrustStore::parse("aa\nbb\n"), t);
    }

    #[test]
    fn challenge_single_use_and_binding() {
        let owner = generate_keypair(Some([3; 32]));
        let cert = owner.certificate("owner");
        let stranger = generate_keypair(Some([4; 32]));
        let agent = AgentId::random();
        let mut book = ChallengeBook::default();

        let n = book.issue(agent, 0);
        assert_eq!(book.verify(agent, &n, &answer_challenge(&n, &owner), &cert, 10), Ok(ChallengeOutcome::Ok));
        assert_eq!(book.verify(agent, &n, &answer_challenge(&n, &owner), &cert, 11), Err(NonceUnknown));

        let n = book.issue(agent, 0);
        assert_eq!(
            book.verify(agent, &n, &answer_challenge(&n, &stranger), &cert, 10),
            Ok(ChallengeOutcome::Rejected)
        );

        let n = book.issue(agent, 0);
        assert_eq!(book.verify(AgentId::random(), &n, &answer_challenge(&n, &owner), &cert, 1), Err(NonceUnknown));

        let n = book.issue(agent, 0);
        assert_eq!(
            book.verify(agent, &n, &answer_challenge(&n, &owner), &cert, NONCE_TTL_MS + 1),
            Err(NonceUnknown)
        );
        assert_eq!(book.verify(agent, &[0; 32], &[0; 64], &cert, 0), Err(NonceUnknown));
    }

    #[test]
    fn keystore_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("owner.key");
        let ks = Keystore::create("owner", Some([5; 32]));
        ks.save(&path).unwrap();
        let back = Keystore::load(&path).unwrap();
        assert_eq!(back.certificate, ks.certificate);
        assert_eq!(back.keypair().public_key(), ks.keypair().public_key());
        assert!(Keystore::load(&dir.path().join("missing")).is_err());
    }
}
