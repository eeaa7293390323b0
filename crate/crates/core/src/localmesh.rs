//! A whole mesh in one process: registry, code server, N stations, an owner
//! identity, and published bundles for the built-in behaviors.
//!
//! Every component still talks to the others over TCP and HTTP on loopback,
//! so this exercises the same paths as separate daemons would.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use tempfile::TempDir;

use crate::agents::{BehaviorRegistry, CONNECTIVITY_TEST, DATA_QUERY, FILE_ACCESS, SEARCH};
use crate::client::gateway::{Gateway, GatewayConfig};
use crate::client::{self, attach, Attached, LaunchSpec, MeshError};
use crate::codeserver::{CodeBundle, CodeServer};
use crate::lookup::{LeasePolicy, RegistryServer, RegistryServerConfig};
use crate::security::{generate_keypair, Certificate, KeyPair, Keystore, TrustStore};
use crate::station::{Station, StationConfig, StationError, StationOptions};
use crate::wire::{AgentId, BundleRef, ServiceKind};

pub type ConfigTweak = Arc<dyn Fn(usize, &mut StationConfig) + Send + Sync>;

#[derive(Clone)]
pub struct MeshOptions {
    pub stations: usize,
    pub lease_ms: u64,
    pub heartbeat_ms: u64,
    pub sweep_ms: u64,
    pub min_lease_ms: u64,
    /// Applied to each station's config before its first start.
    pub tweak: Option<ConfigTweak>,
}

impl Default for MeshOptions {
    fn default() -> Self {
        MeshOptions { stations: 3, lease_ms: 10_000, heartbeat_ms: 2_000, sweep_ms: 250, min_lease_ms: 500, tweak: None }
    }
}

impl MeshOptions {
    pub fn stations(n: usize) -> Self {
        MeshOptions { stations: n, ..Self::default() }
    }

    pub fn tweak(mut self, f: impl Fn(usize, &mut StationConfig) + Send + Sync + 'static) -> Self {
        self.tweak = Some(Arc::new(f));
        self
    }
}

struct Slot {
    config: StationConfig,
    station: Option<Station>,
}

pub struct LocalMesh {
    dir: TempDir,
    pub registry: RegistryServer,
    pub code: CodeServer,
    pub owner_key: KeyPair,
    pub owner_cert: Certificate,
    /// Published bundle per built-in behavior id, signed by the owner.
    pub bundles: BTreeMap<String, BundleRef>,
    slots: Vec<Slot>,
}

impl LocalMesh {
    pub async fn start(stations: usize) -> Result<LocalMesh, StationError> {
        Self::start_with(MeshOptions::stations(stations), |_| StationOptions::default()).await
    }

    /// `options(i)` supplies behaviors and step hooks for station `i`.
    pub async fn start_with(opts: MeshOptions, mut options: impl FnMut(usize) -> StationOptions) -> Result<LocalMesh, StationError> {
        let dir = tempfile::tempdir()?;
        let registry = RegistryServer::start(RegistryServerConfig {
            listen: "127.0.0.1:0".into(),
            policy: LeasePolicy { min_lease_ms: opts.min_lease_ms, ..LeasePolicy::default() },
            sweep_ms: opts.sweep_ms,
        })
        .await?;
        let code = CodeServer::start("127.0.0.1:0", dir.path().join("bundles")).await?;

        let owner = Keystore::create("owner", None);
        let owner_key = owner.keypair();
        let owner_cert = owner.certificate.clone();
        let mut bundles = BTreeMap::new();
        for id in [CONNECTIVITY_TEST, FILE_ACCESS, SEARCH, DATA_QUERY] {
            let bundle = CodeBundle::new(id, "1", format!("builtin {id}").into_bytes());
            let bref = code.store().publish(&bundle, &owner_key, &owner_cert).map_err(|e| StationError::Config(e.to_string()))?;
            bundles.insert(id.to_string(), bref);
        }

        let mut mesh = LocalMesh { dir, registry, code, owner_key, owner_cert, bundles, slots: Vec::new() };
        for i in 0..opts.stations {
            let mut config = mesh.prepare_station(i, &opts)?;
            if let Some(t) = &opts.tweak {
                t(i, &mut config);
            }
            let station = Station::start_with(config.clone(), options(i)).await?;
            // Pin the ports so a restart comes back at the same address.
            config.listen = station.endpoint().to_string();
            config.admin_listen = station.admin_addr().to_string();
            mesh.slots.push(Slot { config, station: Some(station) });
        }
        Ok(mesh)
    }

    fn prepare_station(&self, i: usize, opts: &MeshOptions) -> Result<StationConfig, StationError> {
        let id = format!("station-{}", i + 1);
        let dir = self.dir.path().join(&id);
        let mut cfg = StationConfig::new(&id, &self.registry.endpoint(), &dir);
        cfg.lease_ms = opts.lease_ms;
        cfg.heartbeat_ms = opts.heartbeat_ms;
        cfg.backoff_min_ms = 200;
        cfg.backoff_max_ms = 2_000;
        std::fs::create_dir_all(&cfg.fs_root)?;
        Keystore::create(&id, None).save(&cfg.keystore_path)?;
        let mut trust = TrustStore::new();
        trust.accept(&self.owner_cert);
        trust.save(&cfg.trust_store_path)?;
        Ok(cfg)
    }

    pub fn dir(&self) -> &Path {
        self.dir.path()
    }

    pub fn registry_endpoint(&self) -> String {
        self.registry.endpoint()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Panics if station `i` is down.
    pub fn station(&self, i: usize) -> &Station {
        self.slots[i].station.as_ref().unwrap_or_else(|| panic!("station {i} is down"))
    }

    pub fn try_station(&self, i: usize) -> Option<&Station> {
        self.slots[i].station.as_ref()
    }

    pub fn config(&self, i: usize) -> &StationConfig {
        &self.slots[i].config
    }

    /// The station's wire endpoint, stable across restarts.
    pub fn endpoint(&self, i: usize) -> &str {
        &self.slots[i].config.listen
    }

    pub fn station_id(&self, i: usize) -> &str {
        &self.slots[i].config.station_id
    }

    pub fn fs_root(&self, i: usize) -> &PathBuf {
        &self.slots[i].config.fs_root
    }

    pub fn bundle(&self, behavior_id: &str) -> BundleRef {
        self.bundles.get(behavior_id).cloned().unwrap_or_else(|| panic!("no bundle published for {behavior_id}"))
    }

    /// A launch spec owned by the mesh owner, to adjust before launching.
    pub fn spec(&self, behavior_id: &str, params: Value, at: usize) -> LaunchSpec {
        LaunchSpec {
            behavior_id: behavior_id.to_string(),
            params,
            dest: self.endpoint(at).to_string(),
            service_kind: ServiceKind::Service,
            open_access: false,
            itinerary: Vec::new(),
            bundle_ref: self.bundle(behavior_id),
            owner: self.owner_cert.clone(),
        }
    }

    pub async fn launch(&self, behavior_id: &str, params: Value, at: usize) -> Result<AgentId, MeshError> {
        client::launch(&self.spec(behavior_id, params, at), &BehaviorRegistry::builtin()).await
    }

    /// Attaches with the owner key wherever the agent currently is.
    pub async fn attach(&self, agent: AgentId) -> Result<Attached, MeshError> {
        let loc = client::locate(&self.registry_endpoint(), &agent).await?;
        attach(&loc.endpoint, agent, Some(&self.owner_key)).await
    }

    /// Index of the station where the agent is resident and not terminal.
    pub fn whereis(&self, agent: &AgentId) -> Option<usize> {
        (0..self.slots.len()).find(|&i| {
            self.try_station(i)
                .and_then(|s| s.status().agent(agent).map(|a| !a.run_state.is_terminal()))
                .unwrap_or(false)
        })
    }

    /// Kills station `i` without any cleanup.
    pub fn crash(&mut self, i: usize) {
        if let Some(s) = self.slots[i].station.take() {
            s.crash();
        }
    }

    pub async fn restart(&mut self, i: usize) -> Result<(), StationError> {
        self.restart_with(i, StationOptions::default()).await
    }

    /// Starts station `i` again from its data directory, at the same ports.
    pub async fn restart_with(&mut self, i: usize, options: StationOptions) -> Result<(), StationError> {
        self.crash(i);
        let station = Station::start_with(self.slots[i].config.clone(), options).await?;
        self.slots[i].station = Some(station);
        Ok(())
    }

    /// A console gateway holding the owner's key.
    pub async fn gateway(&self) -> std::io::Result<Gateway> {
        self.gateway_with_key(self.owner_key.clone()).await
    }

    pub async fn gateway_with_key(&self, key: KeyPair) -> std::io::Result<Gateway> {
        let owner_cert = key.certificate("owner");
        Gateway::start(GatewayConfig {
            listen: "127.0.0.1:0".into(),
            registry: self.registry_endpoint(),
            owner_key: key,
            owner_cert,
            bundles: self.bundles.clone(),
        })
        .await
    }
}

/// A fresh identity, as a stranger to the mesh would have.
pub fn stranger(subject: &str) -> (KeyPair, Certificate) {
    let key = generate_keypair(None);
    let cert = key.certificate(subject);
    (key, cert)
}

/// Polls `check` every 20 ms until it holds or `timeout` passes.
pub async fn eventually(timeout: Duration, mut check: impl FnMut() -> bool) -> bool {
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        if check() {
            return true;
        }
        if tokio::time::Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}
