use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex, RwLock};

use crate::channel::{generate_pki, Certificate};
use crate::clock::SharedClock;
use crate::crypto::{self, TempKeyPair};
use crate::substrate::{verify_report, EnclaveHandle, Measurement, SealedBlob, SubstrateError};
use crate::wire::{Reader, Writer};

use super::{
    binding_digest, provision_context, AecsConfig, AecsError, AecsStats, FetchKeyRequest, KeyMap, KeyMapEntry,
    KeySource, LocalDisk, ProvisionRequest, StorageKey, UntrustedStore, STORAGE_KEY_CONTEXT,
};
use crate::substrate::EnclaveReport;

pub const LEADER_OBJECT: &str = "aecs/leader";
pub const KEYMAP_OBJECT: &str = "aecs/keymap";

const LEADER_MAGIC: &[u8; 4] = b"LDR1";

/// How a replica came to hold the storage key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapPath {
    Generated,
    Unsealed,
    Fetched,
}

struct Snapshot {
    store_version: u64,
    map: KeyMap,
}

pub struct AecsReplica {
    enclave: EnclaveHandle,
    store: Arc<dyn UntrustedStore>,
    config: AecsConfig,
    key: StorageKey,
    path: BootstrapPath,
    snapshot: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
    clock: SharedClock,
    stats: Arc<AecsStats>,
}

impl std::fmt::Debug for AecsReplica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AecsReplica")
            .field("enclave", &self.enclave)
            .field("path", &self.path)
            .finish_non_exhaustive()
    }
}

fn encode_leader(generation_id: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.fixed(LEADER_MAGIC).u64(generation_id);
    w.into_inner()
}

fn decode_leader(bytes: &[u8]) -> Result<u64, AecsError> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.fixed()?;
    if &magic != LEADER_MAGIC {
        return Err(AecsError::Corrupt("leader marker"));
    }
    let g = r.u64()?;
    r.finish()?;
    Ok(g)
}

fn unseal_local(enclave: &EnclaveHandle, disk: &LocalDisk) -> Option<StorageKey> {
    let bytes = disk.load()?;
    let blob = SealedBlob::from_bytes(&bytes).ok()?;
    let plain = enclave.unseal(&blob).ok()?;
    StorageKey::from_enclave_bytes(&plain).ok()
}

fn seal_local(enclave: &EnclaveHandle, disk: &LocalDisk, key: &StorageKey) -> Result<(), AecsError> {
    let blob = enclave.seal(&key.to_enclave_bytes())?;
    disk.store(&blob.to_bytes())?;
    Ok(())
}

fn fetch_from_peers(
    enclave: &EnclaveHandle,
    peers: &dyn KeySource,
    config: &AecsConfig,
    clock: &SharedClock,
    stats: &AecsStats,
) -> Result<StorageKey, AecsError> {
    for _ in 0..config.fetch_attempts.max(1) {
        let temp = TempKeyPair::generate();
        let report = enclave.create_report(binding_digest(&temp.public_key()))?;
        let req = FetchKeyRequest {
            report,
            temp_public_key: temp.public_key(),
        };
        stats.ra_fetches.fetch_add(1, Ordering::SeqCst);
        match peers.fetch_storage_key(&req) {
            Ok(ct) => {
                let plain = temp
                    .open(STORAGE_KEY_CONTEXT, &ct)
                    .map_err(|_| AecsError::Corrupt("storage key ciphertext"))?;
                return StorageKey::from_enclave_bytes(&plain);
            }
            Err(AecsError::Unavailable) | Err(AecsError::Remote(_)) => clock.sleep(config.fetch_interval),
            Err(e) => return Err(e),
        }
    }
    Err(AecsError::BootstrapTimeout)
}

/// Brings an AECS replica to the serving state.
///
/// The replica that wins create-if-absent on [`LEADER_OBJECT`] generates the
/// storage key and writes an empty key map. Every other replica first tries
/// its node-local sealed copy and otherwise fetches the key from a running
/// peer with an attested request. A sealed key from an older generation is
/// ignored.
pub fn bootstrap(
    enclave: EnclaveHandle,
    store: Arc<dyn UntrustedStore>,
    disk: &LocalDisk,
    peers: &dyn KeySource,
    config: AecsConfig,
    clock: SharedClock,
    stats: Arc<AecsStats>,
) -> Result<AecsReplica, AecsError> {
    if enclave.measurement() != config.measurement {
        return Err(AecsError::AttestationMismatch);
    }
    let candidate = loop {
        let g = u64::from_be_bytes(crypto::random_bytes());
        if g != 0 {
            break g;
        }
    };

    let (key, path) = if store.create_if_absent(LEADER_OBJECT, &encode_leader(candidate))? {
        let key = StorageKey::generate(candidate);
        stats.key_generations.fetch_add(1, Ordering::SeqCst);
        seal_local(&enclave, disk, &key)?;
        match store.put(KEYMAP_OBJECT, &KeyMap::default().encrypt(&key), 0) {
            Ok(_) | Err(super::StoreError::Conflict { .. }) => {}
            Err(e) => return Err(e.into()),
        }
        (key, BootstrapPath::Generated)
    } else {
        let (marker, _) = store
            .get(LEADER_OBJECT)?
            .ok_or(AecsError::Corrupt("leader marker vanished"))?;
        let generation = decode_leader(&marker)?;
        match unseal_local(&enclave, disk).filter(|k| k.generation_id() == generation) {
            Some(key) => {
                stats.unseal_recoveries.fetch_add(1, Ordering::SeqCst);
                (key, BootstrapPath::Unsealed)
            }
            None => {
                let key = fetch_from_peers(&enclave, peers, &config, &clock, &stats)?;
                if key.generation_id() != generation {
                    return Err(AecsError::StaleGeneration);
                }
                seal_local(&enclave, disk, &key)?;
                (key, BootstrapPath::Fetched)
            }
        }
    };

    let replica = AecsReplica {
        enclave,
        store,
        config,
        key,
        path,
        snapshot: RwLock::new(Arc::new(Snapshot {
            store_version: 0,
            map: KeyMap::default(),
        })),
        writer: Mutex::new(()),
        clock,
        stats,
    };
    replica.refresh()?;
    Ok(replica)
}

impl AecsReplica {
    pub fn enclave(&self) -> &EnclaveHandle {
        &self.enclave
    }

    pub fn bootstrap_path(&self) -> BootstrapPath {
        self.path
    }

    pub fn storage_key(&self) -> &StorageKey {
        &self.key
    }

    pub fn stats(&self) -> &Arc<AecsStats> {
        &self.stats
    }

    pub fn is_serving(&self) -> bool {
        self.enclave.is_running()
    }

    fn ensure_serving(&self) -> Result<(), AecsError> {
        if self.is_serving() {
            Ok(())
        } else {
            Err(AecsError::Unavailable)
        }
    }

    fn read_store(&self) -> Result<(u64, KeyMap), AecsError> {
        match self.store.get(KEYMAP_OBJECT)? {
            None => Ok((0, KeyMap::default())),
            Some((bytes, v)) => Ok((v, KeyMap::decrypt(&bytes, &self.key)?)),
        }
    }

    fn install(&self, store_version: u64, map: KeyMap) -> Arc<Snapshot> {
        let mut slot = self.snapshot.write().expect("snapshot poisoned");
        if store_version > slot.store_version {
            *slot = Arc::new(Snapshot { store_version, map });
        }
        slot.clone()
    }

    fn refresh(&self) -> Result<Arc<Snapshot>, AecsError> {
        let current = self.snapshot.read().expect("snapshot poisoned").clone();
        match self.store.get(KEYMAP_OBJECT)? {
            Some((_, v)) if v == current.store_version => Ok(current),
            None => Ok(current),
            Some((bytes, v)) => Ok(self.install(v, KeyMap::decrypt(&bytes, &self.key)?)),
        }
    }

    /// Current decrypted map, refreshed from the store.
    pub fn key_map(&self) -> Result<KeyMap, AecsError> {
        self.ensure_serving()?;
        Ok(self.refresh()?.map.clone())
    }

    /// Applies `f` to the latest map and publishes it with CAS, rereading and
    /// reapplying on conflict.
    fn mutate<F>(&self, mut f: F) -> Result<(), AecsError>
    where
        F: FnMut(&mut KeyMap) -> Result<(), AecsError>,
    {
        let _w = self.writer.lock().expect("writer poisoned");
        for attempt in 0..self.config.cas_attempts {
            let (v, mut map) = self.read_store()?;
            f(&mut map)?;
            map.version += 1;
            match self.store.put(KEYMAP_OBJECT, &map.encrypt(&self.key), v) {
                Ok(nv) => {
                    self.install(nv, map);
                    return Ok(());
                }
                Err(super::StoreError::Conflict { .. }) => {
                    self.stats.cas_conflicts.fetch_add(1, Ordering::SeqCst);
                    self.clock.sleep(self.config.backoff_base * (1u32 << attempt.min(16)));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(AecsError::StoreConflictExhausted)
    }

    pub fn create_service_pki(&self, service_id: &str, measurement: Measurement) -> Result<Certificate, AecsError> {
        self.ensure_serving()?;
        let pki = generate_pki(service_id, self.config.validity, &mut rand::rng())
            .map_err(|_| AecsError::Corrupt("service id"))?;
        let cert = pki.certificate().clone();
        self.mutate(|map| {
            if map.entries.contains_key(service_id) {
                return Err(AecsError::ServiceExists);
            }
            map.entries.insert(
                service_id.to_owned(),
                KeyMapEntry {
                    measurement,
                    pki: pki.clone(),
                },
            );
            Ok(())
        })?;
        Ok(cert)
    }

    pub fn get_certificate(&self, service_id: &str) -> Result<Certificate, AecsError> {
        self.ensure_serving()?;
        let snap = self.refresh()?;
        snap.map
            .entries
            .get(service_id)
            .map(|e| e.pki.certificate().clone())
            .ok_or(AecsError::UnknownService)
    }

    pub fn delete_service_pki(&self, service_id: &str) -> Result<(), AecsError> {
        self.ensure_serving()?;
        self.mutate(|map| {
            map.entries
                .remove(service_id)
                .map(|_| ())
                .ok_or(AecsError::UnknownService)
        })
    }

    fn check_report(
        &self,
        report: &EnclaveReport,
        expected: &Measurement,
        temp_public_key: &[u8; 32],
    ) -> Result<(), AecsError> {
        match verify_report(report, expected, &self.config.registry) {
            Ok(v) if v.is_accept() => {}
            Ok(_) | Err(SubstrateError::UnknownPlatform(_)) => return Err(AecsError::AttestationMismatch),
            Err(e) => return Err(e.into()),
        }
        if report.report_data != binding_digest(temp_public_key) {
            return Err(AecsError::BindingMismatch);
        }
        Ok(())
    }

    /// Releases the service PKI encrypted to the request's temporary key,
    /// after the report verifies against the registered measurement.
    pub fn provision_pki(&self, req: &ProvisionRequest) -> Result<Vec<u8>, AecsError> {
        self.ensure_serving()?;
        let snap = self.refresh()?;
        let entry = snap.map.entries.get(&req.service_id).ok_or(AecsError::UnknownService)?;
        self.check_report(&req.report, &entry.measurement, &req.temp_public_key)?;
        crypto::seal_to_public_key(
            &req.temp_public_key,
            &provision_context(&req.service_id),
            &entry.pki.to_enclave_bytes(),
        )
        .map_err(|_| AecsError::BindingMismatch)
    }

    pub fn fetch_storage_key(&self, req: &FetchKeyRequest) -> Result<Vec<u8>, AecsError> {
        self.ensure_serving()?;
        self.check_report(&req.report, &self.config.measurement, &req.temp_public_key)?;
        crypto::seal_to_public_key(&req.temp_public_key, STORAGE_KEY_CONTEXT, &self.key.to_enclave_bytes())
            .map_err(|_| AecsError::BindingMismatch)
    }
}

impl KeySource for AecsReplica {
    fn fetch_storage_key(&self, req: &FetchKeyRequest) -> Result<Vec<u8>, AecsError> {
        AecsReplica::fetch_storage_key(self, req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aecs::{open_provisioned_pki, provision_request, MemoryStore};
    use crate::clock::RealClock;
    use crate::substrate::{EnclaveSpec, Node, NodeSpec, PlatformRegistry, MIB};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct NoPeers;
    impl KeySource for NoPeers {
        fn fetch_storage_key(&self, _: &FetchKeyRequest) -> Result<Vec<u8>, AecsError> {
            Err(AecsError::Unavailable)
        }
    }

    struct Fixture {
        registry: PlatformRegistry,
        clock: SharedClock,
        rng: ChaCha8Rng,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture {
                registry: PlatformRegistry::new(),
                clock: Arc::new(RealClock::new()),
                rng: ChaCha8Rng::seed_from_u64(3),
            }
        }

        fn node(&mut self, id: &str) -> Node {
            let n = Node::new(NodeSpec::generate(id, &mut self.rng), self.clock.clone()).unwrap();
            self.registry.register(&n);
            n
        }

        fn config(&self) -> AecsConfig {
            let mut c = AecsConfig::new(self.registry.clone());
            c.fetch_attempts = 3;
            c
        }
    }

    fn launch(node: &Node, id: &str, m: Measurement) -> EnclaveHandle {
        node.launch_enclave(EnclaveSpec::new(id, m, 8 * MIB, 4 * MIB, 0.0))
            .unwrap()
    }

    fn leader(fx: &mut Fixture, store: Arc<dyn UntrustedStore>) -> AecsReplica {
        let node = fx.node("aecs-0");
        let e = launch(&node, "aecs", crate::aecs::aecs_measurement());
        bootstrap(
            e,
            store,
            &LocalDisk::memory(),
            &NoPeers,
            fx.config(),
            fx.clock.clone(),
            Arc::default(),
        )
        .unwrap()
    }

    #[test]
    fn create_get_delete() {
        let mut fx = Fixture::new();
        let store: Arc<dyn UntrustedStore> = Arc::new(MemoryStore::new());
        let r = leader(&mut fx, store.clone());
        assert_eq!(r.bootstrap_path(), BootstrapPath::Generated);
        let m = Measurement::of_code(b"model");
        let cert = r.create_service_pki("svc", m).unwrap();
        assert_eq!(r.get_certificate("svc").unwrap(), cert);
        assert_eq!(r.create_service_pki("svc", m), Err(AecsError::ServiceExists));
        assert_eq!(r.get_certificate("nope"), Err(AecsError::UnknownService));
        r.delete_service_pki("svc").unwrap();
        assert_eq!(r.get_certificate("svc"), Err(AecsError::UnknownService));
        assert_eq!(r.delete_service_pki("svc"), Err(AecsError::UnknownService));
        // Two successful mutations, plus the initial empty map.
        let (bytes, v) = store.get(KEYMAP_OBJECT).unwrap().unwrap();
        assert_eq!(v, 3);
        assert_eq!(KeyMap::decrypt(&bytes, r.storage_key()).unwrap().version, 2);
    }

    #[test]
    fn provisioning_checks_measurement_and_binding() {
        let mut fx = Fixture::new();
        let r = leader(&mut fx, Arc::new(MemoryStore::new()));
        let m = Measurement::of_code(b"model");
        r.create_service_pki("svc", m).unwrap();
        let node = fx.node("worker");

        let honest = launch(&node, "ms-0", m);
        let (temp, req) = provision_request(&honest, "svc").unwrap();
        let ct = r.provision_pki(&req).unwrap();
        let pki = open_provisioned_pki(temp, "svc", &ct).unwrap();
        assert_eq!(pki.certificate(), &r.get_certificate("svc").unwrap());
        assert!(pki.same_key_as(&r.key_map().unwrap().entries["svc"].pki));

        let rogue = launch(&node, "rogue", Measurement::of_code(b"other"));
        let (_, req) = provision_request(&rogue, "svc").unwrap();
        assert_eq!(r.provision_pki(&req), Err(AecsError::AttestationMismatch));

        let (_, mut req) = provision_request(&honest, "svc").unwrap();
        req.temp_public_key = TempKeyPair::generate().public_key();
        assert_eq!(r.provision_pki(&req), Err(AecsError::BindingMismatch));

        let (_, mut req) = provision_request(&honest, "svc").unwrap();
        req.service_id = "ghost".into();
        assert_eq!(r.provision_pki(&req), Err(AecsError::UnknownService));

        // A model-server enclave cannot obtain the storage key.
        let (_, req) = provision_request(&honest, "svc").unwrap();
        let fetch = FetchKeyRequest {
            report: req.report,
            temp_public_key: req.temp_public_key,
        };
        assert_eq!(r.fetch_storage_key(&fetch), Err(AecsError::AttestationMismatch));
    }

    #[test]
    fn follower_fetches_then_restarts_from_seal() {
        let mut fx = Fixture::new();
        let store: Arc<dyn UntrustedStore> = Arc::new(MemoryStore::new());
        let stats: Arc<AecsStats> = Arc::default();
        let lead = leader(&mut fx, store.clone());
        lead.create_service_pki("svc", Measurement::of_code(b"m")).unwrap();

        let node = fx.node("aecs-1");
        let disk = LocalDisk::memory();
        let e = launch(&node, "aecs", crate::aecs::aecs_measurement());
        let f = bootstrap(
            e.clone(),
            store.clone(),
            &disk,
            &lead,
            fx.config(),
            fx.clock.clone(),
            stats.clone(),
        )
        .unwrap();
        assert_eq!(f.bootstrap_path(), BootstrapPath::Fetched);
        assert_eq!(f.storage_key().fingerprint(), lead.storage_key().fingerprint());
        assert_eq!(f.get_certificate("svc").unwrap(), lead.get_certificate("svc").unwrap());
        assert_eq!(stats.ra_fetches(), 1);
        let sealed = disk.load().unwrap();
        assert!(!f.storage_key().appears_in(&sealed));

        e.terminate().unwrap();
        assert_eq!(f.get_certificate("svc"), Err(AecsError::Unavailable));
        let e2 = launch(&node, "aecs", crate::aecs::aecs_measurement());
        let f2 = bootstrap(e2, store, &disk, &NoPeers, fx.config(), fx.clock.clone(), stats.clone()).unwrap();
        assert_eq!(f2.bootstrap_path(), BootstrapPath::Unsealed);
        assert_eq!(stats.ra_fetches(), 1);
        assert_eq!(f2.get_certificate("svc").unwrap(), lead.get_certificate("svc").unwrap());
    }

    #[test]
    fn stale_or_corrupt_seal_falls_back_to_fetch() {
        let mut fx = Fixture::new();
        let store: Arc<dyn UntrustedStore> = Arc::new(MemoryStore::new());
        let lead = leader(&mut fx, store.clone());
        let node = fx.node("aecs-1");
        let e = launch(&node, "aecs", crate::aecs::aecs_measurement());

        let disk = LocalDisk::memory();
        seal_local(&e, &disk, &StorageKey::generate(12345)).unwrap();
        let stats: Arc<AecsStats> = Arc::default();
        let f = bootstrap(
            e.clone(),
            store.clone(),
            &disk,
            &lead,
            fx.config(),
            fx.clock.clone(),
            stats.clone(),
        )
        .unwrap();
        assert_eq!(f.bootstrap_path(), BootstrapPath::Fetched);

        disk.store(b"garbage").unwrap();
        e.terminate().unwrap();
        let e = launch(&node, "aecs", crate::aecs::aecs_measurement());
        let f = bootstrap(e, store, &disk, &lead, fx.config(), fx.clock.clone(), stats.clone()).unwrap();
        assert_eq!(f.bootstrap_path(), BootstrapPath::Fetched);
        assert_eq!(stats.ra_fetches(), 2);
    }

    #[test]
    fn no_source_times_out() {
        let mut fx = Fixture::new();
        let store: Arc<dyn UntrustedStore> = Arc::new(MemoryStore::new());
        let _lead = leader(&mut fx, store.clone());
        let node = fx.node("aecs-1");
        let e = launch(&node, "aecs", crate::aecs::aecs_measurement());
        let err = bootstrap(
            e,
            store,
            &LocalDisk::memory(),
            &NoPeers,
            fx.config(),
            fx.clock.clone(),
            Arc::default(),
        )
        .unwrap_err();
        assert_eq!(err, AecsError::BootstrapTimeout);
    }

    #[test]
    fn concurrent_creates_both_land() {
        let mut fx = Fixture::new();
        let store: Arc<dyn UntrustedStore> = Arc::new(MemoryStore::new());
        let a = Arc::new(leader(&mut fx, store.clone()));
        let node = fx.node("aecs-1");
        let e = launch(&node, "aecs", crate::aecs::aecs_measurement());
        let b = Arc::new(
            bootstrap(
                e,
                store.clone(),
                &LocalDisk::memory(),
                &*a,
                fx.config(),
                fx.clock.clone(),
                Arc::default(),
            )
            .unwrap(),
        );
        for round in 0..20 {
            let (x, y) = (format!("x{round}"), format!("y{round}"));
            let ha = {
                let a = a.clone();
                let x = x.clone();
                std::thread::spawn(move || a.create_service_pki(&x, Measurement::of_code(b"x")))
            };
            let hb = {
                let b = b.clone();
                let y = y.clone();
                std::thread::spawn(move || b.create_service_pki(&y, Measurement::of_code(b"y")))
            };
            ha.join().unwrap().unwrap();
            hb.join().unwrap().unwrap();
            let map = a.key_map().unwrap();
            assert!(map.entries.contains_key(&x) && map.entries.contains_key(&y));
            assert_eq!(map.version, 2 * (round + 1));
        }
    }
}
