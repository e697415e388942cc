mod common;

use common::{bootstrap_race, restart_drill, AecsDeployment};
use enclave_serve::aecs::BootstrapPath;
use enclave_serve::channel::private_key_exported;

#[test]
fn hundred_concurrent_bootstraps_generate_one_key_each() {
    for seed in 0..100 {
        let out = bootstrap_race(seed);
        assert_eq!(out.generations, 1, "seed {seed}: {out:?}");
        assert_eq!(out.generated, 1, "seed {seed}: {out:?}");
        assert!(out.keys_agree, "seed {seed}: {out:?}");
    }
}

#[test]
fn full_restart_unseals_without_attestation() {
    let out = restart_drill(11);
    assert_eq!(out.paths, vec![BootstrapPath::Unsealed; 3]);
    assert_eq!(out.ra_fetches_during_restart, 0);
    assert!(out.services_recovered);
    assert!(out.same_storage_key);
}

#[test]
fn replica_with_lost_disk_fetches_from_a_peer() {
    let d = AecsDeployment::new(5, 3);
    let first = d.bootstrap_all();
    let fp = first[0].storage_key().fingerprint();
    d.client
        .create_service_pki("svc", enclave_serve::substrate::Measurement::of_code(b"svc"))
        .unwrap();
    // Keep two replicas up; wipe the third's sealed copy and relaunch it.
    let lost = first[2].clone();
    lost.enclave().terminate().unwrap();
    d.directory.clear();
    d.directory.add(first[0].clone());
    d.directory.add(first[1].clone());
    d.disks[2].clear();
    let before = d.stats.ra_fetches();
    let rest = AecsDeployment {
        nodes: vec![d.nodes[2].clone()],
        disks: vec![d.disks[2].clone()],
        clock: d.clock.clone(),
        registry: d.registry.clone(),
        store: d.store.clone(),
        stats: d.stats.clone(),
        directory: d.directory.clone(),
        client: d.client.clone(),
    };
    let again = rest.bootstrap_all();
    assert_eq!(again[0].bootstrap_path(), BootstrapPath::Fetched);
    assert_eq!(again[0].storage_key().fingerprint(), fp);
    assert!(d.stats.ra_fetches() > before);
    assert_eq!(d.stats.key_generations(), 1);
    assert!(!private_key_exported());
}
