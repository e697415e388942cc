//! Exports a key on purpose, in its own process, to show the taint flag and
//! the byte scanner both work.

use enclave_serve::channel::{generate_pki, private_key_exported, Validity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn export_sets_taint_and_scanner_finds_the_key() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pki = generate_pki("canary", Validity::default(), &mut rng).unwrap();
    let mut haystack = vec![0u8; 4096];
    rng.fill(&mut haystack[..]);
    assert!(!pki.private_key_appears_in(&haystack));
    assert!(!private_key_exported());

    let key = pki.export_private_key();
    assert!(private_key_exported());
    haystack[1000..1008].copy_from_slice(&key[5..13]);
    assert!(pki.private_key_appears_in(&haystack));
}
