//! Untrusted, highly available object storage with per-object versions.
//!
//! An absent object has version 0. `put(name, bytes, v)` succeeds only if the
//! current version is `v` and yields `v + 1`; create-if-absent is `put` at 0.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("version conflict: current version is {current}")]
    Conflict { current: u64 },
    #[error("invalid object name {0:?}")]
    InvalidName(String),
    #[error("store io: {0}")]
    Io(String),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

pub trait UntrustedStore: Send + Sync {
    /// Current bytes and version, or `None` if the object does not exist.
    fn get(&self, name: &str) -> Result<Option<(Vec<u8>, u64)>, StoreError>;

    /// Compare-and-swap; returns the new version.
    fn put(&self, name: &str, bytes: &[u8], expected_version: u64) -> Result<u64, StoreError>;

    /// Returns true for the single caller that created the object.
    fn create_if_absent(&self, name: &str, bytes: &[u8]) -> Result<bool, StoreError> {
        match self.put(name, bytes, 0) {
            Ok(_) => Ok(true),
            Err(StoreError::Conflict { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn list(&self) -> Result<Vec<String>, StoreError>;
}

fn check_name(name: &str) -> Result<(), StoreError> {
    let ok = !name.is_empty()
        && name.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..")
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '/' | '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidName(name.to_owned()))
    }
}

/// Every stored object, latest version only. Used for byte scans.
pub fn dump(store: &dyn UntrustedStore) -> Result<Vec<(String, Vec<u8>)>, StoreError> {
    let mut out = Vec::new();
    for name in store.list()? {
        if let Some((bytes, _)) = store.get(&name)? {
            out.push((name, bytes));
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    objects: Mutex<BTreeMap<String, (Vec<u8>, u64)>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl UntrustedStore for MemoryStore {
    fn get(&self, name: &str) -> Result<Option<(Vec<u8>, u64)>, StoreError> {
        check_name(name)?;
        Ok(self.objects.lock().expect("store poisoned").get(name).cloned())
    }

    fn put(&self, name: &str, bytes: &[u8], expected_version: u64) -> Result<u64, StoreError> {
        check_name(name)?;
        let mut objects = self.objects.lock().expect("store poisoned");
        let current = objects.get(name).map_or(0, |(_, v)| *v);
        if current != expected_version {
            return Err(StoreError::Conflict { current });
        }
        objects.insert(name.to_owned(), (bytes.to_vec(), current + 1));
        Ok(current + 1)
    }

    fn list(&self) -> Result<Vec<String>, StoreError> {
        Ok(self.objects.lock().expect("store poisoned").keys().cloned().collect())
    }
}

/// One file per object version, `<name>.v<N>`, with `/` in names mapped to
/// `~`. A version is published by hard-linking a fully written temp file,
/// which fails if the version already exists, so CAS holds across processes.
#[derive(Debug)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        fs::create_dir_all(root.as_ref())?;
        Ok(DirStore {
            root: root.as_ref().to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn file_stem(name: &str) -> String {
        name.replace('/', "~")
    }

    fn versions(&self) -> Result<BTreeMap<String, u64>, StoreError> {
        let mut latest = BTreeMap::new();
        for entry in fs::read_dir(&self.root)? {
            let file = entry?.file_name();
            let Some(file) = file.to_str() else { continue };
            let Some((stem, ver)) = file.rsplit_once(".v") else {
                continue;
            };
            let Ok(ver) = ver.parse::<u64>() else { continue };
            let v = latest.entry(stem.replace('~', "/")).or_insert(0);
            *v = (*v).max(ver);
        }
        Ok(latest)
    }

    fn current_version(&self, name: &str) -> Result<u64, StoreError> {
        let stem = Self::file_stem(name);
        let mut v = 0;
        while self.root.join(format!("{stem}.v{}", v + 1)).exists() {
            v += 1;
        }
        Ok(v)
    }
}

impl UntrustedStore for DirStore {
    fn get(&self, name: &str) -> Result<Option<(Vec<u8>, u64)>, StoreError> {
        check_name(name)?;
        loop {
            let v = self.current_version(name)?;
            if v == 0 {
                return Ok(None);
            }
            let path = self.root.join(format!("{}.v{v}", Self::file_stem(name)));
            match fs::read(&path) {
                Ok(bytes) => return Ok(Some((bytes, v))),
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn put(&self, name: &str, bytes: &[u8], expected_version: u64) -> Result<u64, StoreError> {
        check_name(name)?;
        let stem = Self::file_stem(name);
        if expected_version > 0 && !self.root.join(format!("{stem}.v{expected_version}")).exists() {
            return Err(StoreError::Conflict {
                current: self.current_version(name)?,
            });
        }
        let next = expected_version + 1;
        let tmp = self.root.join(format!(
            ".tmp-{stem}-{}-{}",
            std::process::id(),
            hex::encode(crate::crypto::random_bytes::<8>())
        ));
        {
            let mut f = fs::File::create_new(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        let target = self.root.join(format!("{stem}.v{next}"));
        let linked = fs::hard_link(&tmp, &target);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => Ok(next),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::Conflict {
                current: self.current_version(name)?,
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn list(&self) -> Result<Vec<String>, StoreError> {
        Ok(self.versions()?.into_keys().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn exercise(store: &dyn UntrustedStore) {
        assert_eq!(store.get("aecs/keymap").unwrap(), None);
        assert!(store.create_if_absent("aecs/leader", b"g1").unwrap());
        assert!(!store.create_if_absent("aecs/leader", b"g2").unwrap());
        assert_eq!(store.get("aecs/leader").unwrap(), Some((b"g1".to_vec(), 1)));

        assert_eq!(store.put("aecs/keymap", b"a", 0).unwrap(), 1);
        assert_eq!(
            store.put("aecs/keymap", b"b", 0),
            Err(StoreError::Conflict { current: 1 })
        );
        assert_eq!(
            store.put("aecs/keymap", b"b", 5),
            Err(StoreError::Conflict { current: 1 })
        );
        assert_eq!(store.put("aecs/keymap", b"b", 1).unwrap(), 2);
        assert_eq!(store.get("aecs/keymap").unwrap(), Some((b"b".to_vec(), 2)));
        assert_eq!(store.list().unwrap(), vec!["aecs/keymap", "aecs/leader"]);
        assert!(matches!(store.get("../x"), Err(StoreError::InvalidName(_))));
    }

    #[test]
    fn memory_semantics() {
        exercise(&MemoryStore::new());
    }

    #[test]
    fn dir_semantics() {
        let dir = tempfile::tempdir().unwrap();
        exercise(&DirStore::open(dir.path()).unwrap());
        // A second handle on the same directory sees the same state.
        let again = DirStore::open(dir.path()).unwrap();
        assert_eq!(again.get("aecs/keymap").unwrap().unwrap().1, 2);
    }

    fn race(store: Arc<dyn UntrustedStore>) {
        let winners: usize = (0..8)
            .map(|i| {
                let s = store.clone();
                std::thread::spawn(move || s.create_if_absent("x", &[i as u8]).unwrap())
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap() as usize)
            .sum();
        assert_eq!(winners, 1);
    }

    #[test]
    fn create_if_absent_has_one_winner() {
        for _ in 0..20 {
            race(Arc::new(MemoryStore::new()));
            let dir = tempfile::tempdir().unwrap();
            race(Arc::new(DirStore::open(dir.path()).unwrap()));
        }
    }
}
