//! Shared blob storage with atomic whole-blob replace.
//!
//! Two backends implement [`BlobStore`]: [`LocalDirStore`] keeps one file per
//! blob under a root directory and replaces content by writing a temporary
//! file in the same directory, syncing it and renaming it over the target;
//! [`MemStore`] keeps blobs in a map for tests.
//!
//! Both accept a fault hook that is consulted at every step of a put. A hook
//! returning [`Interrupted`] stops the put on the spot without any cleanup,
//! which is what a killed process leaves behind.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::cmi::{hex_digest, sha256, unix_now, DIGEST_LEN};

pub const MAX_KEY_LEN: usize = 512;
const TEMP_PREFIX: &str = ".tmp-";
const DEFAULT_CHUNK: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("blob {0} not found")]
    NotFound(String),
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("invalid blob key {0:?}")]
    KeyInvalid(String),
    #[error("write interrupted")]
    Interrupted,
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::Unavailable(e.to_string())
    }
}

/// Marker returned by a fault hook to stop a write where it stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interrupted;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutStep {
    Begin,
    TempCreated,
    /// `written` of `total` bytes are in the temporary file.
    Chunk { written: usize, total: usize },
    Synced,
    Renamed,
    Done,
}

impl PutStep {
    pub fn label(&self) -> &'static str {
        match self {
            PutStep::Begin => "begin",
            PutStep::TempCreated => "temp_created",
            PutStep::Chunk { .. } => "chunk",
            PutStep::Synced => "synced",
            PutStep::Renamed => "renamed",
            PutStep::Done => "done",
        }
    }
}

pub type FaultHook = Arc<dyn Fn(&BlobKey, PutStep) -> Result<(), Interrupted> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlobKey {
    namespace: String,
    name: String,
}

fn valid_segment(seg: &str) -> bool {
    !seg.is_empty()
        && !seg.starts_with('.')
        && seg
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

impl BlobKey {
    pub fn new(namespace: impl Into<String>, name: impl Into<String>) -> Result<Self, StoreError> {
        let key = Self {
            namespace: namespace.into(),
            name: name.into(),
        };
        let ok = valid_segment(&key.namespace)
            && key.name.split('/').all(valid_segment)
            && key.namespace.len() + 1 + key.name.len() <= MAX_KEY_LEN;
        if ok {
            Ok(key)
        } else {
            Err(StoreError::KeyInvalid(key.to_string()))
        }
    }

    /// Parses `namespace/name`.
    pub fn parse(s: &str) -> Result<Self, StoreError> {
        let (ns, name) = s
            .split_once('/')
            .ok_or_else(|| StoreError::KeyInvalid(s.to_string()))?;
        Self::new(ns, name)
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Display for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobMeta {
    pub key: BlobKey,
    pub length: u64,
    pub digest: [u8; DIGEST_LEN],
    /// Unix seconds.
    pub modified_at: i64,
}

impl BlobMeta {
    fn of(key: &BlobKey, content: &[u8], modified_at: i64) -> Self {
        Self {
            key: key.clone(),
            length: content.len() as u64,
            digest: sha256(content),
            modified_at,
        }
    }

    pub fn digest_hex(&self) -> String {
        hex_digest(&self.digest)
    }
}

pub trait BlobStore: Send + Sync {
    /// Replaces the blob wholesale. Readers see the old or the new content, never a mix.
    fn put_atomic(&self, key: &BlobKey, content: &[u8]) -> Result<BlobMeta, StoreError>;
    fn get(&self, key: &BlobKey) -> Result<Vec<u8>, StoreError>;
    fn exists(&self, key: &BlobKey) -> Result<bool, StoreError>;
    /// Blobs in `namespace`, ordered by name.
    fn list(&self, namespace: &str) -> Result<Vec<BlobMeta>, StoreError>;
    fn delete(&self, key: &BlobKey) -> Result<(), StoreError>;
}

fn run_hook(hook: &Option<FaultHook>, key: &BlobKey, step: PutStep) -> Result<(), StoreError> {
    match hook {
        Some(h) => h(key, step).map_err(|Interrupted| StoreError::Interrupted),
        None => Ok(()),
    }
}

/// Directory-backed store: `<root>/<namespace>/<name>`.
pub struct LocalDirStore {
    root: PathBuf,
    chunk: usize,
    hook: Option<FaultHook>,
    counter: AtomicU64,
}

impl fmt::Debug for LocalDirStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalDirStore")
            .field("root", &self.root)
            .field("chunk", &self.chunk)
            .finish_non_exhaustive()
    }
}

impl LocalDirStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            chunk: DEFAULT_CHUNK,
            hook: None,
            counter: AtomicU64::new(0),
        })
    }

    pub fn with_hook(mut self, hook: FaultHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn with_chunk_size(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, key: &BlobKey) -> PathBuf {
        let mut p = self.root.join(key.namespace());
        for seg in key.name().split('/') {
            p.push(seg);
        }
        p
    }

    fn write_temp(&self, key: &BlobKey, dir: &Path, target: &Path, content: &[u8]) -> Result<(), StoreError> {
        let file_name = target
            .file_name()
            .and_then(|n| n.to_str())
            .expect("validated key has a file name");
        let tmp = dir.join(format!(
            "{TEMP_PREFIX}{file_name}-{}-{}",
            std::process::id(),
            self.counter.fetch_add(1, Ordering::Relaxed)
        ));
        let mut file = fs::File::create(&tmp)?;
        run_hook(&self.hook, key, PutStep::TempCreated)?;
        let total = content.len();
        let mut written = 0;
        for chunk in content.chunks(self.chunk) {
            file.write_all(chunk)?;
            written += chunk.len();
            if written < total {
                run_hook(&self.hook, key, PutStep::Chunk { written, total })?;
            }
        }
        file.sync_all()?;
        drop(file);
        run_hook(&self.hook, key, PutStep::Synced)?;
        fs::rename(&tmp, target)?;
        run_hook(&self.hook, key, PutStep::Renamed)?;
        fs::File::open(dir)?.sync_all()?;
        Ok(())
    }

    fn collect(&self, dir: &Path, prefix: &str, out: &mut Vec<(String, PathBuf)>) -> io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let fname = entry.file_name();
            let Some(fname) = fname.to_str() else { continue };
            if fname.starts_with('.') {
                continue;
            }
            let name = if prefix.is_empty() {
                fname.to_string()
            } else {
                format!("{prefix}/{fname}")
            };
            let ft = entry.file_type()?;
            if ft.is_dir() {
                self.collect(&entry.path(), &name, out)?;
            } else if ft.is_file() {
                out.push((name, entry.path()));
            }
        }
        Ok(())
    }
}

fn not_found_or(key: &BlobKey, e: io::Error) -> StoreError {
    if e.kind() == io::ErrorKind::NotFound {
        StoreError::NotFound(key.to_string())
    } else {
        StoreError::Unavailable(e.to_string())
    }
}

fn mtime(meta: &fs::Metadata) -> i64 {
    meta.modified()
        .ok()
        .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

impl BlobStore for LocalDirStore {
    fn put_atomic(&self, key: &BlobKey, content: &[u8]) -> Result<BlobMeta, StoreError> {
        run_hook(&self.hook, key, PutStep::Begin)?;
        let target = self.path_of(key);
        let dir = target.parent().expect("blob path has a parent").to_path_buf();
        fs::create_dir_all(&dir)?;
        self.write_temp(key, &dir, &target, content)?;
        run_hook(&self.hook, key, PutStep::Done)?;
        Ok(BlobMeta::of(key, content, unix_now()))
    }

    fn get(&self, key: &BlobKey) -> Result<Vec<u8>, StoreError> {
        fs::read(self.path_of(key)).map_err(|e| not_found_or(key, e))
    }

    fn exists(&self, key: &BlobKey) -> Result<bool, StoreError> {
        match fs::metadata(self.path_of(key)) {
            Ok(m) => Ok(m.is_file()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    fn list(&self, namespace: &str) -> Result<Vec<BlobMeta>, StoreError> {
        if !valid_segment(namespace) {
            return Err(StoreError::KeyInvalid(namespace.to_string()));
        }
        let dir = self.root.join(namespace);
        let mut found = Vec::new();
        match self.collect(&dir, "", &mut found) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        }
        found.sort();
        let mut metas = Vec::with_capacity(found.len());
        for (name, path) in found {
            let key = BlobKey::new(namespace, name)?;
            // a concurrent delete between listing and reading just drops the entry
            let content = match fs::read(&path) {
                Ok(c) => c,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            };
            let modified = fs::metadata(&path).map(|m| mtime(&m)).unwrap_or(0);
            metas.push(BlobMeta::of(&key, &content, modified));
        }
        Ok(metas)
    }

    fn delete(&self, key: &BlobKey) -> Result<(), StoreError> {
        fs::remove_file(self.path_of(key)).map_err(|e| not_found_or(key, e))
    }
}

/// In-memory store. A put publishes its content only at the `Renamed` step.
#[derive(Default)]
pub struct MemStore {
    blobs: Mutex<BTreeMap<BlobKey, (Vec<u8>, i64)>>,
    hook: Option<FaultHook>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_hook(hook: FaultHook) -> Self {
        Self {
            blobs: Mutex::default(),
            hook: Some(hook),
        }
    }
}

impl BlobStore for MemStore {
    fn put_atomic(&self, key: &BlobKey, content: &[u8]) -> Result<BlobMeta, StoreError> {
        run_hook(&self.hook, key, PutStep::Begin)?;
        run_hook(&self.hook, key, PutStep::TempCreated)?;
        run_hook(&self.hook, key, PutStep::Synced)?;
        let now = unix_now();
        self.blobs
            .lock()
            .expect("store lock poisoned")
            .insert(key.clone(), (content.to_vec(), now));
        run_hook(&self.hook, key, PutStep::Renamed)?;
        run_hook(&self.hook, key, PutStep::Done)?;
        Ok(BlobMeta::of(key, content, now))
    }

    fn get(&self, key: &BlobKey) -> Result<Vec<u8>, StoreError> {
        self.blobs
            .lock()
            .expect("store lock poisoned")
            .get(key)
            .map(|(c, _)| c.clone())
            .ok_or_else(|| StoreError::NotFound(key.to_string()))
    }

    fn exists(&self, key: &BlobKey) -> Result<bool, StoreError> {
        Ok(self.blobs.lock().expect("store lock poisoned").contains_key(key))
    }

    fn list(&self, namespace: &str) -> Result<Vec<BlobMeta>, StoreError> {
        let blobs = self.blobs.lock().expect("store lock poisoned");
        Ok(blobs
            .iter()
            .filter(|(k, _)| k.namespace() == namespace)
            .map(|(k, (c, at))| BlobMeta::of(k, c, *at))
            .collect())
    }

    fn delete(&self, key: &BlobKey) -> Result<(), StoreError> {
        self.blobs
            .lock()
            .expect("store lock poisoned")
            .remove(key)
            .map(|_| ())
            .ok_or_else(|| StoreError::NotFound(key.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(ns: &str, name: &str) -> BlobKey {
        BlobKey::new(ns, name).unwrap()
    }

    #[test]
    fn key_validation() {
        assert!(BlobKey::new("job-1", "product/match.txt").is_ok());
        assert!(BlobKey::new("job-1", "ckpt-0000000001.cmi").is_ok());
        for (ns, name) in [
            ("", "x"),
            ("job 1", "x"),
            ("job-1", ""),
            ("job-1", "a//b"),
            ("job-1", "../escape"),
            ("job-1", ".tmp-x"),
            ("a/b", "x"),
            ("job-1", "ünicode"),
        ] {
            assert!(BlobKey::new(ns, name).is_err(), "{ns:?}/{name:?}");
        }
        let long = "x".repeat(MAX_KEY_LEN);
        assert!(BlobKey::new("n", &long).is_err());
        assert!(BlobKey::new("n", &long[..MAX_KEY_LEN - 2]).is_ok());
        assert_eq!(BlobKey::parse("job-1/product/match.txt").unwrap(), key("job-1", "product/match.txt"));
    }

    fn exercise(store: &dyn BlobStore) {
        let k = key("job-1", "current.manifest");
        assert!(!store.exists(&k).unwrap());
        assert!(matches!(store.get(&k), Err(StoreError::NotFound(_))));
        let meta = store.put_atomic(&k, b"first").unwrap();
        assert_eq!(meta.length, 5);
        assert_eq!(meta.digest, sha256(b"first"));
        assert_eq!(store.get(&k).unwrap(), b"first");
        store.put_atomic(&k, b"second").unwrap();
        assert_eq!(store.get(&k).unwrap(), b"second");
        assert!(store.exists(&k).unwrap());
        store.delete(&k).unwrap();
        assert!(!store.exists(&k).unwrap());
        assert!(matches!(store.delete(&k), Err(StoreError::NotFound(_))));

        for name in ["c.txt", "a.txt", "product/b.txt"] {
            store.put_atomic(&key("job-2", name), name.as_bytes()).unwrap();
        }
        store.put_atomic(&key("job-20", "z"), b"z").unwrap();
        let names: Vec<_> = store
            .list("job-2")
            .unwrap()
            .into_iter()
            .map(|m| m.key.name().to_string())
            .collect();
        assert_eq!(names, ["a.txt", "c.txt", "product/b.txt"]);
        assert!(store.list("job-3").unwrap().is_empty());
    }

    #[test]
    fn mem_store_contract() {
        exercise(&MemStore::new());
    }

    #[test]
    fn local_store_contract() {
        let dir = tempfile::tempdir().unwrap();
        exercise(&LocalDirStore::open(dir.path()).unwrap());
    }

    #[test]
    fn list_ignores_temp_debris() {
        let dir = tempfile::tempdir().unwrap();
        let k = key("job-1", "current.cmi");
        let hook: FaultHook = Arc::new(|_, step| {
            if step == PutStep::Synced {
                Err(Interrupted)
            } else {
                Ok(())
            }
        });
        let store = LocalDirStore::open(dir.path()).unwrap().with_hook(hook);
        assert_eq!(store.put_atomic(&k, b"x"), Err(StoreError::Interrupted));
        let clean = LocalDirStore::open(dir.path()).unwrap();
        assert!(clean.list("job-1").unwrap().is_empty());
        assert!(!clean.exists(&k).unwrap());
    }
}
