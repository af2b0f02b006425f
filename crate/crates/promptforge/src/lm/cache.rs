//! Content-addressed response cache: an append-only JSONL file plus an
//! in-memory index. Crash-safe, diffable, no database dependency.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::hash::hex_digest;

use super::{LmBackend, LmError, LmRequest};

/// Stable key over all request fields (seed included).
pub fn cache_key(request: &LmRequest) -> String {
    let canonical = serde_json::to_string(request).expect("request serializes");
    hex_digest(canonical.as_bytes())
}

/// One persisted cache line. `request` holds the digest inputs so integrity
/// can be re-checked on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: LmRequest,
    pub response: String,
    pub created_at: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cache serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Key-value store behind the cache decorator. Reads may be concurrent;
/// writes are serialized by the implementation.
pub trait CacheStore: Send + Sync {
    fn get(&self, key: &str) -> Option<String>;
    fn put(&self, key: &str, request: &LmRequest, response: &str) -> Result<(), CacheError>;
}

impl<T: CacheStore + ?Sized> CacheStore for &T {
    fn get(&self, key: &str) -> Option<String> {
        (**self).get(key)
    }
    fn put(&self, key: &str, request: &LmRequest, response: &str) -> Result<(), CacheError> {
        (**self).put(key, request, response)
    }
}

impl<T: CacheStore + ?Sized> CacheStore for std::sync::Arc<T> {
    fn get(&self, key: &str) -> Option<String> {
        (**self).get(key)
    }
    fn put(&self, key: &str, request: &LmRequest, response: &str) -> Result<(), CacheError> {
        (**self).put(key, request, response)
    }
}

impl<T: CacheStore + ?Sized> CacheStore for Box<T> {
    fn get(&self, key: &str) -> Option<String> {
        (**self).get(key)
    }
    fn put(&self, key: &str, request: &LmRequest, response: &str) -> Result<(), CacheError> {
        (**self).put(key, request, response)
    }
}

/// In-memory store for tests and ephemeral runs.
#[derive(Default)]
pub struct MemoryCache {
    map: RwLock<HashMap<String, String>>,
}

impl MemoryCache {
    pub fn new() -> Self {
        MemoryCache::default()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CacheStore for MemoryCache {
    fn get(&self, key: &str) -> Option<String> {
        self.map.read().expect("cache lock").get(key).cloned()
    }

    fn put(&self, key: &str, _request: &LmRequest, response: &str) -> Result<(), CacheError> {
        self.map
            .write()
            .expect("cache lock")
            .insert(key.to_string(), response.to_string());
        Ok(())
    }
}

/// Append-only JSONL file with an in-memory index.
///
/// Lines whose recomputed key does not match the stored key fail the
/// integrity check and are treated as misses (evicted from the index).
pub struct JsonlCache {
    path: PathBuf,
    index: RwLock<HashMap<String, String>>,
    writer: Mutex<File>,
}

impl JsonlCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| CacheError::Io {
            path: path.clone(),
            source,
        };
        let mut index = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(io_err)?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let Ok(entry) = serde_json::from_str::<CacheEntry>(&line) else {
                    continue; // corrupt line: evict
                };
                if cache_key(&entry.request) != entry.key {
                    continue; // integrity check failed: evict
                }
                index.insert(entry.key, entry.response);
            }
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        Ok(JsonlCache {
            path,
            index: RwLock::new(index),
            writer: Mutex::new(writer),
        })
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl CacheStore for JsonlCache {
    fn get(&self, key: &str) -> Option<String> {
        self.index.read().expect("cache lock").get(key).cloned()
    }

    fn put(&self, key: &str, request: &LmRequest, response: &str) -> Result<(), CacheError> {
        let entry = CacheEntry {
            key: key.to_string(),
            request: request.clone(),
            response: response.to_string(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let line = serde_json::to_string(&entry)?;
        {
            let mut writer = self.writer.lock().expect("cache lock");
            writeln!(writer, "{line}").map_err(|source| CacheError::Io {
                path: self.path.clone(),
                source,
            })?;
            writer.flush().map_err(|source| CacheError::Io {
                path: self.path.clone(),
                source,
            })?;
        }
        self.index
            .write()
            .expect("cache lock")
            .insert(key.to_string(), response.to_string());
        Ok(())
    }
}

/// Decorates a backend with a cache: consults the store before delegating
/// and writes through on miss.
pub struct CachedLm<B, S> {
    inner: B,
    store: S,
}

impl<B: LmBackend, S: CacheStore> CachedLm<B, S> {
    pub fn new(inner: B, store: S) -> Self {
        CachedLm { inner, store }
    }
}

/// Spec-named constructor for [`CachedLm`].
pub fn with_cache<B: LmBackend, S: CacheStore>(backend: B, store: S) -> CachedLm<B, S> {
    CachedLm::new(backend, store)
}

impl<B: LmBackend, S: CacheStore> LmBackend for CachedLm<B, S> {
    fn complete(&self, request: &LmRequest) -> Result<String, LmError> {
        let key = cache_key(request);
        if let Some(hit) = self.store.get(&key) {
            return Ok(hit);
        }
        let response = self.inner.complete(request)?;
        self.store
            .put(&key, request, &response)
            .map_err(|e| LmError::Cache(e.to_string()))?;
        Ok(response)
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}
