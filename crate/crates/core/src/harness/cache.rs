//! Content-addressed response cache: `root/<2 hex>/<sha256>.json`.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Semantic fields identifying one sampled response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheRequest<'a> {
    pub backend_id: &'a str,
    pub model_id: &'a str,
    pub query: &'a str,
    pub sample_index: u32,
    pub temperature: f64,
}

impl CacheRequest<'_> {
    /// SHA-256 over a JSON array of the fields, so field boundaries are unambiguous.
    pub fn key(&self) -> String {
        let payload = serde_json::json!([
            self.backend_id,
            self.model_id,
            self.query,
            self.sample_index,
            self.temperature
        ]);
        hex::encode(Sha256::digest(payload.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub value: String,
    /// Seconds since the Unix epoch.
    pub stored_at: u64,
    pub backend_id: String,
    pub model_id: String,
    pub sample_index: u32,
    pub temperature: f64,
}

#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, req: &CacheRequest<'_>) -> Result<Option<String>> {
        let key = req.key();
        let path = self.path_for(&key);
        match fs::read(&path) {
            Ok(bytes) => {
                let entry: CacheEntry = serde_json::from_slice(&bytes)?;
                if entry.key != key {
                    return Err(Error::Schema(format!("cache entry {} has key {}", path.display(), entry.key)));
                }
                self.hits.fetch_add(1, Ordering::Relaxed);
                Ok(Some(entry.value))
            }
            Err(e) if e.kind() == ErrorKind::NotFound => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                Ok(None)
            }
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, req: &CacheRequest<'_>, value: &str) -> Result<()> {
        let key = req.key();
        let stored_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let entry = CacheEntry {
            key: key.clone(),
            value: value.to_string(),
            stored_at,
            backend_id: req.backend_id.to_string(),
            model_id: req.model_id.to_string(),
            sample_index: req.sample_index,
            temperature: req.temperature,
        };
        super::write_atomic(&self.path_for(&key), &serde_json::to_vec_pretty(&entry)?)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(index: u32) -> CacheRequest<'static> {
        CacheRequest {
            backend_id: "http",
            model_id: "m",
            query: "2+2?",
            sample_index: index,
            temperature: 0.7,
        }
    }

    #[test]
    fn key_is_pure_and_field_sensitive() {
        assert_eq!(req(0).key(), req(0).key());
        assert_eq!(req(0).key().len(), 64);
        assert_ne!(req(0).key(), req(1).key());
        let mut other = req(0);
        other.temperature = 0.0;
        assert_ne!(req(0).key(), other.key());
        let a = CacheRequest { backend_id: "ab", model_id: "c", ..req(0) };
        let b = CacheRequest { backend_id: "a", model_id: "bc", ..req(0) };
        assert_ne!(a.key(), b.key());
    }

    #[test]
    fn key_matches_independent_digest() {
        let expected = hex::encode(Sha256::digest(br#"["http","m","2+2?",0,0.7]"#));
        assert_eq!(req(0).key(), expected);
    }

    #[test]
    fn put_then_get_hits() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        assert_eq!(cache.get(&req(3)).unwrap(), None);
        cache.put(&req(3), "four").unwrap();
        assert_eq!(cache.get(&req(3)).unwrap().as_deref(), Some("four"));
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        let key = req(3).key();
        assert!(dir.path().join(&key[..2]).join(format!("{key}.json")).is_file());
    }
}
