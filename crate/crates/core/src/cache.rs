//! Content-addressed response cache.
//!
//! Append-only JSONL of `{cache_key, request_digest, response_text, timestamp}`
//! with an in-memory index. Concurrent readers are lock-free after load;
//! writes are serialized through a file mutex. Entries are never evicted,
//! which is what makes completed experiments replayable offline.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub cache_key: String,
    pub request_digest: String,
    pub response_text: String,
    pub timestamp: String,
}

pub struct Cache {
    path: Option<PathBuf>,
    index: RwLock<HashMap<String, CacheEntry>>,
    file: Mutex<Option<File>>,
}

impl Cache {
    /// Opens (or creates) a cache file and loads its index.
    pub fn open(path: &Path) -> Result<Self> {
        let mut index = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry =
                    serde_json::from_str(&line).map_err(|e| Error::CacheCorrupt {
                        path: path.display().to_string(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                // Last write wins on duplicate keys.
                index.insert(entry.cache_key.clone(), entry);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Cache {
            path: Some(path.to_path_buf()),
            index: RwLock::new(index),
            file: Mutex::new(Some(file)),
        })
    }

    /// In-memory cache with no backing file, for tests.
    pub fn ephemeral() -> Self {
        Cache { path: None, index: RwLock::new(HashMap::new()), file: Mutex::new(None) }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.index.read().unwrap().get(key).map(|e| e.response_text.clone())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.read().unwrap().contains_key(key)
    }

    pub fn put(&self, key: &str, request_digest: &str, response_text: &str) -> Result<()> {
        let entry = CacheEntry {
            cache_key: key.to_string(),
            request_digest: request_digest.to_string(),
            response_text: response_text.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        {
            let mut guard = self.file.lock().unwrap();
            if let Some(f) = guard.as_mut() {
                let line = serde_json::to_string(&entry).expect("entry serialization");
                writeln!(f, "{}", line).map_err(|e| {
                    Error::io(
                        self.path
                            .as_ref()
                            .map(|p| p.display().to_string())
                            .unwrap_or_default(),
                        e,
                    )
                })?;
            }
        }
        self.index.write().unwrap().insert(key.to_string(), entry);
        Ok(())
    }
}

fn digest_parts(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Canonical, platform-independent rendering of a distortion parameter.
/// Bit-exact so 0.5 and 0.5000000001 never collide onto one key.
pub fn mu_repr(mu: f64) -> String {
    format!("{:016x}", mu.to_bits())
}

/// Cache key for a rephrasing call. Collision-resistant over all five
/// inputs via length-prefixed SHA-256.
pub fn rephrase_cache_key(
    provider_id: &str,
    model_id: &str,
    mu: f64,
    prompt_digest: &str,
    sample_id: &str,
) -> String {
    digest_parts(&["rephrase", provider_id, model_id, &mu_repr(mu), prompt_digest, sample_id])
}

/// Cache key for an embedding call, keyed by text digest rather than id so
/// identical texts share one entry.
pub fn embed_cache_key(provider_id: &str, model_id: &str, text: &str) -> String {
    let text_digest = crate::dataset::sha256_hex(text.as_bytes());
    digest_parts(&["embed", provider_id, model_id, &text_digest])
}

/// Cache key for a respondent query (prompt digest at fixed temperature).
pub fn query_cache_key(provider_id: &str, model_id: &str, prompt: &str, temperature: f64) -> String {
    let prompt_digest = crate::dataset::sha256_hex(prompt.as_bytes());
    digest_parts(&["query", provider_id, model_id, &prompt_digest, &mu_repr(temperature)])
}

/// Cache key for a judge call over an (original, rephrased) pair.
pub fn judge_cache_key(provider_id: &str, model_id: &str, original: &str, rephrased: &str) -> String {
    digest_parts(&[
        "judge",
        provider_id,
        model_id,
        &crate::dataset::sha256_hex(original.as_bytes()),
        &crate::dataset::sha256_hex(rephrased.as_bytes()),
    ])
}
