//! Append-only score cache.
//!
//! The store is a single JSONL log (`scores.log`) of `{"key": .., "value": ..}`
//! records. It is loaded into memory on open; new results are appended and
//! flushed one line at a time. A torn final record (no trailing newline) from
//! an interrupted write is dropped on open; any other undecodable record is
//! reported with its byte offset.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BackendError;

pub const CACHE_FILE: &str = "scores.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Logprob,
    Reward,
    Generate,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Logprob => "logprob",
            Capability::Reward => "reward",
            Capability::Generate => "generate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub capability: Capability,
    pub model_id: String,
    /// Hex SHA-256 of the canonical JSON request payload.
    pub content_hash: String,
}

impl CacheKey {
    pub fn new<P: Serialize>(capability: Capability, model_id: &str, payload: &P) -> Self {
        let bytes = serde_json::to_vec(payload).expect("payload serializes");
        Self {
            capability,
            model_id: model_id.to_string(),
            content_hash: hex::encode(Sha256::digest(&bytes)),
        }
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}",
            self.capability, self.model_id, self.content_hash
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    key: String,
    value: serde_json::Value,
}

pub struct ScoreCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, serde_json::Value>>,
    log: Mutex<File>,
}

impl fmt::Debug for ScoreCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScoreCache")
            .field("path", &self.path)
            .field("entries", &self.len())
            .finish()
    }
}

impl ScoreCache {
    /// Opens (creating if needed) the store in `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, BackendError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .append(true)
            .open(&path)?;

        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;

        let mut entries = HashMap::new();
        let mut offset = 0usize;
        while offset < raw.len() {
            let Some(rel_end) = raw[offset..].iter().position(|&b| b == b'\n') else {
                log::warn!(
                    "{}: dropping torn trailing record at byte {offset}",
                    path.display()
                );
                file.set_len(offset as u64)?;
                break;
            };
            let line = &raw[offset..offset + rel_end];
            if !line.iter().all(u8::is_ascii_whitespace) {
                let rec: Record =
                    serde_json::from_slice(line).map_err(|e| BackendError::Cache {
                        offset: offset as u64,
                        reason: e.to_string(),
                    })?;
                entries.insert(rec.key, rec.value);
            }
            offset += rel_end + 1;
        }

        Ok(Self {
            path,
            entries: Mutex::new(entries),
            log: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get<T: DeserializeOwned>(&self, key: &CacheKey) -> Option<T> {
        let entries = self.entries.lock().unwrap();
        let value = entries.get(&key.to_string())?;
        match serde_json::from_value(value.clone()) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("cache record {key} does not decode, refetching: {e}");
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, key: &CacheKey, value: &T) -> Result<(), BackendError> {
        let record = Record {
            key: key.to_string(),
            value: serde_json::to_value(value)
                .map_err(|e| BackendError::Protocol(format!("unserializable result: {e}")))?,
        };
        let mut line = serde_json::to_vec(&record).expect("record serializes");
        line.push(b'\n');
        {
            let mut log = self.log.lock().unwrap();
            log.write_all(&line)?;
            log.flush()?;
        }
        self.entries
            .lock()
            .unwrap()
            .insert(record.key, record.value);
        Ok(())
    }
}

/// Returns the stored result for `key`, or runs `op` and records its result.
pub async fn cached<T, F, Fut>(
    store: Option<&ScoreCache>,
    key: &CacheKey,
    op: F,
) -> Result<T, BackendError>
where
    T: Serialize + DeserializeOwned,
    F: FnOnce() -> Fut,
    Fut: Future<Output = Result<T, BackendError>>,
{
    let Some(store) = store else {
        return op().await;
    };
    if let Some(hit) = store.get(key) {
        return Ok(hit);
    }
    let value = op().await?;
    store.put(key, &value)?;
    Ok(value)
}
