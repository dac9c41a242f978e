//! Per-stage result cache backed by JSON-lines files.
//!
//! Each stage owns one append-only file `<dir>/<stage>.jsonl`. On open every
//! file is read into memory; later lines win on key collisions, and lines
//! that fail to parse (e.g. a record cut short by a crash) or that were
//! written by another pipeline version are skipped.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::eval::Stage;

pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub question_id: String,
    pub stage: Stage,
    pub subhash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: CacheKey,
    pub payload: Value,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub version: String,
}

pub fn decode_cache_line(line: &str) -> Result<CacheRecord, serde_json::Error> {
    serde_json::from_str(line)
}

#[derive(Default)]
struct StageStore {
    entries: RwLock<HashMap<(String, String), Value>>,
    writer: Mutex<Option<File>>,
}

pub struct StageCache {
    dir: Option<PathBuf>,
    stores: HashMap<Stage, StageStore>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl StageCache {
    /// Cache that lives for one process only.
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            stores: Stage::ALL.into_iter().map(|s| (s, StageStore::default())).collect(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut cache = Self::in_memory();
        cache.dir = Some(dir.to_path_buf());
        for stage in Stage::ALL {
            let path = cache.stage_path(stage).expect("directory set");
            if !path.exists() {
                continue;
            }
            let mut entries = cache.stores[&stage].entries.write().expect("cache lock");
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match decode_cache_line(&line) {
                    Ok(r) if r.version == PIPELINE_VERSION && r.key.stage == stage => {
                        entries.insert((r.key.question_id, r.key.subhash), r.payload);
                    }
                    Ok(_) => {}
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), n + 1),
                }
            }
        }
        Ok(cache)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn stage_path(&self, stage: Stage) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{stage}.jsonl")))
    }

    pub fn get<T: DeserializeOwned>(&self, stage: Stage, question_id: &str, subhash: &str) -> Option<T> {
        let entries = self.stores[&stage].entries.read().expect("cache lock");
        let found = entries
            .get(&(question_id.to_string(), subhash.to_string()))
            .and_then(|v| match serde_json::from_value(v.clone()) {
                Ok(t) => Some(t),
                Err(e) => {
                    log::warn!("ignoring cached {stage} entry for {question_id}: {e}");
                    None
                }
            });
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    pub fn put<T: Serialize>(&self, stage: Stage, question_id: &str, subhash: &str, payload: &T) -> io::Result<()> {
        let payload = serde_json::to_value(payload).map_err(io::Error::other)?;
        let store = &self.stores[&stage];
        if let Some(path) = self.stage_path(stage) {
            let record = CacheRecord {
                key: CacheKey {
                    question_id: question_id.to_string(),
                    stage,
                    subhash: subhash.to_string(),
                },
                payload: payload.clone(),
                created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
                version: PIPELINE_VERSION.to_string(),
            };
            let mut line = serde_json::to_string(&record).map_err(io::Error::other)?;
            line.push('\n');
            let mut writer = store.writer.lock().expect("cache writer lock");
            if writer.is_none() {
                *writer = Some(OpenOptions::new().create(true).append(true).open(path)?);
            }
            let file = writer.as_mut().expect("writer opened");
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        store
            .entries
            .write()
            .expect("cache lock")
            .insert((question_id.to_string(), subhash.to_string()), payload);
        Ok(())
    }

    pub fn len(&self, stage: Stage) -> usize {
        self.stores[&stage].entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        Stage::ALL.into_iter().all(|s| self.len(s) == 0)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cache = StageCache::open(dir.path()).unwrap();
        assert_eq!(cache.get::<f64>(Stage::Rerank, "q1", "h"), None);
        cache.put(Stage::Rerank, "q1", "h", &0.1f64).unwrap();
        cache.put(Stage::Rerank, "q1", "h", &(1.0f64 / 3.0)).unwrap();
        cache.put(Stage::Summary, "q1", "h", &"text").unwrap();
        drop(cache);

        let cache = StageCache::open(dir.path()).unwrap();
        assert_eq!(cache.get::<f64>(Stage::Rerank, "q1", "h"), Some(1.0 / 3.0));
        assert_eq!(cache.get::<String>(Stage::Summary, "q1", "h").as_deref(), Some("text"));
        assert_eq!(cache.get::<f64>(Stage::Rerank, "q1", "other"), None);
        assert_eq!(cache.len(Stage::Rerank), 1);
        assert_eq!(cache.hits(), 2);
    }

    #[test]
    fn malformed_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let cache = StageCache::open(dir.path()).unwrap();
        cache.put(Stage::Qa, "q", "h", &vec![1, 2]).unwrap();
        drop(cache);
        let path = dir.path().join("qa.jsonl");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{\"key\": {\"question_id\": \"x\"\n");
        fs::write(&path, text).unwrap();
        let cache = StageCache::open(dir.path()).unwrap();
        assert_eq!(cache.get::<Vec<i32>>(Stage::Qa, "q", "h"), Some(vec![1, 2]));
        assert_eq!(cache.len(Stage::Qa), 1);
    }

    #[test]
    fn in_memory_cache_memoizes() {
        let cache = StageCache::in_memory();
        cache.put(Stage::Answer, "q", "h", &"a").unwrap();
        assert_eq!(cache.get::<String>(Stage::Answer, "q", "h").as_deref(), Some("a"));
        assert!(cache.dir().is_none());
    }
}
