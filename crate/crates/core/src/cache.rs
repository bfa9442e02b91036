//! Content-addressed result cache.
//!
//! Keys are built from backend ids and content hashes; values are JSON.
//! With a directory attached, every insert is appended to `cache.jsonl` so
//! an interrupted ingest resumes from where it stopped.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;

const CACHE_FILE: &str = "cache.jsonl";

#[derive(Serialize, Deserialize)]
struct Line {
    k: String,
    v: Value,
}

#[derive(Debug, Default)]
pub struct Cache {
    entries: Mutex<HashMap<String, Value>>,
    file: Option<Mutex<File>>,
}

impl Cache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a persistent cache under `dir`. A torn final line
    /// from an interrupted write is ignored.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if let Ok(Line { k, v }) = serde_json::from_str::<Line>(&line) {
                    entries.insert(k, v);
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        let len = file.metadata()?.len();
        if len > 0 && !std::fs::read(&path)?.ends_with(b"\n") {
            file.write_all(b"\n")?;
        }
        Ok(Self {
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let entries = self.entries.lock().expect("cache poisoned");
        entries
            .get(key)
            .and_then(|v| serde_json::from_value(v.clone()).ok())
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<()> {
        let v = serde_json::to_value(value)?;
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&Line {
                k: key.to_string(),
                v: v.clone(),
            })?;
            line.push('\n');
            let mut f = file.lock().expect("cache file poisoned");
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.entries
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
