use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, Completion, CompletionRequest};
use crate::model::Usage;

/// One line of a replay store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub key: String,
    pub text: String,
    pub usage: Usage,
    pub latency_seconds: f64,
}

/// Wraps a backend and appends every successful call to a JSONL store
/// keyed by request digest.
pub struct RecordingBackend<B> {
    inner: B,
    out: Mutex<File>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B, store: &Path) -> Result<Self, BackendError> {
        let out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(store)
            .map_err(|e| BackendError::Config(format!("cannot open replay store {}: {e}", store.display())))?;
        Ok(RecordingBackend { inner, out: Mutex::new(out) })
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let completion = self.inner.complete(req)?;
        let entry = ReplayEntry {
            key: req.digest(),
            text: completion.text.clone(),
            usage: completion.usage,
            latency_seconds: completion.latency_seconds,
        };
        let mut line = serde_json::to_string(&entry).map_err(|e| BackendError::Config(e.to_string()))?;
        line.push('\n');
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        out.write_all(line.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| BackendError::Config(format!("replay store write failed: {e}")))?;
        Ok(completion)
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

/// Serves recorded completions; unseen requests are a [`BackendError::ReplayMiss`].
#[derive(Debug, Default)]
pub struct ReplayBackend {
    entries: HashMap<String, ReplayEntry>,
}

impl ReplayBackend {
    pub fn from_file(store: &Path) -> Result<Self, BackendError> {
        let file = File::open(store)
            .map_err(|e| BackendError::Config(format!("cannot open replay store {}: {e}", store.display())))?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Config(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(&line)
                .map_err(|e| BackendError::Config(format!("{}:{}: {e}", store.display(), i + 1)))?;
            entries.entry(entry.key.clone()).or_insert(entry);
        }
        Ok(ReplayBackend { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let key = req.digest();
        let entry = self.entries.get(&key).ok_or(BackendError::ReplayMiss(key))?;
        Ok(Completion { text: entry.text.clone(), usage: entry.usage, latency_seconds: entry.latency_seconds })
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}
