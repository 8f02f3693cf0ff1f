//! Chat backends: the interface, a disk cache and transcript replay.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LlmTranscript;

/// Environment variable naming the cache root.
pub const CACHE_DIR_ENV: &str = "TAP_CACHE_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    pub text: String,
    /// Milliseconds since the Unix epoch at which the response was produced.
    pub timestamp: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend `{backend}` unreachable: {message}")]
    Unreachable { backend: String, message: String },
    #[error("backend `{backend}` returned an error: {message}")]
    Response { backend: String, message: String },
    #[error("no recorded response for this request (key {key})")]
    FixtureMiss { key: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, messages: &[ChatMessage]) -> Result<Reply, BackendError>;
}

pub fn now_millis() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Hex SHA-256 over the backend id and the full message list.
pub fn cache_key(backend_id: &str, messages: &[ChatMessage]) -> String {
    let doc = serde_json::json!({ "backend_id": backend_id, "messages": messages });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    backend_id: String,
    messages: Vec<ChatMessage>,
    response: String,
    timestamp: u64,
}

/// Wraps a backend with an on-disk response cache. A hit returns the stored
/// response and timestamp, so cached runs are byte-identical.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
}

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

impl<B: LlmBackend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Self {
        Self { inner, dir: dir.into() }
    }

    /// Cache rooted at `$TAP_CACHE_DIR`. Hands the backend back when the
    /// variable is unset.
    pub fn from_env(inner: B) -> Result<Self, B> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) => Ok(Self::new(inner, dir)),
            None => Err(inner),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn store(&self, path: &Path, entry: &CacheEntry) -> Result<(), BackendError> {
        let io = |e: std::io::Error| BackendError::Io { path: path.to_path_buf(), message: e.to_string() };
        fs::create_dir_all(&self.dir).map_err(io)?;
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = path.with_extension(format!("{}.{n}.tmp", std::process::id()));
        let body = serde_json::to_string_pretty(entry).expect("cache entry serializes");
        fs::write(&tmp, body).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }
}

impl<B: LlmBackend> LlmBackend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn send(&self, messages: &[ChatMessage]) -> Result<Reply, BackendError> {
        let key = cache_key(self.id(), messages);
        let path = self.entry_path(&key);
        if let Ok(bytes) = fs::read(&path) {
            match serde_json::from_slice::<CacheEntry>(&bytes) {
                Ok(e) if e.backend_id == self.id() && e.messages == messages => {
                    log::debug!("cache hit {key}");
                    return Ok(Reply { text: e.response, timestamp: e.timestamp });
                }
                _ => log::warn!("ignoring unreadable cache entry {}", path.display()),
            }
        }
        let reply = self.inner.send(messages)?;
        let entry = CacheEntry {
            backend_id: self.id().to_string(),
            messages: messages.to_vec(),
            response: reply.text.clone(),
            timestamp: reply.timestamp,
        };
        self.store(&path, &entry)?;
        Ok(reply)
    }
}

/// Replays responses recorded in transcript files.
#[derive(Clone, Debug)]
pub struct FixtureBackend {
    id: String,
    replies: HashMap<String, Reply>,
}

impl FixtureBackend {
    pub fn from_transcripts<'a>(id: &str, transcripts: impl IntoIterator<Item = &'a LlmTranscript>) -> Self {
        let mut replies = HashMap::new();
        for t in transcripts {
            for r in &t.records {
                let reply = Reply { text: r.response.clone(), timestamp: r.timestamp };
                replies.entry(cache_key(&r.backend_id, &r.prompt)).or_insert(reply);
            }
        }
        Self { id: id.to_string(), replies }
    }

    /// Loads a transcript file, or every file named `transcript.json` or
    /// `*.transcript.json` in a directory.
    pub fn load(id: &str, path: &Path) -> Result<Self, BackendError> {
        let io = |p: &Path, e: String| BackendError::Io { path: p.to_path_buf(), message: e };
        let files: Vec<PathBuf> = if path.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| io(path, e.to_string()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("transcript.json")))
                .collect();
            v.sort();
            v
        } else {
            vec![path.to_path_buf()]
        };
        let mut transcripts = Vec::new();
        for f in &files {
            let bytes = fs::read(f).map_err(|e| io(f, e.to_string()))?;
            transcripts.push(serde_json::from_slice::<LlmTranscript>(&bytes).map_err(|e| io(f, e.to_string()))?);
        }
        Ok(Self::from_transcripts(id, &transcripts))
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl LlmBackend for FixtureBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, messages: &[ChatMessage]) -> Result<Reply, BackendError> {
        let key = cache_key(&self.id, messages);
        self.replies.get(&key).cloned().ok_or(BackendError::FixtureMiss { key })
    }
}
