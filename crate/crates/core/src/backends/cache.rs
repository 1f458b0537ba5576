use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use super::{CaptionRequest, CaptionResponse, Captioner, Embedder};
use crate::error::{Error, Result};

fn caption_key(request: &CaptionRequest) -> String {
    format!("{}\t{}\t{}", request.clip_id, request.frame_index, request.prefix)
}

/// Caption cache keyed by (clip_id, frame_index, prefix), persisted as one
/// JSON object. Concurrent writers of one key store identical values.
pub struct CachedCaptioner<B> {
    inner: B,
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, String>>,
    misses: AtomicUsize,
}

impl<B: Captioner> CachedCaptioner<B> {
    pub fn in_memory(inner: B) -> Self {
        Self {
            inner,
            path: None,
            entries: Mutex::new(BTreeMap::new()),
            misses: AtomicUsize::new(0),
        }
    }

    /// Opens (or starts) the cache file at `path`.
    pub fn open(inner: B, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let entries = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            inner,
            path: Some(path),
            entries: Mutex::new(entries),
            misses: AtomicUsize::new(0),
        })
    }

    /// Number of requests forwarded to the wrapped backend.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn flush(&self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        write_json(path, &*self.entries.lock().expect("caption cache lock poisoned"))
    }
}

impl<B: Captioner> Captioner for CachedCaptioner<B> {
    fn caption(&self, request: &CaptionRequest) -> Result<CaptionResponse> {
        let key = caption_key(request);
        if let Some(caption) = self.entries.lock().expect("caption cache lock poisoned").get(&key) {
            return Ok(CaptionResponse {
                caption: caption.clone(),
            });
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.caption(request)?;
        self.entries
            .lock()
            .expect("caption cache lock poisoned")
            .insert(key, response.caption.clone());
        Ok(response)
    }
}

/// In-memory text → vector cache.
pub struct CachedEmbedder<B> {
    inner: B,
    entries: RwLock<HashMap<String, Vec<f64>>>,
    misses: AtomicUsize,
}

impl<B: Embedder> CachedEmbedder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            entries: RwLock::new(HashMap::new()),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }
}

impl<B: Embedder> Embedder for CachedEmbedder<B> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.entries.read().expect("embed cache lock poisoned").get(text) {
            return Ok(v.clone());
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let values = self.inner.embed(text)?;
        self.entries
            .write()
            .expect("embed cache lock poisoned")
            .insert(text.to_owned(), values.clone());
        Ok(values)
    }
}

pub(crate) fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut body = serde_json::to_string_pretty(value).expect("value serializes");
    body.push('\n');
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
