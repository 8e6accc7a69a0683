use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{sha256_hex, ChatRequest, ChatResponse, ContentPart, TokenLogprob, VisionBackend};
use crate::error::{Error, IoContext, Result};

/// SHA-256 of the canonicalized request, as 64 hex characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(String);

impl CacheKey {
    /// Canonical form: a JSON object with sorted keys where image parts are
    /// replaced by their content digest. The request tag is excluded except
    /// for the attempt counter, so a re-query is a distinct entry.
    pub fn of(request: &ChatRequest) -> CacheKey {
        let parts: Vec<Value> = request
            .parts
            .iter()
            .map(|p| match p {
                ContentPart::Text(t) => json!({ "text": t }),
                ContentPart::Image(img) => json!({ "image_sha256": img.digest() }),
            })
            .collect();
        let canonical = json!({
            "attempt": request.tag.attempt,
            "max_tokens": request.max_tokens,
            "model": request.model,
            "parts": parts,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "want_logprobs": request.want_logprobs,
        });
        // serde_json's default map is ordered, so this rendering is canonical.
        let text = serde_json::to_string(&canonical).expect("canonical request serializes");
        CacheKey(sha256_hex(text.as_bytes()))
    }

    pub fn as_hex(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    key: CacheKey,
    role: String,
    image_id: String,
    prompt: String,
    backend_id: String,
    content: String,
    tokens: Vec<TokenLogprob>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: u64,
    pub bytes: u64,
}

/// Append-only directory of response documents keyed by request digest.
/// Entries are never overwritten: the first response stored for a key wins.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).at_path(&dir)?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &CacheKey) -> PathBuf {
        let hex = key.as_hex();
        self.dir.join(&hex[..2]).join(format!("{hex}.json"))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<ChatResponse>> {
        let path = self.entry_path(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        let entry: CacheEntry = serde_json::from_str(&text)?;
        Ok(Some(ChatResponse {
            content: entry.content,
            tokens: entry.tokens,
            backend_id: entry.backend_id,
            cached: true,
        }))
    }

    /// Stores a response unless the key already exists, and returns whatever
    /// the cache holds for the key afterwards.
    pub fn put(
        &self,
        key: &CacheKey,
        request: &ChatRequest,
        response: &ChatResponse,
    ) -> Result<ChatResponse> {
        let path = self.entry_path(key);
        let parent = path.parent().expect("entry path has a parent");
        fs::create_dir_all(parent).at_path(parent)?;
        let entry = CacheEntry {
            key: key.clone(),
            role: request.tag.role.clone(),
            image_id: request.tag.image_id.clone(),
            prompt: request.text(),
            backend_id: response.backend_id.clone(),
            content: response.content.clone(),
            tokens: response.tokens.clone(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(parent).at_path(parent)?;
        serde_json::to_writer_pretty(&mut tmp, &entry)?;
        tmp.flush().at_path(tmp.path().to_path_buf())?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => {}
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => {}
            Err(e) => return Err(Error::io(&path, e.error)),
        }
        Ok(self.get(key)?.expect("entry exists after put"))
    }

    pub fn stats(&self) -> Result<CacheStats> {
        let mut stats = CacheStats { entries: 0, bytes: 0 };
        if !self.dir.is_dir() {
            return Ok(stats);
        }
        for shard in fs::read_dir(&self.dir).at_path(&self.dir)? {
            let shard = shard.at_path(&self.dir)?.path();
            if !shard.is_dir() {
                continue;
            }
            for f in fs::read_dir(&shard).at_path(&shard)? {
                let f = f.at_path(&shard)?;
                let path = f.path();
                if path.extension().and_then(|e| e.to_str()) == Some("json") {
                    stats.entries += 1;
                    stats.bytes += f.metadata().at_path(&path)?.len();
                }
            }
        }
        Ok(stats)
    }

    pub fn clear(&self) -> Result<()> {
        if self.dir.exists() {
            fs::remove_dir_all(&self.dir).at_path(&self.dir)?;
        }
        fs::create_dir_all(&self.dir).at_path(&self.dir)?;
        Ok(())
    }
}

/// Wraps a backend with a [`ResponseCache`]. Hits never reach the inner backend.
pub struct CachedBackend<B> {
    inner: B,
    cache: ResponseCache,
    upstream_calls: AtomicU64,
    hits: AtomicU64,
}

impl<B: VisionBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: ResponseCache) -> Self {
        CachedBackend {
            inner,
            cache,
            upstream_calls: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn upstream_calls(&self) -> u64 {
        self.upstream_calls.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }
}

impl<B: VisionBackend> VisionBackend for CachedBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn query(&self, request: &ChatRequest) -> Result<ChatResponse> {
        request.validate()?;
        let key = CacheKey::of(request);
        if let Some(hit) = self.cache.get(&key)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.upstream_calls.fetch_add(1, Ordering::Relaxed);
        let response = self.inner.query(request)?;
        let mut stored = self.cache.put(&key, request, &response)?;
        stored.cached = false;
        Ok(stored)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ImageData, RequestTag};

    fn request(text: &str, image: &[u8], temperature: f64) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            parts: vec![
                ContentPart::Text(text.into()),
                ContentPart::Image(ImageData::from_bytes(image.to_vec(), "image/png")),
            ],
            temperature,
            top_p: None,
            want_logprobs: true,
            max_tokens: 64,
            tag: RequestTag {
                role: "test".into(),
                class: "c".into(),
                image_id: "img".into(),
                subject: String::new(),
                attempt: 0,
            },
        }
    }

    struct Echo(AtomicU64);

    impl VisionBackend for Echo {
        fn id(&self) -> String {
            "echo".into()
        }
        fn query(&self, r: &ChatRequest) -> Result<ChatResponse> {
            let n = self.0.fetch_add(1, Ordering::Relaxed);
            Ok(ChatResponse {
                content: format!("{} #{n}", r.text()),
                tokens: vec![],
                backend_id: "echo".into(),
                cached: false,
            })
        }
    }

    #[test]
    fn key_uses_image_content_not_location() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("sub_b.png"));
        fs::write(&a, b"same bytes").unwrap();
        fs::write(&b, b"same bytes").unwrap();
        let mk = |p: &Path| {
            let mut r = request("q", b"", 1.0);
            r.parts[1] = ContentPart::Image(ImageData::load(p).unwrap());
            r
        };
        assert_eq!(CacheKey::of(&mk(&a)), CacheKey::of(&mk(&b)));
    }

    #[test]
    fn key_is_parameter_and_text_sensitive() {
        let base = request("Is there one pin?", b"x", 1.0);
        assert_ne!(CacheKey::of(&base), CacheKey::of(&request("Is there one pin?", b"x", 0.2)));
        assert_ne!(CacheKey::of(&base), CacheKey::of(&request("Is there one pin!", b"x", 1.0)));
        assert_ne!(CacheKey::of(&base), CacheKey::of(&request("Is there one pin?", b"y", 1.0)));
        let mut m = base.clone();
        m.model = "other".into();
        assert_ne!(CacheKey::of(&base), CacheKey::of(&m));
        let mut retry = base.clone();
        retry.tag.attempt = 1;
        assert_ne!(CacheKey::of(&base), CacheKey::of(&retry));
        // role, class and image id do not take part in addressing
        let mut retag = base.clone();
        retag.tag.image_id = "other".into();
        retag.tag.role = "describe".into();
        assert_eq!(CacheKey::of(&base), CacheKey::of(&retag));
    }

    #[test]
    fn second_identical_query_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let backend = CachedBackend::new(Echo(AtomicU64::new(0)), ResponseCache::open(dir.path()).unwrap());
        let r = request("hello", b"x", 1.0);
        let first = backend.query(&r).unwrap();
        assert!(!first.cached);
        let second = backend.query(&r).unwrap();
        assert!(second.cached);
        assert_eq!(first.content, second.content);
        assert_eq!(backend.upstream_calls(), 1);
        assert_eq!(backend.hits(), 1);
        assert_eq!(backend.cache.stats().unwrap().entries, 1);
    }

    #[test]
    fn first_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let r = request("hello", b"x", 1.0);
        let key = CacheKey::of(&r);
        let resp = |c: &str| ChatResponse {
            content: c.into(),
            tokens: vec![],
            backend_id: "b".into(),
            cached: false,
        };
        assert_eq!(cache.put(&key, &r, &resp("one")).unwrap().content, "one");
        assert_eq!(cache.put(&key, &r, &resp("two")).unwrap().content, "one");
        cache.clear().unwrap();
        assert_eq!(cache.stats().unwrap().entries, 0);
        assert!(cache.get(&key).unwrap().is_none());
    }

    #[test]
    fn concurrent_writers_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let r = request("hello", b"x", 1.0);
        let key = CacheKey::of(&r);
        let results: Vec<String> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8)
                .map(|i| {
                    let (cache, r, key) = (&cache, &r, &key);
                    s.spawn(move || {
                        let resp = ChatResponse {
                            content: format!("writer {i}"),
                            tokens: vec![],
                            backend_id: "b".into(),
                            cached: false,
                        };
                        cache.put(key, r, &resp).unwrap().content
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(results.windows(2).all(|w| w[0] == w[1]));
    }
}
