use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, ChatRequest, ChatResponse, RequestTag, TokenLogprob, VisionBackend};
use crate::error::{Error, IoContext, Result};

/// One canned reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub content: String,
    #[serde(default)]
    pub tokens: Vec<TokenLogprob>,
}

/// Fixture key for a tagged request: `role|class|image|digest`, where digest
/// is the first 16 hex characters of the SHA-256 of the question text.
/// Re-queries append `|r<attempt>`.
pub fn fixture_key(tag: &RequestTag) -> String {
    let base = format!(
        "{}|{}|{}|{}",
        tag.role,
        tag.class,
        tag.image_id,
        &sha256_hex(tag.subject.as_bytes())[..16]
    );
    if tag.attempt > 0 {
        format!("{base}|r{}", tag.attempt)
    } else {
        base
    }
}

/// Deterministic backend answering from a fixture map.
///
/// Lookup tries the exact key, then (for re-queries) the first-attempt key,
/// then the same key with the image id replaced by `*`.
#[derive(Debug)]
pub struct MockBackend {
    name: String,
    fixtures: BTreeMap<String, FixtureEntry>,
    calls: AtomicU64,
    latency: Option<Duration>,
}

impl MockBackend {
    pub fn new(name: impl Into<String>, fixtures: BTreeMap<String, FixtureEntry>) -> Result<Self> {
        for (key, entry) in &fixtures {
            ChatResponse::check_tokens(&entry.content, &entry.tokens).map_err(|reason| {
                Error::FixtureInvalid {
                    key: key.clone(),
                    reason,
                }
            })?;
        }
        Ok(MockBackend {
            name: name.into(),
            fixtures,
            calls: AtomicU64::new(0),
            latency: None,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at_path(path)?;
        let fixtures = serde_json::from_str(&text)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "fixtures".into());
        Self::new(name, fixtures)
    }

    /// Sleeps this long on every call, to emulate a remote model.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }

    fn lookup(&self, tag: &RequestTag) -> Option<&FixtureEntry> {
        let exact = fixture_key(tag);
        if let Some(e) = self.fixtures.get(&exact) {
            return Some(e);
        }
        let first = RequestTag {
            attempt: 0,
            ..tag.clone()
        };
        if tag.attempt > 0 {
            if let Some(e) = self.fixtures.get(&fixture_key(&first)) {
                return Some(e);
            }
        }
        let wildcard = RequestTag {
            image_id: "*".into(),
            ..first
        };
        self.fixtures.get(&fixture_key(&wildcard))
    }
}

impl VisionBackend for MockBackend {
    fn id(&self) -> String {
        format!("mock:{}", self.name)
    }

    fn query(&self, request: &ChatRequest) -> Result<ChatResponse> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        let entry = self
            .lookup(&request.tag)
            .ok_or_else(|| Error::FixtureMissing(fixture_key(&request.tag)))?;
        Ok(ChatResponse {
            content: entry.content.clone(),
            tokens: if request.want_logprobs {
                entry.tokens.clone()
            } else {
                Vec::new()
            },
            backend_id: self.id(),
            cached: false,
        })
    }
}
