//! Query interface to a vision-language chat backend.
//!
//! A [`ChatRequest`] is an ordered list of text and image parts plus sampling
//! parameters. Backends answer with a [`ChatResponse`] carrying the reply text
//! and, where available, per-token log-probabilities.

mod cache;
mod mock;
mod openai;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub use cache::{CacheKey, CacheStats, CachedBackend, ResponseCache};
pub use mock::{fixture_key, FixtureEntry, MockBackend};
pub use openai::{
    retry_with_backoff, AttemptError, OpenAiBackend, OpenAiConfig, RetryPolicy, API_KEY_ENV,
    ENDPOINT_ENV,
};

/// Image bytes with their content digest. Cloning is cheap.
#[derive(Clone)]
pub struct ImageData {
    digest: String,
    media_type: &'static str,
    bytes: Arc<[u8]>,
}

impl std::fmt::Debug for ImageData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageData")
            .field("digest", &self.digest)
            .field("media_type", &self.media_type)
            .field("len", &self.bytes.len())
            .finish()
    }
}

impl ImageData {
    pub fn from_bytes(bytes: impl Into<Arc<[u8]>>, media_type: &'static str) -> Self {
        let bytes = bytes.into();
        ImageData {
            digest: sha256_hex(&bytes),
            media_type,
            bytes,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at_path(path)?;
        Ok(Self::from_bytes(bytes, media_type_for(path)))
    }

    /// Hex SHA-256 of the image bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn media_type(&self) -> &'static str {
        self.media_type
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

fn media_type_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        Some("tif") | Some("tiff") => "image/tiff",
        Some("webp") => "image/webp",
        _ => "image/png",
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub enum ContentPart {
    Text(String),
    Image(ImageData),
}

/// What a request is for. Used by the mock backend to look up fixtures; it
/// never reaches the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestTag {
    /// Prompt role, e.g. `describe` or `test`.
    pub role: String,
    /// Class name, suffixed with `:<subclass>` when one applies.
    pub class: String,
    /// Image id, or `-` for text-only prompts.
    pub image_id: String,
    /// Question text for question-bearing prompts, otherwise empty.
    pub subject: String,
    /// Re-query counter; 0 for the first attempt.
    pub attempt: u32,
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub model: String,
    pub parts: Vec<ContentPart>,
    pub temperature: f64,
    pub top_p: Option<f64>,
    pub want_logprobs: bool,
    pub max_tokens: u32,
    pub tag: RequestTag,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        if !self.parts.iter().any(|p| matches!(p, ContentPart::Text(_))) {
            return Err(Error::InvalidRequest("request has no text part".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidRequest("max_tokens must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::InvalidRequest(format!(
                "temperature {} is not a non-negative number",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Concatenated text parts, for diagnostics and fixture lookup.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub text: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    #[serde(default)]
    pub tokens: Vec<TokenLogprob>,
    pub backend_id: String,
    #[serde(default)]
    pub cached: bool,
}

impl ChatResponse {
    /// Every log-probability must be finite and at most zero, and when tokens
    /// are present their concatenation must spell the content (ignoring
    /// whitespace differences).
    pub fn check_tokens(content: &str, tokens: &[TokenLogprob]) -> std::result::Result<(), String> {
        for t in tokens {
            if !t.logprob.is_finite() && t.logprob != f64::NEG_INFINITY {
                return Err(format!("token `{}` has non-numeric logprob", t.text));
            }
            if t.logprob > 0.0 {
                return Err(format!(
                    "token `{}` has positive logprob {}",
                    t.text, t.logprob
                ));
            }
        }
        if !tokens.is_empty() {
            let joined: String = tokens.iter().map(|t| t.text.as_str()).collect();
            if normalize_ws(&joined) != normalize_ws(content) {
                return Err("token texts do not concatenate to the content".into());
            }
        }
        Ok(())
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A vision-language chat backend. Implementations must be safe to call from
/// many threads at once.
pub trait VisionBackend: Send + Sync {
    /// Stable identifier recorded in question-set provenance.
    fn id(&self) -> String;

    fn query(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

impl<B: VisionBackend + ?Sized> VisionBackend for Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn query(&self, request: &ChatRequest) -> Result<ChatResponse> {
        (**self).query(request)
    }
}
