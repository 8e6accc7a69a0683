//! Client for OpenAI-compatible `/v1/chat/completions` endpoints.

use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, ContentPart, TokenLogprob, VisionBackend};
use crate::error::{Error, Result};

/// Environment variable holding the endpoint base URL.
pub const ENDPOINT_ENV: &str = "LOGICQA_ENDPOINT";
/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "LOGICQA_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(16));
        self.initial_backoff
            .saturating_mul(factor)
            .min(self.max_backoff)
    }
}

/// Outcome of one attempt that did not succeed.
#[derive(Debug)]
pub enum AttemptError {
    /// Worth retrying (connection failure, timeout, 429, 5xx).
    Transient(String),
    Fatal(Error),
}

/// Runs `op` until it succeeds, fails fatally, or the retry budget is spent.
/// `sleep` is injected so tests do not wait.
pub fn retry_with_backoff<T>(
    policy: &RetryPolicy,
    mut sleep: impl FnMut(Duration),
    mut op: impl FnMut(u32) -> std::result::Result<T, AttemptError>,
) -> Result<T> {
    let mut attempt = 0;
    loop {
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(AttemptError::Fatal(e)) => return Err(e),
            Err(AttemptError::Transient(message)) => {
                if attempt >= policy.max_retries {
                    return Err(Error::Transport {
                        attempts: attempt + 1,
                        message,
                    });
                }
                log::warn!("transient backend failure (attempt {}): {message}", attempt + 1);
                sleep(policy.backoff(attempt));
                attempt += 1;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    /// Base URL such as `https://api.openai.com`; a URL already ending in
    /// `/chat/completions` is used as is.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub top_logprobs: u8,
}

impl OpenAiConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        OpenAiConfig {
            endpoint: endpoint.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            top_logprobs: 1,
        }
    }

    /// Reads the endpoint and key from the environment.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| Error::Config(format!("{ENDPOINT_ENV} is not set")))?;
        let mut cfg = OpenAiConfig::new(endpoint);
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }

    fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_p: Option<f64>,
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<u8>,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage {
    role: &'static str,
    content: Vec<WirePart>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum WirePart {
    Text { text: String },
    ImageUrl { image_url: WireImageUrl },
}

#[derive(Serialize)]
struct WireImageUrl {
    url: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
}

fn wire_body<'a>(request: &'a ChatRequest, top_logprobs: u8) -> WireRequest<'a> {
    let content = request
        .parts
        .iter()
        .map(|p| match p {
            ContentPart::Text(t) => WirePart::Text { text: t.clone() },
            ContentPart::Image(img) => WirePart::ImageUrl {
                image_url: WireImageUrl {
                    url: format!(
                        "data:{};base64,{}",
                        img.media_type(),
                        base64::engine::general_purpose::STANDARD.encode(img.bytes())
                    ),
                },
            },
        })
        .collect();
    WireRequest {
        model: &request.model,
        messages: vec![WireMessage {
            role: "user",
            content,
        }],
        temperature: request.temperature,
        top_p: request.top_p,
        logprobs: request.want_logprobs,
        top_logprobs: request.want_logprobs.then_some(top_logprobs),
        max_tokens: request.max_tokens,
    }
}

fn parse_body(body: &str, backend_id: &str) -> Result<ChatResponse> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| Error::MalformedResponse("response has no choices".into()))?;
    let content = choice
        .message
        .content
        .ok_or_else(|| Error::MalformedResponse("choice has no text content".into()))?;
    let tokens: Vec<TokenLogprob> = choice
        .logprobs
        .and_then(|l| l.content)
        .unwrap_or_default()
        .into_iter()
        .map(|t| TokenLogprob {
            text: t.token,
            logprob: t.logprob.min(0.0),
        })
        .collect();
    Ok(ChatResponse {
        content,
        tokens,
        backend_id: backend_id.to_string(),
        cached: false,
    })
}

/// Live backend speaking the OpenAI chat-completions wire format.
pub struct OpenAiBackend {
    config: OpenAiConfig,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(OpenAiBackend { config, client })
    }

    fn attempt(&self, body: &str) -> std::result::Result<ChatResponse, AttemptError> {
        let mut req = self
            .client
            .post(self.config.url())
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        if status.is_success() {
            return parse_body(&text, &self.id()).map_err(AttemptError::Fatal);
        }
        let code = status.as_u16();
        if code == 429 || status.is_server_error() {
            Err(AttemptError::Transient(format!("HTTP {code}: {}", truncate(&text))))
        } else {
            Err(AttemptError::Fatal(Error::BackendStatus {
                status: code,
                message: truncate(&text),
            }))
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(300).collect()
}

impl VisionBackend for OpenAiBackend {
    fn id(&self) -> String {
        format!("openai-compatible:{}", self.config.url())
    }

    fn query(&self, request: &ChatRequest) -> Result<ChatResponse> {
        request.validate()?;
        let body = serde_json::to_string(&wire_body(request, self.config.top_logprobs))?;
        retry_with_backoff(&self.config.retry, std::thread::sleep, |_| self.attempt(&body))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ImageData, RequestTag};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    fn request() -> ChatRequest {
        ChatRequest {
            model: "gpt-4o".into(),
            parts: vec![
                ContentPart::Text("Question : Is there one pin?".into()),
                ContentPart::Image(ImageData::from_bytes(b"\x89PNG".to_vec(), "image/png")),
            ],
            temperature: 1.0,
            top_p: None,
            want_logprobs: true,
            max_tokens: 32,
            tag: RequestTag {
                role: "test".into(),
                class: "pushpins".into(),
                image_id: "a".into(),
                subject: String::new(),
                attempt: 0,
            },
        }
    }

    const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"One pin.\n- Result: Yes"},
        "logprobs":{"content":[{"token":"One pin.\n- Result: ","logprob":-0.2},{"token":"Yes","logprob":-0.01}]}}]}"#;

    /// Serves the scripted (status, body) pairs in order, one per connection,
    /// and records the request bodies it saw.
    fn serve(script: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in script {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), seen)
    }

    fn backend(url: String) -> OpenAiBackend {
        let mut cfg = OpenAiConfig::new(url);
        cfg.api_key = Some("secret".into());
        cfg.retry = RetryPolicy {
            max_retries: 2,
            initial_backoff: Duration::from_millis(1),
            max_backoff: Duration::from_millis(2),
        };
        OpenAiBackend::new(cfg).unwrap()
    }

    #[test]
    fn wire_body_shape() {
        let body = serde_json::to_value(wire_body(&request(), 1)).unwrap();
        assert_eq!(body["model"], "gpt-4o");
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["top_logprobs"], 1);
        assert_eq!(body["max_tokens"], 32);
        assert!(body.get("top_p").is_none());
        let content = &body["messages"][0]["content"];
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(content[0]["type"], "text");
        assert_eq!(content[1]["type"], "image_url");
        assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,iVBORw==");
    }

    #[test]
    fn parses_content_and_logprobs() {
        let r = parse_body(OK_BODY, "b").unwrap();
        assert!(r.content.ends_with("- Result: Yes"));
        assert_eq!(r.tokens.len(), 2);
        assert_eq!(r.tokens[1].logprob, -0.01);
        let no_lp = parse_body(r#"{"choices":[{"message":{"content":"x"}}]}"#, "b").unwrap();
        assert!(no_lp.tokens.is_empty());
        assert!(parse_body(r#"{"choices":[]}"#, "b").is_err());
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, seen) = serve(vec![(503, "{}"), (200, OK_BODY)]);
        let r = backend(url).query(&request()).unwrap();
        assert!(r.content.ends_with("Yes"));
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[0].contains("\"logprobs\":true"));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen) = serve(vec![(400, r#"{"error":{"message":"bad"}}"#)]);
        let err = backend(url).query(&request()).unwrap_err();
        assert!(matches!(err, Error::BackendStatus { status: 400, .. }), "{err}");
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn exhausted_retries_are_a_transport_error() {
        let (url, _) = serve(vec![(500, "{}"), (502, "{}"), (503, "{}")]);
        let err = backend(url).query(&request()).unwrap_err();
        assert!(matches!(err, Error::Transport { attempts: 3, .. }), "{err}");
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 10,
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_millis(350),
        };
        assert_eq!(p.backoff(0), Duration::from_millis(100));
        assert_eq!(p.backoff(1), Duration::from_millis(200));
        assert_eq!(p.backoff(2), Duration::from_millis(350));
        let mut slept = Vec::new();
        let r: Result<()> = retry_with_backoff(&p, |d| slept.push(d), |a| {
            if a < 3 {
                Err(AttemptError::Transient("x".into()))
            } else {
                Err(AttemptError::Fatal(Error::LogprobMissing))
            }
        });
        assert!(matches!(r, Err(Error::LogprobMissing)));
        assert_eq!(slept.len(), 3);
    }

    #[test]
    fn url_forms() {
        assert_eq!(OpenAiConfig::new("http://h").url(), "http://h/v1/chat/completions");
        assert_eq!(OpenAiConfig::new("http://h/v1/").url(), "http://h/v1/chat/completions");
        assert_eq!(
            OpenAiConfig::new("http://h/api/chat/completions").url(),
            "http://h/api/chat/completions"
        );
    }
}
