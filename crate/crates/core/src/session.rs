use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{ChatRequest, ChatResponse, ContentPart, ImageData, RequestTag, VisionBackend};
use crate::error::Result;
use crate::exec::Executor;
use crate::prompts::{PromptRole, Templates};

/// Sampling parameters sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySettings {
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_true")]
    pub want_logprobs: bool,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_true() -> bool {
    true
}

impl QuerySettings {
    /// Hosted GPT-4o-class defaults: temperature 1.0, provider defaults otherwise.
    pub fn hosted(model: impl Into<String>) -> Self {
        QuerySettings {
            model: model.into(),
            temperature: 1.0,
            top_p: None,
            max_tokens: default_max_tokens(),
            want_logprobs: true,
        }
    }

    /// Locally served InternVL-class defaults: temperature 0.2, top_p 0.7,
    /// 512 new tokens.
    pub fn local(model: impl Into<String>) -> Self {
        QuerySettings {
            model: model.into(),
            temperature: 0.2,
            top_p: Some(0.7),
            max_tokens: 512,
            want_logprobs: true,
        }
    }
}

/// Class identity used in request tags: the class name, plus `:<subclass>`.
pub fn class_key(class_name: &str, subclass: Option<&str>) -> String {
    match subclass {
        Some(s) => format!("{class_name}:{s}"),
        None => class_name.to_string(),
    }
}

/// Everything a pipeline stage needs to talk to the backend.
#[derive(Clone)]
pub struct Session {
    pub backend: Arc<dyn VisionBackend>,
    pub settings: QuerySettings,
    pub templates: Templates,
    pub executor: Executor,
}

impl Session {
    pub fn new(backend: Arc<dyn VisionBackend>, settings: QuerySettings, executor: Executor) -> Self {
        Session {
            backend,
            settings,
            templates: Templates::builtin(),
            executor,
        }
    }

    pub fn with_templates(mut self, templates: Templates) -> Self {
        self.templates = templates;
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    /// Sends one prompt, optionally followed by an image.
    pub fn ask(
        &self,
        role: PromptRole,
        class: &str,
        image: Option<(&str, &ImageData)>,
        subject: &str,
        attempt: u32,
        prompt: String,
    ) -> Result<ChatResponse> {
        let mut parts = vec![ContentPart::Text(prompt)];
        if let Some((_, data)) = image {
            parts.push(ContentPart::Image(data.clone()));
        }
        let request = ChatRequest {
            model: self.settings.model.clone(),
            parts,
            temperature: self.settings.temperature,
            top_p: self.settings.top_p,
            want_logprobs: self.settings.want_logprobs,
            max_tokens: self.settings.max_tokens,
            tag: RequestTag {
                role: role.tag().to_string(),
                class: class.to_string(),
                image_id: image.map(|(id, _)| id.to_string()).unwrap_or_else(|| "-".into()),
                subject: subject.to_string(),
                attempt,
            },
        };
        self.backend.query(&request)
    }
}
