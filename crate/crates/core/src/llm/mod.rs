//! Chat-completion gateway.
//!
//! Three backends share the [`LlmClient`] trait: [`OpenAiClient`] for any
//! endpoint speaking the chat-completions wire format, [`ScriptedStub`] for
//! rule-driven replies in tests, and [`CassetteClient`] for record/replay.

mod cassette;
mod openai;
mod stub;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cassette::{CassetteClient, CassetteRecord};
pub use openai::OpenAiClient;
pub use stub::{ScriptRule, ScriptedStub, StubScript, TextMatch};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("model request timed out: {0}")]
    Timeout(String),
    #[error("rate limited (retry after {retry_after_secs:?}s)")]
    RateLimited { retry_after_secs: Option<f64> },
    #[error("malformed model response: {0}")]
    Protocol(String),
    #[error("model endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("no cassette entry for request digest {digest}")]
    CassetteMiss { digest: String },
    #[error("cassette i/o: {0}")]
    Cassette(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for ChatParams {
    fn default() -> Self {
        ChatParams { temperature: 0.0, max_tokens: None }
    }
}

/// The request body of `POST /chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(flatten)]
    pub params: ChatParams,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest { model: model.into(), messages, params: ChatParams::default() }
    }

    pub fn with_params(mut self, params: ChatParams) -> Self {
        self.params = params;
        self
    }

    /// All message contents joined, in order; what stub rules match against.
    pub fn transcript(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<C: LlmClient + ?Sized> LlmClient for std::sync::Arc<C> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(req)
    }
}

fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = serde_json::Map::new();
            for k in keys {
                out.insert(k.clone(), canonical(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

/// SHA-256 of the request's canonical JSON (object keys sorted).
pub fn request_digest(req: &ChatRequest) -> String {
    let v = serde_json::to_value(req).expect("chat requests serialize");
    let text = serde_json::to_string(&canonical(&v)).expect("json values serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_ignores_key_order() {
        let req = ChatRequest::new("m", vec![ChatMessage::user("hi")]);
        let a: Value = serde_json::from_str(r#"{"temperature":0.0,"messages":[{"content":"hi","role":"user"}],"model":"m"}"#).unwrap();
        let b: ChatRequest = serde_json::from_value(a).unwrap();
        assert_eq!(request_digest(&req), request_digest(&b));
        let c = ChatRequest::new("m", vec![ChatMessage::user("hi!")]);
        assert_ne!(request_digest(&req), request_digest(&c));
    }

    #[test]
    fn wire_shape() {
        let req = ChatRequest::new("gpt", vec![ChatMessage::system("s")]);
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["model"], "gpt");
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["messages"][0]["role"], "system");
        assert!(v.get("max_tokens").is_none());
    }
}
