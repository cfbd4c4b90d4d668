use std::time::Duration;

use serde::Deserialize;

use super::{ChatRequest, ChatResponse, LlmClient, LlmError, Usage};
use crate::model::LlmConfig;

const MAX_RETRIES: u32 = 3;
const BASE_BACKOFF: Duration = Duration::from_millis(500);

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
///
/// Rate-limit responses are retried up to three times with exponential
/// backoff, honouring `Retry-After` when the server sends it.
pub struct OpenAiClient {
    endpoint: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl OpenAiClient {
    pub fn new(cfg: &LlmConfig) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Unavailable(e.to_string()))?;
        Ok(OpenAiClient { endpoint: cfg.endpoint.trim_end_matches('/').to_string(), api_key: cfg.api_key.clone(), http })
    }

    fn once(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut builder = self.http.post(format!("{}/chat/completions", self.endpoint)).json(req);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout(e.to_string())
            } else {
                LlmError::Unavailable(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 {
            let retry_after_secs = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok());
            return Err(LlmError::RateLimited { retry_after_secs });
        }
        if status.is_server_error() {
            return Err(LlmError::Unavailable(format!("status {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(LlmError::Protocol(format!("status {status}: {body}")));
        }
        let wire: WireResponse = resp.json().map_err(|e| LlmError::Protocol(e.to_string()))?;
        let text = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Protocol("response has no choices".into()))?;
        Ok(ChatResponse { text, usage: wire.usage.unwrap_or_default() })
    }
}

impl LlmClient for OpenAiClient {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut attempt = 0;
        loop {
            match self.once(req) {
                Err(LlmError::RateLimited { retry_after_secs }) if attempt < MAX_RETRIES => {
                    let wait = retry_after_secs
                        .map(Duration::from_secs_f64)
                        .unwrap_or(BASE_BACKOFF * 2u32.pow(attempt));
                    log::warn!("rate limited; retrying in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}
