//! OpenAI-compatible chat completion backend.

use std::time::Duration;

use serde_json::{json, Value};
use tap_core::generation::backend::now_millis;
use tap_core::generation::{BackendError, ChatMessage, LlmBackend, Reply};

pub const URL_ENV: &str = "TAP_LLM_URL";
pub const KEY_ENV: &str = "TAP_LLM_API_KEY";

pub struct HttpBackend {
    id: String,
    base_url: Option<String>,
    api_key: Option<String>,
    temperature: f64,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Endpoint and key come from `TAP_LLM_URL` and `TAP_LLM_API_KEY`.
    pub fn from_env(id: &str, temperature: f64) -> Self {
        let agent = ureq::AgentBuilder::new().timeout_connect(Duration::from_secs(10)).timeout(Duration::from_secs(300)).build();
        Self {
            id: id.to_string(),
            base_url: std::env::var(URL_ENV).ok().filter(|s| !s.is_empty()),
            api_key: std::env::var(KEY_ENV).ok().filter(|s| !s.is_empty()),
            temperature,
            agent,
        }
    }

    fn unreachable(&self, message: impl Into<String>) -> BackendError {
        BackendError::Unreachable { backend: self.id.clone(), message: message.into() }
    }
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, messages: &[ChatMessage]) -> Result<Reply, BackendError> {
        let Some(base) = &self.base_url else {
            return Err(self.unreachable(format!("{URL_ENV} is not set")));
        };
        let url = format!("{}/chat/completions", base.trim_end_matches('/'));
        let body = json!({ "model": self.id, "messages": messages, "temperature": self.temperature });
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let text = r.into_string().unwrap_or_default();
                return Err(BackendError::Response { backend: self.id.clone(), message: format!("HTTP {code}: {text}") });
            }
            Err(e) => return Err(self.unreachable(e.to_string())),
        };
        let doc: Value = resp
            .into_json()
            .map_err(|e| BackendError::Response { backend: self.id.clone(), message: e.to_string() })?;
        let text = doc["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::Response { backend: self.id.clone(), message: "no message content".into() })?;
        Ok(Reply { text: text.to_string(), timestamp: now_millis() })
    }
}
