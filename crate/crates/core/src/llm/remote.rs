use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatHistory, LlmBackend, LlmError, ModerationVerdict, Role};

/// OpenAI-compatible chat-completion and moderation endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
    pub timeout_s: f64,
    pub temperature: f64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            auth_env: "OPENAI_API_KEY".into(),
            timeout_s: 20.0,
            temperature: 0.7,
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("config", &self.config).finish_non_exhaustive()
    }
}

impl RemoteBackend {
    /// The token is read once from `auth_env`; a missing token is allowed
    /// because local gateways often need none.
    pub fn new(config: RemoteConfig) -> Result<Self, LlmError> {
        if !(config.timeout_s.is_finite() && config.timeout_s > 0.0) {
            return Err(LlmError::Protocol(format!("timeout must be positive, got {}", config.timeout_s)));
        }
        let token = if config.auth_env.is_empty() { None } else { std::env::var(&config.auth_env).ok() };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { config, token, client })
    }

    /// Fails unless the credential variable is set.
    pub fn require_credential(&self) -> Result<(), LlmError> {
        match self.token {
            Some(_) => Ok(()),
            None => Err(LlmError::MissingCredential(self.config.auth_env.clone())),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let mut req = self.client.post(self.url(path)).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| self.map_err(e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| self.map_err(e))?;
        if !status.is_success() {
            return Err(LlmError::Http { status: status.as_u16(), body: text.chars().take(200).collect() });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::Protocol(e.to_string()))
    }

    fn map_err(&self, e: reqwest::Error) -> LlmError {
        if e.is_timeout() {
            LlmError::Timeout(self.config.timeout_s)
        } else {
            LlmError::Transport(e.to_string())
        }
    }
}

fn wire_role(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::Human => "user",
        Role::Ai => "assistant",
    }
}

impl LlmBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete_raw(&self, history: &ChatHistory, prompt: &str) -> Result<String, LlmError> {
        let mut messages: Vec<Value> = history
            .messages()
            .iter()
            .map(|m| json!({"role": wire_role(m.role), "content": m.text}))
            .collect();
        messages.push(json!({"role": "user", "content": prompt}));
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        let v = self.post("chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| LlmError::Protocol("no choices[0].message.content in response".into()))
    }

    fn moderate_raw(&self, text: &str) -> Result<ModerationVerdict, LlmError> {
        let v = self.post("moderations", &json!({"input": text}))?;
        let result = v
            .pointer("/results/0")
            .ok_or_else(|| LlmError::Protocol("no results[0] in moderation response".into()))?;
        let flagged = result
            .get("flagged")
            .and_then(Value::as_bool)
            .ok_or_else(|| LlmError::Protocol("moderation result lacks `flagged`".into()))?;
        let mut categories: Vec<String> = result
            .get("categories")
            .and_then(Value::as_object)
            .map(|m| m.iter().filter(|(_, v)| v.as_bool() == Some(true)).map(|(k, _)| k.clone()).collect())
            .unwrap_or_default();
        if flagged && categories.is_empty() {
            categories.push("unspecified".into());
        }
        if !flagged {
            categories.clear();
        }
        Ok(ModerationVerdict::from_categories(categories))
    }
}
