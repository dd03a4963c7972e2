//! OpenAI-compatible chat completions over HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, CompletionRequest, RawCompletion};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    300
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into()
    }

    fn url(&self, path: &str) -> String {
        format!(
            "{}/{}",
            self.endpoint.trim_end_matches('/'),
            path.trim_start_matches('/')
        )
    }
}

/// POSTs `body` to `{endpoint}/{path}` and decodes the JSON reply. Non-2xx
/// replies become [`BackendError::Status`]; 400, 401, 403 and 404 are not
/// worth retrying and map to [`BackendError::Rejected`].
pub fn post_json(
    agent: &ureq::Agent,
    config: &HttpConfig,
    path: &str,
    body: &Value,
) -> Result<Value, BackendError> {
    let mut request = agent
        .post(&config.url(path))
        .header("Content-Type", "application/json");
    if let Some(key) = &config.api_key {
        request = request.header("Authorization", &format!("Bearer {key}"));
    }
    let mut response = request.send_json(body).map_err(map_ureq)?;
    let status = response.status().as_u16();
    let text = response.body_mut().read_to_string().map_err(map_ureq)?;
    if !(200..300).contains(&status) {
        return Err(match status {
            400 | 401 | 403 | 404 => BackendError::Rejected(format!("HTTP {status}: {text}")),
            _ => BackendError::Status { status, body: text },
        });
    }
    serde_json::from_str(&text).map_err(|e| BackendError::Decode(e.to_string()))
}

fn map_ureq(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        other => BackendError::Transport(other.to_string()),
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = config.agent();
        HttpBackend { config, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_output_tokens,
        });
        if let Some(top_k) = request.top_k {
            body["top_k"] = json!(top_k);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.config.model)
    }

    fn send(&self, request: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        let reply = post_json(
            &self.agent,
            &self.config,
            "chat/completions",
            &self.body(request),
        )?;
        let text = reply["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::Decode("missing choices[0].message.content".into()))?
            .to_string();
        let usage = |key: &str| reply["usage"][key].as_u64().map(|n| n as usize);
        Ok(RawCompletion {
            text,
            prompt_tokens: usage("prompt_tokens"),
            output_tokens: usage("completion_tokens"),
        })
    }
}
