//! HTTP client for OpenAI-style completion endpoints.
//!
//! Requests are POSTed as JSON to `{base_url}/v1/completions`. The API key
//! comes from `PROMPTFORGE_API_KEY` and the base URL from configuration or
//! `PROMPTFORGE_BASE_URL`. Network errors and HTTP 429 are retried with
//! exponential backoff; malformed responses are not.

use std::thread;
use std::time::Duration;

use serde_json::json;

use super::{truncate_completion, LmBackend, LmError, LmRequest};

pub const API_KEY_ENV: &str = "PROMPTFORGE_API_KEY";
pub const BASE_URL_ENV: &str = "PROMPTFORGE_BASE_URL";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub model_id: String,
    pub api_key: Option<String>,
    /// Additional attempts after the first (total attempts = retries + 1).
    pub max_retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            max_retries: 3,
            backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(60),
        }
    }

    /// Base URL from `PROMPTFORGE_BASE_URL`.
    pub fn from_env(model_id: impl Into<String>) -> Result<Self, LmError> {
        let base_url = std::env::var(BASE_URL_ENV).map_err(|_| LmError::BadResponse {
            message: format!("{BASE_URL_ENV} is not set"),
        })?;
        Ok(HttpConfig::new(base_url, model_id))
    }
}

pub struct HttpLm {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpLm {
    pub fn new(config: HttpConfig) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .expect("http client builds");
        HttpLm { config, client }
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/v1/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn attempt(&self, request: &LmRequest) -> Result<String, LmError> {
        let body = json!({
            "model": request.model_id,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
            "stop": request.stop_sequences,
            "seed": request.seed,
        });
        let mut builder = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| LmError::Network {
            message: e.to_string(),
            attempts: 1,
        })?;
        let status = response.status();
        if status.as_u16() == 429 {
            return Err(LmError::RateLimited { attempts: 1 });
        }
        if !status.is_success() {
            return Err(LmError::BadResponse {
                message: format!("http status {status}"),
            });
        }
        let value: serde_json::Value = response.json().map_err(|e| LmError::BadResponse {
            message: format!("invalid json body: {e}"),
        })?;
        value["choices"][0]["text"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LmError::BadResponse {
                message: "response has no choices[0].text".to_string(),
            })
    }
}

impl LmBackend for HttpLm {
    fn complete(&self, request: &LmRequest) -> Result<String, LmError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Ok(text) => {
                    // Defensive client-side truncation in case the server
                    // ignored the stop sequences.
                    return Ok(truncate_completion(
                        &text,
                        &request.stop_sequences,
                        request.max_tokens,
                    ));
                }
                Err(LmError::Network { message, .. }) if attempts <= self.config.max_retries => {
                    let _ = message;
                }
                Err(LmError::RateLimited { .. }) if attempts <= self.config.max_retries => {}
                Err(LmError::Network { message, .. }) => {
                    return Err(LmError::Network { message, attempts })
                }
                Err(LmError::RateLimited { .. }) => return Err(LmError::RateLimited { attempts }),
                Err(other) => return Err(other),
            }
            thread::sleep(self.config.backoff * 2u32.pow(attempts - 1));
        }
    }

    fn model_id(&self) -> &str {
        &self.config.model_id
    }
}
