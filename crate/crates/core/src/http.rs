//! Blocking JSON-over-HTTP with retries, shared by the embedding and chat clients.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            backoff_ms: 250,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("transport error calling {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("{endpoint} returned HTTP {status}: {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("unexpected response from {endpoint}: {message}")]
    Decode { endpoint: String, message: String },
}

pub(crate) struct JsonClient {
    client: reqwest::blocking::Client,
    policy: RetryPolicy,
    api_key: Option<String>,
}

impl JsonClient {
    pub(crate) fn new(policy: RetryPolicy, api_key: Option<String>) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(policy.timeout_ms))
            .build()
            .expect("http client builds with static configuration");
        JsonClient {
            client,
            policy,
            api_key,
        }
    }

    /// POSTs `body` verbatim (already-serialized JSON). Transport errors, 429 and
    /// 5xx responses are retried with linear backoff; other non-2xx statuses
    /// fail immediately with the response body attached.
    pub(crate) fn post(&self, url: &str, body: String) -> Result<serde_json::Value, HttpError> {
        let mut attempt = 0;
        loop {
            let mut req = self
                .client
                .post(url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.clone());
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let err = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        return serde_json::from_str(&text).map_err(|e| HttpError::Decode {
                            endpoint: url.to_string(),
                            message: e.to_string(),
                        });
                    }
                    let err = HttpError::Status {
                        endpoint: url.to_string(),
                        status: status.as_u16(),
                        body: text,
                    };
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(err);
                    }
                    err
                }
                Err(e) => HttpError::Transport {
                    endpoint: url.to_string(),
                    message: e.to_string(),
                },
            };
            if attempt >= self.policy.max_retries {
                return Err(err);
            }
            attempt += 1;
            log::warn!("{err}; retry {attempt}/{}", self.policy.max_retries);
            std::thread::sleep(Duration::from_millis(
                self.policy.backoff_ms * u64::from(attempt),
            ));
        }
    }
}

/// Joins a base URL and a path, tolerating a trailing slash on the base.
pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}
