//! Chat-completion clients, retry with exponential backoff, and the
//! on-disk response cache.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::text::sha256_hex;
use crate::{Error, Result};

pub const API_KEY_ENV: &str = "SAFE_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
}

/// One attempt against a chat endpoint. `Err` carries a transport-level
/// message; the caller decides whether to retry.
pub trait LlmClient: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1 << attempt.min(16))
            .min(self.max_delay)
    }
}

pub fn send_with_retry(
    client: &dyn LlmClient,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<String> {
    let attempts = policy.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        match client.send(request) {
            Ok(text) => return Ok(text),
            Err(message) => {
                log::warn!("{} attempt {} failed: {message}", client.id(), attempt + 1);
                last = message;
                if attempt + 1 < attempts {
                    std::thread::sleep(policy.delay(attempt));
                }
            }
        }
    }
    Err(Error::LlmUnreachable {
        attempts,
        message: last,
    })
}

/// OpenAI-style `/chat/completions` endpoint; the bearer token comes from
/// `SAFE_LLM_API_KEY` when set.
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpChatClient {
    pub fn from_env(endpoint: &str, model: &str) -> Self {
        HttpChatClient {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_secs(60),
        }
    }
}

impl LlmClient for HttpChatClient {
    fn id(&self) -> &str {
        &self.model
    }

    fn send(&self, request: &ChatRequest) -> std::result::Result<String, String> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("response without choices[0].message.content: {value}"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordedLine {
    prompt: String,
    response: String,
}

/// Replays responses keyed by the exact user prompt; unknown prompts fail
/// like an unreachable endpoint.
#[derive(Debug, Clone, Default)]
pub struct RecordedLlmClient {
    id: String,
    responses: BTreeMap<String, String>,
}

impl RecordedLlmClient {
    pub fn new(id: &str) -> Self {
        RecordedLlmClient {
            id: id.to_string(),
            responses: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, prompt: impl Into<String>, response: impl Into<String>) {
        self.responses.insert(prompt.into(), response.into());
    }

    pub fn load(id: &str, path: &Path) -> Result<Self> {
        let mut client = RecordedLlmClient::new(id);
        for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: RecordedLine = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            client.insert(r.prompt, r.response);
        }
        Ok(client)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (prompt, response) in &self.responses {
            out.push_str(&serde_json::to_string(&RecordedLine {
                prompt: prompt.clone(),
                response: response.clone(),
            })?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

impl LlmClient for RecordedLlmClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> std::result::Result<String, String> {
        self.responses
            .get(&request.user)
            .cloned()
            .ok_or_else(|| "no recorded response for prompt".to_string())
    }
}

/// Responses stored as `<dir>/<sha256(llm_id|template|caption)>.json`.
/// Reads are lock-free; writes are serialized and atomic.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

#[derive(Serialize, Deserialize)]
struct CachedResponse {
    llm_id: String,
    response: String,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache {
            dir: dir.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn key(llm_id: &str, template_hash: &str, caption: &str) -> String {
        sha256_hex(format!("{llm_id}|{template_hash}|{}", sha256_hex(caption)))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let text = std::fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str::<CachedResponse>(&text)
            .ok()
            .map(|c| c.response)
    }

    pub fn put(&self, key: &str, llm_id: &str, response: &str) -> Result<()> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        std::fs::create_dir_all(&self.dir)?;
        let tmp = self.dir.join(format!(".{key}.tmp"));
        std::fs::write(
            &tmp,
            serde_json::to_string(&CachedResponse {
                llm_id: llm_id.to_string(),
                response: response.to_string(),
            })?,
        )?;
        std::fs::rename(tmp, self.path(key))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
    }

    impl LlmClient for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn send(&self, _: &ChatRequest) -> std::result::Result<String, String> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err("connection reset".into())
            } else {
                Ok("ok".into())
            }
        }
    }

    fn req() -> ChatRequest {
        ChatRequest {
            system: "s".into(),
            user: "u".into(),
            temperature: 0.0,
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let c = Flaky {
            failures: 2,
            calls: AtomicU32::new(0),
        };
        assert_eq!(
            send_with_retry(&c, &req(), &RetryPolicy::immediate(3)).unwrap(),
            "ok"
        );
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_are_unreachable() {
        let c = Flaky {
            failures: 10,
            calls: AtomicU32::new(0),
        };
        let err = send_with_retry(&c, &req(), &RetryPolicy::immediate(3)).unwrap_err();
        assert_eq!(err.code(), "llm_unreachable");
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy::default();
        assert!(p.delay(1) > p.delay(0));
        assert_eq!(p.delay(30), p.max_delay);
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let key = ResponseCache::key("m", "t", "caption");
        assert_ne!(key, ResponseCache::key("m", "t", "caption2"));
        assert!(cache.get(&key).is_none());
        cache.put(&key, "m", "{\"x\": 1}").unwrap();
        assert_eq!(cache.get(&key).unwrap(), "{\"x\": 1}");
    }
}
