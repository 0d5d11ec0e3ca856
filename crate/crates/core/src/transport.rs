//! Minimal JSON-over-HTTP transport shared by the embedding and chat clients.
//! Tests swap in an in-process fake.

use std::time::Duration;

use serde_json::Value;

pub trait JsonTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, String>;
}

/// Blocking transport backed by `ureq`.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Self { agent: config.into() }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(600))
    }
}

impl JsonTransport for HttpTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, String> {
        let mut req = self.agent.post(url);
        if let Some(key) = bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        resp.body_mut().read_json::<Value>().map_err(|e| e.to_string())
    }
}

/// Calls `op` up to `1 + retries` times, sleeping `base_delay * 2^attempt`
/// between failures.
pub fn with_retries<T>(
    retries: u32,
    base_delay: Duration,
    mut op: impl FnMut() -> Result<T, String>,
) -> Result<T, String> {
    let mut attempt = 0;
    loop {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if attempt >= retries => return Err(e),
            Err(e) => {
                log::warn!("request failed (attempt {}): {e}", attempt + 1);
                std::thread::sleep(base_delay * 2u32.pow(attempt));
                attempt += 1;
            }
        }
    }
}
