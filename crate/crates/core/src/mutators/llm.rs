//! Chat-completions mutator.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::diff::{apply_diff, parse_diff, parse_full_answer};
use super::{EditMode, MutationOutcome, MutationRequest, Mutator, MutatorError};
use crate::transport::{HttpTransport, JsonTransport, with_retries};

pub const URL_ENV: &str = "HELIX_LLM_URL";
pub const KEY_ENV: &str = "HELIX_LLM_KEY";
pub const REDACTED: &str = "<redacted>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    /// Falls back to `HELIX_LLM_URL`.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Falls back to `HELIX_LLM_KEY`.
    #[serde(default)]
    pub api_key: Option<String>,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Overrides the task's preferred edit mode.
    #[serde(default)]
    pub mode: Option<EditMode>,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_top_p() -> f64 {
    0.95
}
fn default_max_tokens() -> u32 {
    4096
}
fn default_retries() -> u32 {
    2
}
fn default_timeout() -> u64 {
    600
}

impl LlmConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            endpoint: None,
            api_key: None,
            model: model.into(),
            temperature: default_temperature(),
            top_p: default_top_p(),
            max_tokens: default_max_tokens(),
            retries: default_retries(),
            timeout_secs: default_timeout(),
            mode: None,
        }
    }

    pub fn redacted(&self) -> Self {
        Self {
            endpoint: self.endpoint.as_ref().map(|_| REDACTED.to_string()),
            api_key: self.api_key.as_ref().map(|_| REDACTED.to_string()),
            ..self.clone()
        }
    }
}

pub struct LlmMutator {
    config: LlmConfig,
    endpoint: String,
    api_key: Option<String>,
    transport: Arc<dyn JsonTransport>,
    base_delay: Duration,
}

impl LlmMutator {
    pub fn new(config: LlmConfig) -> Result<Self, MutatorError> {
        let transport = Arc::new(HttpTransport::new(Duration::from_secs(config.timeout_secs)));
        Self::with_transport(config, transport)
    }

    pub fn with_transport(config: LlmConfig, transport: Arc<dyn JsonTransport>) -> Result<Self, MutatorError> {
        let endpoint = config
            .endpoint
            .clone()
            .or_else(|| std::env::var(URL_ENV).ok())
            .filter(|e| !e.is_empty())
            .ok_or_else(|| MutatorError::Misconfigured(format!("no chat endpoint configured (set {URL_ENV})")))?;
        let api_key = config.api_key.clone().or_else(|| std::env::var(KEY_ENV).ok()).filter(|k| !k.is_empty());
        Ok(Self { config, endpoint, api_key, transport, base_delay: Duration::from_secs(1) })
    }

    pub fn with_base_delay(mut self, delay: Duration) -> Self {
        self.base_delay = delay;
        self
    }

    fn complete(&self, prompt: &str) -> Result<String, MutatorError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "max_tokens": self.config.max_tokens,
        });
        let resp = with_retries(self.config.retries, self.base_delay, || {
            self.transport.post_json(&self.endpoint, self.api_key.as_deref(), &body)
        })
        .map_err(MutatorError::EndpointUnavailable)?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(String::from)
            .ok_or_else(|| MutatorError::EndpointUnavailable("response has no choices[0].message.content".into()))
    }
}

/// Turns a raw model response into an outcome; parse failures are data.
pub fn interpret_response(raw: String, parent: &str, mode: EditMode, fence_language: &str) -> MutationOutcome {
    match mode {
        EditMode::Diff => match parse_diff(&raw) {
            Err(e) => {
                let reason = e.to_string();
                MutationOutcome::failure(raw, reason)
            }
            Ok(blocks) if blocks.is_empty() => MutationOutcome::failure(raw, "no diff blocks"),
            Ok(blocks) => match apply_diff(parent, &blocks) {
                Ok(content) => MutationOutcome::success(content, raw),
                Err(e) => {
                    let reason = e.to_string();
                    MutationOutcome::failure(raw, reason)
                }
            },
        },
        EditMode::Full => match parse_full_answer(&raw, fence_language) {
            Some(content) => MutationOutcome::success(content, raw),
            None => MutationOutcome::failure(raw, "no fenced answer"),
        },
    }
}

impl Mutator for LlmMutator {
    fn tag(&self) -> &str {
        "llm"
    }

    fn mutate(&self, request: &MutationRequest<'_>) -> Result<MutationOutcome, MutatorError> {
        let raw = self.complete(&request.prompt.text)?;
        Ok(interpret_response(raw, request.parent_content, request.mode, request.fence_language))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SolutionId;
    use crate::prompting::PromptBundle;
    use serde_json::Value;
    use std::sync::Mutex;

    struct Canned {
        reply: Result<String, String>,
        seen: Mutex<Vec<(Option<String>, Value)>>,
    }

    impl JsonTransport for Canned {
        fn post_json(&self, _url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, String> {
            self.seen.lock().unwrap().push((bearer.map(String::from), body.clone()));
            self.reply.clone().map(|c| json!({ "choices": [{ "message": { "role": "assistant", "content": c } }] }))
        }
    }

    fn mutator(reply: Result<&str, &str>) -> (LlmMutator, Arc<Canned>) {
        let canned = Arc::new(Canned { reply: reply.map(String::from).map_err(String::from), seen: Mutex::new(Vec::new()) });
        let cfg = LlmConfig { endpoint: Some("http://fake".into()), api_key: Some("k".into()), ..LlmConfig::new("m") };
        let m = LlmMutator::with_transport(cfg, canned.clone()).unwrap().with_base_delay(Duration::ZERO);
        (m, canned)
    }

    fn run(m: &LlmMutator, parent: &str, mode: EditMode) -> Result<MutationOutcome, MutatorError> {
        let bundle = PromptBundle { text: "prompt".into(), included_ids: vec![SolutionId(0)], char_count: 6 };
        m.mutate(&MutationRequest { prompt: &bundle, parent_content: parent, seed: 0, fence_language: "json", mode })
    }

    #[test]
    fn applies_valid_diff() {
        let (m, seen) = mutator(Ok("<think>hm</think>\n<<<<<<< SEARCH\n[1, 2]\n=======\n[1, 3]\n>>>>>>> REPLACE"));
        let out = run(&m, "[1, 2]", EditMode::Diff).unwrap();
        assert!(out.parse_ok);
        assert_eq!(out.content.as_deref(), Some("[1, 3]"));
        let (bearer, body) = seen.seen.lock().unwrap()[0].clone();
        assert_eq!(bearer.as_deref(), Some("k"));
        assert_eq!(body["temperature"], 1.0);
        assert_eq!(body["top_p"], 0.95);
        assert_eq!(body["messages"][0]["content"], "prompt");
    }

    #[test]
    fn prose_only_reply() {
        let (m, _) = mutator(Ok("I think it is fine."));
        let out = run(&m, "[1]", EditMode::Diff).unwrap();
        assert!(!out.parse_ok && out.content.is_none());
        assert_eq!(out.failure_reason.as_deref(), Some("no diff blocks"));
    }

    #[test]
    fn missed_search() {
        let (m, _) = mutator(Ok("<<<<<<< SEARCH\nzzz\n=======\ny\n>>>>>>> REPLACE"));
        let out = run(&m, "[1]", EditMode::Diff).unwrap();
        assert!(out.failure_reason.unwrap().contains("SearchNotFound"));
    }

    #[test]
    fn full_answer_mode() {
        let (m, _) = mutator(Ok("```json\n[4]\n```"));
        assert_eq!(run(&m, "[1]", EditMode::Full).unwrap().content.as_deref(), Some("[4]"));
        let (m, _) = mutator(Ok("nothing"));
        assert_eq!(run(&m, "[1]", EditMode::Full).unwrap().failure_reason.as_deref(), Some("no fenced answer"));
    }

    #[test]
    fn transport_failure_is_fatal() {
        let (m, seen) = mutator(Err("connection refused"));
        let err = run(&m, "[1]", EditMode::Diff).unwrap_err();
        assert!(matches!(err, MutatorError::EndpointUnavailable(_)) && err.is_fatal());
        assert_eq!(seen.seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn redaction() {
        let cfg = LlmConfig { endpoint: Some("http://secret".into()), api_key: Some("sk".into()), ..LlmConfig::new("m") };
        let r = cfg.redacted();
        assert_eq!(r.api_key.as_deref(), Some(REDACTED));
        assert_eq!(r.endpoint.as_deref(), Some(REDACTED));
        assert_eq!(r.model, "m");
    }
}
