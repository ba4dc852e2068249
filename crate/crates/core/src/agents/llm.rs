use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::planner::{CallUsage, Planner, PlannerQuery, PlannerResponse, Purpose};
use super::AgentError;

/// The only place the planner credential is read from.
pub const API_KEY_ENV: &str = "AUTODUCT_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    pub max_attempts: u32,
    /// First retry delay; doubled on every further retry.
    pub base_backoff_ms: u64,
    pub timeout_secs: u64,
    pub temperature: f64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4.1".into(),
            max_attempts: 3,
            base_backoff_ms: 500,
            timeout_secs: 120,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub outcome: String,
}

/// Chat-completion planner backend.
pub struct LlmPlanner {
    config: LlmConfig,
    api_key: String,
    agent: ureq::Agent,
    attempts: Vec<AttemptRecord>,
}

enum Failure {
    Transient(String),
    Fatal(AgentError),
}

impl LlmPlanner {
    /// Fails with `AuthFailure` before any network traffic when the key is not set.
    pub fn from_env(config: LlmConfig) -> Result<Self, AgentError> {
        Self::from_lookup(config, |k| std::env::var(k).ok())
    }

    pub(crate) fn from_lookup(config: LlmConfig, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, AgentError> {
        let api_key = lookup(API_KEY_ENV)
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| AgentError::AuthFailure(format!("{API_KEY_ENV} is not set")))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, api_key, agent, attempts: Vec::new() })
    }

    /// Every HTTP attempt made so far, including retries.
    pub fn attempts(&self) -> &[AttemptRecord] {
        &self.attempts
    }

    fn system_prompt(purpose: Purpose) -> &'static str {
        match purpose {
            Purpose::Think => "You control a modeling workflow through tools. Reply with a single JSON object only.",
            _ => "You write declarative task documents for a modeling workflow. Reply with a single JSON object only.",
        }
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<PlannerResponse, Failure> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| Failure::Transient(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        match status {
            200..=299 => {}
            401 | 403 => return Err(Failure::Fatal(AgentError::AuthFailure(format!("HTTP {status}")))),
            429 | 500..=599 => return Err(Failure::Transient(format!("HTTP {status}"))),
            _ => {
                return Err(Failure::Fatal(AgentError::PlannerUnavailable(format!(
                    "HTTP {status}: {}",
                    text.chars().take(200).collect::<String>()
                ))))
            }
        }
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(AgentError::PlannerUnavailable(format!("malformed response: {e}"))))?;
        let content = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| Failure::Fatal(AgentError::PlannerUnavailable("response has no message content".into())))?;
        let usage = CallUsage {
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok(PlannerResponse { text: strip_fences(content).to_string(), usage })
    }
}

fn strip_fences(s: &str) -> &str {
    let t = s.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

impl Planner for LlmPlanner {
    fn id(&self) -> String {
        format!("llm:{}", self.config.model)
    }

    fn plan(&mut self, q: &PlannerQuery) -> Result<PlannerResponse, AgentError> {
        let body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": Self::system_prompt(q.purpose)},
                {"role": "user", "content": q.prompt},
            ],
        });
        let max = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.attempt(&body) {
                Ok(r) => {
                    self.attempts.push(AttemptRecord { attempt, outcome: "ok".into() });
                    return Ok(r);
                }
                Err(Failure::Fatal(e)) => {
                    self.attempts.push(AttemptRecord { attempt, outcome: e.to_string() });
                    return Err(e);
                }
                Err(Failure::Transient(msg)) => {
                    self.attempts.push(AttemptRecord { attempt, outcome: msg.clone() });
                    last = msg;
                    if attempt < max {
                        let delay = self.config.base_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
        Err(AgentError::PlannerUnavailable(format!("{max} attempts failed; last: {last}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::planner::QueryContext;
    use crate::agents::{ProjectContext, RunMode, WorkflowState};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one canned (status, body) per connection, in order.
    fn mock(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let mut auth = vec![];
            for (status, body) in replies {
                let (mut s, _) = listener.accept().unwrap();
                let mut r = BufReader::new(s.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    r.read_line(&mut line).unwrap();
                    let l = line.trim_end().to_ascii_lowercase();
                    if l.is_empty() {
                        break;
                    }
                    if let Some(v) = l.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if l.starts_with("authorization:") {
                        auth.push(line.trim_end().to_string());
                    }
                }
                let mut buf = vec![0; len];
                r.read_exact(&mut buf).unwrap();
                let msg = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                s.write_all(msg.as_bytes()).unwrap();
            }
            auth
        });
        (format!("http://{addr}/v1"), h)
    }

    fn completion(content: &str) -> String {
        json!({
            "choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 120, "completion_tokens": 30}
        })
        .to_string()
    }

    fn query() -> (tempfile::TempDir, PlannerQuery) {
        let dir = tempfile::tempdir().unwrap();
        let ctx = ProjectContext::new(dir.path(), "r").unwrap();
        let q = PlannerQuery {
            purpose: Purpose::Think,
            prompt: "next?".into(),
            digest: String::new(),
            context: QueryContext {
                task: String::new(),
                ctx,
                state: WorkflowState::new("r", RunMode::React),
                document: None,
                error_log: None,
                window: vec![],
            },
        };
        (dir, q)
    }

    fn planner(url: String) -> LlmPlanner {
        let cfg = LlmConfig { base_url: url, base_backoff_ms: 1, timeout_secs: 10, ..LlmConfig::default() };
        LlmPlanner::from_lookup(cfg, |_| Some("sk-test".into())).unwrap()
    }

    #[test]
    fn missing_key_fails_before_network() {
        let cfg = LlmConfig { base_url: "http://127.0.0.1:9".into(), ..LlmConfig::default() };
        assert!(matches!(LlmPlanner::from_lookup(cfg, |_| None), Err(AgentError::AuthFailure(_))));
    }

    #[test]
    fn canned_directive_round_trips() {
        let directive = r#"{"thought":"start","action":"generate_model","args":{}}"#;
        let (url, h) = mock(vec![(200, completion(&format!("```json\n{directive}\n```")))]);
        let (_d, q) = query();
        let mut p = planner(url);
        let r = p.plan(&q).unwrap();
        assert_eq!(r.text, directive);
        assert_eq!(r.usage, CallUsage { prompt_tokens: 120, completion_tokens: 30 });
        assert_eq!(h.join().unwrap(), vec!["authorization: Bearer sk-test".to_string()]);
    }

    #[test]
    fn transient_failures_are_retried() {
        let (url, h) = mock(vec![(503, "{}".into()), (429, "{}".into()), (200, completion("{}"))]);
        let (_d, q) = query();
        let mut p = planner(url);
        p.plan(&q).unwrap();
        assert_eq!(p.attempts().len(), 3);
        assert_eq!(p.attempts()[2].outcome, "ok");
        h.join().unwrap();
    }

    #[test]
    fn auth_and_exhaustion() {
        let (url, h) = mock(vec![(401, "{}".into())]);
        let (_d, q) = query();
        assert!(matches!(planner(url).plan(&q), Err(AgentError::AuthFailure(_))));
        h.join().unwrap();

        let (url, h) = mock(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
        let mut p = planner(url);
        assert!(matches!(p.plan(&q), Err(AgentError::PlannerUnavailable(_))));
        assert_eq!(p.attempts().len(), 3);
        h.join().unwrap();
    }

    #[test]
    fn fence_stripping() {
        assert_eq!(strip_fences("```json\n{\"a\":1}\n```"), "{\"a\":1}");
        assert_eq!(strip_fences("  {\"a\":1} "), "{\"a\":1}");
    }
}
