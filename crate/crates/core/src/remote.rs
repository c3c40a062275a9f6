//! Chat-completion wire client for plugging a real language model in as the
//! policy (or as a judge/extractor backend). Transport failures retry up to
//! the configured attempt count; malformed response text is a parse error
//! and is never retried.

use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::policy::{parse_response, Observation, Policy, PolicyError, Response};
use crate::simrollout::RefinementContext;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub auth_header_name: Option<String>,
    #[serde(default)]
    pub auth_header_value: Option<String>,
    /// Total attempts per request (the first try included).
    pub retries: u32,
    pub timeout_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "local-model".into(),
            temperature: 1.0,
            max_tokens: 1024,
            auth_header_name: None,
            auth_header_value: None,
            retries: 3,
            timeout_ms: 30_000,
        }
    }
}

/// Sends one user message and returns the completion text
/// (`choices[0].message.content`). Retries transport failures only.
pub fn chat_complete(cfg: &EndpointConfig, content: &str) -> Result<String, PolicyError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .build()
        .into();
    let body = json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": content}],
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
    });

    let attempts = cfg.retries.max(1);
    let mut last_error = String::new();
    for attempt in 1..=attempts {
        let mut request = agent.post(&cfg.url);
        if let (Some(name), Some(value)) = (&cfg.auth_header_name, &cfg.auth_header_value) {
            request = request.header(name, value);
        }
        match request.send_json(&body) {
            Ok(mut response) => {
                let value: serde_json::Value =
                    response
                        .body_mut()
                        .read_json()
                        .map_err(|e| PolicyError::Endpoint {
                            attempts: attempt,
                            message: format!("unreadable response body: {e}"),
                        })?;
                let content = value["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(|| PolicyError::Endpoint {
                        attempts: attempt,
                        message: format!("response missing choices[0].message.content: {value}"),
                    })?;
                return Ok(content.to_string());
            }
            Err(e) => {
                last_error = e.to_string();
                log::debug!("endpoint attempt {attempt}/{attempts} failed: {last_error}");
            }
        }
    }
    Err(PolicyError::Endpoint {
        attempts,
        message: last_error,
    })
}

/// Sends the full observation prompt and parses the returned text as a
/// structured response. Parse failures surface distinctly (and unretried) so
/// callers can apply their no-op fallback.
pub fn act_remote(cfg: &EndpointConfig, obs: &Observation) -> Result<Response, PolicyError> {
    let text = chat_complete(cfg, &obs.prompt_text())?;
    parse_response(&text).map_err(|error| PolicyError::Parse {
        error,
        raw_text: text,
    })
}

/// Chat-completion-backed policy. No logprobs are available, so it can roll
/// out and refine but not receive gradient updates.
#[derive(Debug, Clone)]
pub struct RemotePolicy {
    pub config: EndpointConfig,
}

impl RemotePolicy {
    pub fn new(config: EndpointConfig) -> Self {
        Self { config }
    }
}

impl Policy for RemotePolicy {
    fn respond(&self, obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<Response, PolicyError> {
        act_remote(&self.config, obs)
    }

    fn refine(
        &self,
        ctx: &RefinementContext,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Response, PolicyError> {
        let text = chat_complete(&self.config, &ctx.composed_prompt)?;
        parse_response(&text).map_err(|error| PolicyError::Parse {
            error,
            raw_text: text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{example_state, render_text};
    use crate::policy::{build_observation, sokoban_task_instruction};
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::thread;

    /// Minimal scripted HTTP server: each entry describes one connection.
    enum Script {
        Reply(String),
        StallThenReply { stall_ms: u64, body: String },
    }

    fn completion_json(text: &str) -> String {
        serde_json::to_string(&json!({
            "choices": [{"message": {"role": "assistant", "content": text}}]
        }))
        .unwrap()
    }

    fn spawn_stub(script: Vec<Script>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for act in script {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = vec![0u8; 65536];
                let n = stream.read(&mut buf).unwrap_or(0);
                let _ = tx.send(String::from_utf8_lossy(&buf[..n]).to_string());
                let body = match act {
                    Script::Reply(body) => body,
                    Script::StallThenReply { stall_ms, body } => {
                        thread::sleep(std::time::Duration::from_millis(stall_ms));
                        body
                    }
                };
                let response = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        (format!("http://{addr}/v1/chat/completions"), rx)
    }

    fn test_obs() -> Observation {
        build_observation(
            sokoban_task_instruction(),
            &[],
            render_text(&example_state()),
            2,
        )
    }

    fn cfg_for(url: String) -> EndpointConfig {
        EndpointConfig {
            url,
            model: "stub".into(),
            temperature: 0.5,
            max_tokens: 256,
            auth_header_name: Some("Authorization".into()),
            auth_header_value: Some("Bearer test-token".into()),
            retries: 3,
            timeout_ms: 400,
        }
    }

    #[test]
    fn loopback_parses_valid_response() {
        let reply = completion_json(
            "<think>go</think>\n<plan>down, left, down, right</plan>\n<action>down</action>",
        );
        let (url, rx) = spawn_stub(vec![Script::Reply(reply)]);
        let resp = act_remote(&cfg_for(url), &test_obs()).unwrap();
        assert_eq!(resp.action, crate::env::ActionPrimitive::Down);
        assert_eq!(resp.plan.len(), 4);
        assert!(resp.logprob.is_none());

        // Wire format checks: single user message with the prompt.
        let request = rx.recv().unwrap();
        assert!(request.contains("POST /v1/chat/completions"));
        assert!(request.contains("Authorization: Bearer test-token"));
        let body_start = request.find("\r\n\r\n").unwrap() + 4;
        let body: serde_json::Value = serde_json::from_str(&request[body_start..]).unwrap();
        assert_eq!(body["model"], "stub");
        assert_eq!(body["messages"][0]["role"], "user");
        assert!(body["messages"][0]["content"]
            .as_str()
            .unwrap()
            .contains("# Current Step"));
        assert_eq!(body["max_tokens"], 256);
    }

    #[test]
    fn malformed_text_is_parse_error_without_retry() {
        let reply = completion_json("no tags here at all");
        let (url, rx) = spawn_stub(vec![Script::Reply(reply)]);
        let err = act_remote(&cfg_for(url), &test_obs()).unwrap_err();
        assert!(matches!(err, PolicyError::Parse { .. }));
        // Exactly one request reached the stub.
        assert!(rx.recv().is_ok());
        assert!(rx.try_recv().is_err());
    }

    #[test]
    fn timeouts_retry_then_succeed() {
        let good = completion_json("<plan>up</plan>\n<action>up</action>");
        let (url, _rx) = spawn_stub(vec![
            Script::StallThenReply {
                stall_ms: 900,
                body: good.clone(),
            },
            Script::StallThenReply {
                stall_ms: 900,
                body: good.clone(),
            },
            Script::Reply(good),
        ]);
        let resp = act_remote(&cfg_for(url), &test_obs()).unwrap();
        assert_eq!(resp.action, crate::env::ActionPrimitive::Up);
    }

    #[test]
    fn exhausted_retries_surface_endpoint_error() {
        let cfg = EndpointConfig {
            url: "http://127.0.0.1:1/unreachable".into(),
            retries: 2,
            timeout_ms: 200,
            ..EndpointConfig::default()
        };
        let err = act_remote(&cfg, &test_obs()).unwrap_err();
        match err {
            PolicyError::Endpoint { attempts, .. } => assert_eq!(attempts, 2),
            other => panic!("expected endpoint error, got {other:?}"),
        }
    }
}
