//! Annotator clients: a pure template-driven mock and an HTTP JSON endpoint.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separates the human-readable instruction from the machine-readable payload in a prompt.
pub const PAYLOAD_MARKER: &str = "\n### payload\n";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    /// Worth retrying: connection problems, timeouts, rate limits, server errors.
    #[error("transport error: {0}")]
    Transport(String),
    /// Retrying will not help.
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorRequest {
    pub prompt: String,
    /// Opaque image identifiers.
    pub attachments: Vec<String>,
    pub max_tokens: u32,
}

pub trait AnnotatorClient: Send + Sync {
    fn complete(&self, request: &AnnotatorRequest) -> Result<String, ClientError>;
}

/// Builds a prompt whose tail the mock (or any cooperating service) can decode.
pub fn compose_prompt(instruction: &str, payload: &serde_json::Value) -> String {
    format!("{instruction}{PAYLOAD_MARKER}{payload}")
}

pub fn prompt_payload(prompt: &str) -> Option<serde_json::Value> {
    let (_, tail) = prompt.rsplit_once(PAYLOAD_MARKER)?;
    serde_json::from_str(tail).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    /// Every call fails with a retryable transport error.
    Transport,
    /// The call succeeds with text no stage can accept.
    Garbage,
}

/// Template-driven annotator. Output depends only on the request and the fault table.
#[derive(Debug, Clone, Default)]
pub struct DeterministicMock {
    faults: BTreeMap<(String, u8), Fault>,
}

impl DeterministicMock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(mut self, sample_id: &str, stage: u8, fault: Fault) -> Self {
        self.faults.insert((sample_id.to_string(), stage), fault);
        self
    }
}

impl AnnotatorClient for DeterministicMock {
    fn complete(&self, request: &AnnotatorRequest) -> Result<String, ClientError> {
        let payload = prompt_payload(&request.prompt).ok_or_else(|| ClientError::Protocol("prompt carries no payload".into()))?;
        let stage = payload["stage"].as_u64().ok_or_else(|| ClientError::Protocol("payload has no stage".into()))?;
        let sample_id = payload["sample_id"].as_str().unwrap_or_default();
        let stage = u8::try_from(stage).map_err(|_| ClientError::Protocol(format!("unknown stage {stage}")))?;
        match self.faults.get(&(sample_id.to_string(), stage)) {
            Some(Fault::Transport) => return Err(ClientError::Transport(format!("injected fault for {sample_id} at stage {stage}"))),
            Some(Fault::Garbage) => return Ok("I cannot help with that.".to_string()),
            None => {}
        }
        match stage {
            1 => super::stages::mock_cot(&payload),
            2 => super::stages::mock_mapping(&payload),
            3 => super::stages::mock_reassembly(&payload),
            other => Err(ClientError::Protocol(format!("unknown stage {other}"))),
        }
    }
}

#[derive(Deserialize)]
struct EndpointResponse {
    text: String,
}

/// POSTs `{prompt, attachments, max_tokens}` as JSON and expects `{text}` back.
pub struct RemoteEndpoint {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteEndpoint {
    pub fn new(url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.to_string(),
            api_key,
            agent,
        }
    }

    /// Reads the bearer token from the environment variable `key_var`, if set.
    pub fn from_env(url: &str, key_var: &str, timeout: Duration) -> Self {
        Self::new(url, std::env::var(key_var).ok().filter(|k| !k.is_empty()), timeout)
    }
}

impl AnnotatorClient for RemoteEndpoint {
    fn complete(&self, request: &AnnotatorRequest) -> Result<String, ClientError> {
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(request).map_err(|e| match e {
            ureq::Error::BadUri(_) | ureq::Error::Http(_) | ureq::Error::InvalidProxyUrl => ClientError::Protocol(e.to_string()),
            other => ClientError::Transport(other.to_string()),
        })?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(ClientError::Transport(format!("endpoint returned status {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(ClientError::Protocol(format!("endpoint returned status {status}")));
        }
        let body: EndpointResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Protocol(format!("bad response body: {e}")))?;
        Ok(body.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_round_trip() {
        let payload = serde_json::json!({"stage": 2, "sample_id": "a"});
        let prompt = compose_prompt("Map the objects.", &payload);
        assert_eq!(prompt_payload(&prompt), Some(payload));
        assert_eq!(prompt_payload("no marker here"), None);
    }

    #[test]
    fn mock_faults_are_keyed_by_sample_and_stage() {
        let mock = DeterministicMock::new().with_fault("s1", 2, Fault::Transport);
        let req = |id: &str, stage: u8| AnnotatorRequest {
            prompt: compose_prompt("x", &serde_json::json!({"stage": stage, "sample_id": id})),
            attachments: vec![],
            max_tokens: 16,
        };
        assert!(matches!(mock.complete(&req("s1", 2)), Err(ClientError::Transport(_))));
        // other samples and stages reach the templates, which reject this thin payload
        assert!(matches!(mock.complete(&req("s2", 2)), Err(ClientError::Protocol(_))));
        assert!(matches!(mock.complete(&req("s1", 9)), Err(ClientError::Protocol(_))));
    }

    #[test]
    fn retryability() {
        assert!(ClientError::Transport("x".into()).is_retryable());
        assert!(!ClientError::Protocol("x".into()).is_retryable());
    }
}
