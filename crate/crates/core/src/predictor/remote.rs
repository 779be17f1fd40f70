//! HTTP client for an inference backend that scores label continuations.
//!
//! Wire format (JSON over `POST {base_url}/v1/label-logprobs`):
//!
//! ```text
//! request:  {"model": "...", "prompt": "...", "candidates": ["True", "False"], "temperature": 0.0}
//! response: {"logprobs": {"True": -0.21, "False": -1.65}}
//! ```
//!
//! The bearer token is read from the environment variable named in the
//! config and sent as `Authorization: Bearer <token>`. It is never logged.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    check_target, render_prompt, ContextWindow, PassCounter, Prediction, Predictor,
    PredictorError, Query,
};
use crate::data::Dataset;

pub const ENDPOINT_PATH: &str = "/v1/label-logprobs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    pub auth_token_env: String,
    /// Seconds.
    pub request_timeout: f64,
    pub max_retries: u32,
    /// Seconds; doubled after every failed attempt.
    pub retry_base_delay: f64,
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            model_name: "base".into(),
            auth_token_env: "ICM_API_TOKEN".into(),
            request_timeout: 60.0,
            max_retries: 3,
            retry_base_delay: 1.0,
            max_in_flight: 4,
        }
    }
}

impl BackendConfig {
    pub fn endpoint(&self) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), ENDPOINT_PATH)
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LogprobRequest {
    pub model: String,
    pub prompt: String,
    pub candidates: Vec<String>,
    pub temperature: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LogprobResponse {
    pub logprobs: BTreeMap<String, f64>,
}

pub struct RemoteBackend {
    config: BackendConfig,
    agent: ureq::Agent,
    token: Option<String>,
    passes: PassCounter,
    attempts: AtomicU64,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("config", &self.config)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(PredictorError),
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Self {
        let token = std::env::var(&config.auth_token_env).ok();
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.request_timeout))
            .build();
        Self {
            config,
            agent,
            token,
            passes: PassCounter::default(),
            attempts: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// HTTP attempts made so far, including failed ones.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    /// Scores `label_tokens` as continuations of `prompt`, renormalized over
    /// the supplied labels, retrying transient failures with backoff.
    pub fn remote_label_logprobs(
        &self,
        prompt: &str,
        label_tokens: &[String],
    ) -> Result<Vec<f64>, PredictorError> {
        let endpoint = self.config.endpoint();
        let body = LogprobRequest {
            model: self.config.model_name.clone(),
            prompt: prompt.to_owned(),
            candidates: label_tokens.to_vec(),
            temperature: 0.0,
        };
        let mut tries = 0u32;
        loop {
            tries += 1;
            match self.attempt(&endpoint, &body, label_tokens) {
                Ok(raw) => {
                    self.passes.bump();
                    return Ok(Prediction::from_logprobs(&raw).log_probs().to_vec());
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason)) => {
                    if tries > self.config.max_retries {
                        return Err(PredictorError::Unreachable {
                            endpoint,
                            attempts: tries,
                            reason,
                        });
                    }
                    let delay = self.config.retry_base_delay * f64::powi(2.0, tries as i32 - 1);
                    log::warn!("attempt {tries} against {endpoint} failed ({reason}); retrying in {delay:.2}s");
                    std::thread::sleep(Duration::from_secs_f64(delay));
                }
            }
        }
    }

    fn attempt(
        &self,
        endpoint: &str,
        body: &LogprobRequest,
        label_tokens: &[String],
    ) -> Result<Vec<f64>, Attempt> {
        self.attempts.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(endpoint);
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                let text = r.into_string().unwrap_or_default();
                return Err(match status {
                    401 | 403 => Attempt::Fatal(PredictorError::Auth {
                        endpoint: endpoint.to_owned(),
                        status,
                    }),
                    408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
                    _ => Attempt::Fatal(PredictorError::Rejected {
                        endpoint: endpoint.to_owned(),
                        status,
                        body: text,
                    }),
                });
            }
            Err(ureq::Error::Transport(t)) => return Err(Attempt::Retry(t.to_string())),
        };
        let parsed: LogprobResponse = resp.into_json().map_err(|e| {
            Attempt::Fatal(PredictorError::Malformed {
                endpoint: endpoint.to_owned(),
                reason: e.to_string(),
            })
        })?;
        label_tokens
            .iter()
            .map(|t| {
                let lp = parsed
                    .logprobs
                    .get(t)
                    .copied()
                    .ok_or_else(|| Attempt::Fatal(PredictorError::MissingLabel(t.clone())))?;
                if lp.is_nan() || lp > 0.0 {
                    return Err(Attempt::Fatal(PredictorError::Malformed {
                        endpoint: endpoint.to_owned(),
                        reason: format!("invalid log-probability {lp} for `{t}`"),
                    }));
                }
                Ok(lp)
            })
            .collect()
    }
}

impl Predictor for RemoteBackend {
    fn label_distribution(
        &self,
        dataset: &Dataset,
        window: &ContextWindow,
        target: usize,
    ) -> Result<Prediction, PredictorError> {
        check_target(dataset, window, target)?;
        let prompt = render_prompt(dataset, window, target);
        let lps = self.remote_label_logprobs(&prompt, dataset.label_space().tokens())?;
        Ok(Prediction::from_logprobs(&lps))
    }

    fn label_distributions(
        &self,
        dataset: &Dataset,
        queries: &[Query],
    ) -> Result<Vec<Prediction>, PredictorError> {
        let workers = self.config.max_in_flight.max(1).min(queries.len());
        if workers <= 1 {
            return queries
                .iter()
                .map(|q| self.label_distribution(dataset, &q.window, q.target))
                .collect();
        }
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<Prediction, PredictorError>>>> =
            Mutex::new(vec![None; queries.len()]);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::Relaxed);
                    let Some(q) = queries.get(k) else { break };
                    let r = self.label_distribution(dataset, &q.window, q.target);
                    results.lock().expect("results lock")[k] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .expect("results lock")
            .into_iter()
            .map(|r| r.expect("every query answered"))
            .collect()
    }

    fn forward_passes(&self) -> u64 {
        self.passes.get()
    }

    fn describe(&self) -> String {
        format!("remote:{}@{}", self.config.model_name, self.config.base_url)
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    use super::*;
    use crate::data::{Example, Label, LabelSpace};

    const RECORDED: &str = include_str!("../../tests/fixtures/label_logprobs.json");

    #[derive(Deserialize)]
    struct Exchange {
        request: LogprobRequest,
        response: serde_json::Value,
    }

    struct Served {
        url: String,
        requests: Arc<Mutex<Vec<(String, String)>>>,
    }

    /// Answers one connection per scripted `(status, body)` reply, recording
    /// each request's authorization header and body.
    fn serve(replies: Vec<(u16, String)>) -> Served {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = Arc::clone(&requests);
        std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line["authorization:".len()..].trim().to_owned();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen.lock().unwrap().push((auth, String::from_utf8(buf).unwrap()));
                let mut out = stream;
                write!(
                    out,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        Served { url, requests }
    }

    fn backend(url: &str, token_env: &str) -> RemoteBackend {
        RemoteBackend::new(BackendConfig {
            base_url: url.to_owned(),
            auth_token_env: token_env.to_owned(),
            request_timeout: 5.0,
            max_retries: 3,
            retry_base_delay: 0.01,
            max_in_flight: 1,
            ..Default::default()
        })
    }

    fn labels() -> Vec<String> {
        vec!["True".into(), "False".into()]
    }

    #[test]
    fn recorded_exchange_renormalizes() {
        let ex: Exchange = serde_json::from_str(RECORDED).unwrap();
        let server = serve(vec![(200, ex.response.to_string())]);
        std::env::set_var("ICM_TEST_TOKEN_A", "tok-a");
        let b = backend(&server.url, "ICM_TEST_TOKEN_A");
        let lps = b.remote_label_logprobs(&ex.request.prompt, &labels()).unwrap();
        let z = ((-0.3f64).exp() + (-1.9f64).exp()).ln();
        assert!((lps[0] - (-0.3 - z)).abs() < 1e-12);
        assert!((lps[1] - (-1.9 - z)).abs() < 1e-12);
        let (auth, body) = server.requests.lock().unwrap()[0].clone();
        assert_eq!(auth, "Bearer tok-a");
        let sent: LogprobRequest = serde_json::from_str(&body).unwrap();
        assert_eq!(sent, ex.request);
        assert_eq!(b.forward_passes(), 1);
        assert!(!format!("{b:?}").contains("tok-a"));
    }

    #[test]
    fn transient_failure_then_success() {
        let ok = r#"{"logprobs":{"True":-0.1,"False":-2.4}}"#.to_owned();
        let server = serve(vec![(503, "{}".into()), (200, ok)]);
        let b = backend(&server.url, "ICM_TEST_TOKEN_UNSET");
        let lps = b.remote_label_logprobs("p", &labels()).unwrap();
        assert!(lps[0] > lps[1]);
        assert_eq!(b.attempts(), 2);
        assert_eq!(b.forward_passes(), 1);
        assert_eq!(server.requests.lock().unwrap()[0].0, "");
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let server = serve(vec![(401, "{}".into()), (200, "{}".into())]);
        let b = backend(&server.url, "ICM_TEST_TOKEN_UNSET");
        let err = b.remote_label_logprobs("p", &labels()).unwrap_err();
        assert!(matches!(err, PredictorError::Auth { status: 401, .. }));
        assert_eq!(b.attempts(), 1);
    }

    #[test]
    fn missing_label_is_an_error() {
        let server = serve(vec![(200, r#"{"logprobs":{"True":-0.1}}"#.into())]);
        let b = backend(&server.url, "ICM_TEST_TOKEN_UNSET");
        let err = b.remote_label_logprobs("p", &labels()).unwrap_err();
        assert_eq!(err, PredictorError::MissingLabel("False".into()));
    }

    #[test]
    fn retries_exhaust_to_unreachable() {
        let server = serve(vec![(500, "{}".into()), (502, "{}".into())]);
        let mut b = backend(&server.url, "ICM_TEST_TOKEN_UNSET");
        b.config.max_retries = 1;
        let err = b.remote_label_logprobs("p", &labels()).unwrap_err();
        assert!(matches!(err, PredictorError::Unreachable { attempts: 2, .. }));
    }

    #[test]
    fn batched_queries_all_answered() {
        let replies = (0..6)
            .map(|_| (200, r#"{"logprobs":{"True":-0.5,"False":-0.9}}"#.to_owned()))
            .collect();
        let server = serve(replies);
        let mut b = backend(&server.url, "ICM_TEST_TOKEN_UNSET");
        b.config.max_in_flight = 3;
        let ds = Dataset::new(
            (0..6).map(|i| Example::new(format!("q{i}"), format!("claim {i}"))).collect(),
            LabelSpace::default(),
        )
        .unwrap();
        let queries: Vec<Query> = (0..6)
            .map(|t| Query {
                window: ContextWindow::new(vec![((t + 1) % 6, Label(0))], 160),
                target: t,
            })
            .collect();
        let preds = b.label_distributions(&ds, &queries).unwrap();
        assert_eq!(preds.len(), 6);
        assert!(preds.iter().all(|p| p.is_normalized()));
        let mut prompts: Vec<String> = server
            .requests
            .lock()
            .unwrap()
            .iter()
            .map(|(_, body)| serde_json::from_str::<LogprobRequest>(body).unwrap().prompt)
            .collect();
        prompts.sort();
        assert!(prompts.iter().all(|p| p.contains("claim")));
        assert_eq!(b.forward_passes(), 6);
    }
}
