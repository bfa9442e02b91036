//! Backend-agnostic access to the model roles the pipeline depends on.
//!
//! A [`Gateway`] owns one [`Backend`] per [`BackendRole`], caps in-flight
//! requests per role, applies a per-request timeout and retries transient
//! transport failures with exponential backoff. Model-output parsing lives
//! in [`parse`]; it is never retried here.

pub mod http;
pub mod mock;
pub mod parse;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::config::{GatewayConfig, PipelineConfig};
use crate::error::{Error, Result};
use crate::model::{content_hash, Embedding};

pub use self::http::HttpBackend;
pub use self::mock::MockBackend;

/// Max image attachments in one chat request (reference + candidate).
pub const MAX_IMAGES_PER_REQUEST: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    Captioner,
    Reasoner,
    Verifier,
    Evaluator,
    TextEncoder,
    ImageEncoder,
}

impl BackendRole {
    pub const ALL: [BackendRole; 6] = [
        BackendRole::Captioner,
        BackendRole::Reasoner,
        BackendRole::Verifier,
        BackendRole::Evaluator,
        BackendRole::TextEncoder,
        BackendRole::ImageEncoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendRole::Captioner => "captioner",
            BackendRole::Reasoner => "reasoner",
            BackendRole::Verifier => "verifier",
            BackendRole::Evaluator => "evaluator",
            BackendRole::TextEncoder => "text_encoder",
            BackendRole::ImageEncoder => "image_encoder",
        }
    }

    /// Parses the `<ROLE>` part of `LGIR_BACKEND_<ROLE>_URL`.
    pub fn from_env_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(name))
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, BackendRole::TextEncoder | BackendRole::ImageEncoder)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for BackendRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageAttachment {
    Data {
        mime: String,
        #[serde(with = "b64")]
        bytes: Vec<u8>,
    },
    Uri(String),
}

impl ImageAttachment {
    /// Identity of the attached image: content hash for inline bytes, the
    /// URI otherwise.
    pub fn key(&self) -> String {
        match self {
            ImageAttachment::Data { bytes, .. } => content_hash(bytes),
            ImageAttachment::Uri(uri) => uri.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Text(String),
    Image(ImageAttachment),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn user(parts: Vec<Part>) -> Self {
        Self {
            role: MessageRole::User,
            parts,
        }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: MessageRole::System,
            parts: vec![Part::Text(text.into())],
        }
    }
}

/// Sampling parameters shared by every chat call of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl From<&PipelineConfig> for Sampling {
    fn from(cfg: &PipelineConfig) -> Self {
        Self {
            temperature: cfg.temperature,
            top_p: cfg.top_p,
            max_tokens: cfg.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>, sampling: Sampling) -> Self {
        Self {
            messages,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            max_tokens: sampling.max_tokens,
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageAttachment> {
        self.messages
            .iter()
            .flat_map(|m| m.parts.iter())
            .filter_map(|p| match p {
                Part::Image(img) => Some(img),
                Part::Text(_) => None,
            })
    }

    /// All text parts of user messages, concatenated with newlines.
    pub fn user_text(&self) -> String {
        let mut out = String::new();
        for m in self.messages.iter().filter(|m| m.role == MessageRole::User) {
            for p in &m.parts {
                if let Part::Text(t) = p {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(t);
                }
            }
        }
        out
    }

    pub fn has_system_message(&self) -> bool {
        self.messages.iter().any(|m| m.role == MessageRole::System)
    }

    /// Stable digest of the request under `role`.
    pub fn digest(&self, role: BackendRole) -> String {
        let mut h = Sha256::new();
        h.update(role.as_str().as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(self).expect("chat request serializes"));
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub latency_ms: u64,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedPayload {
    Text(String),
    Image(Vec<u8>),
}

impl EmbedPayload {
    fn is_empty(&self) -> bool {
        match self {
            EmbedPayload::Text(t) => t.is_empty(),
            EmbedPayload::Image(b) => b.is_empty(),
        }
    }
}

/// Failure reported by a backend implementation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: connection refused, 5xx, rate limiting.
    Transient(String),
    /// Not worth retrying: rejected request, missing endpoint.
    Unavailable(String),
    /// The backend answered but the payload did not match the wire schema.
    Malformed(String),
}

#[async_trait]
pub trait Backend: Send + Sync {
    /// Identifier used to namespace cache entries.
    fn id(&self) -> String;

    async fn chat(&self, role: BackendRole, req: &ChatRequest) -> Result<String, BackendError>;

    async fn embed(&self, role: BackendRole, payload: &EmbedPayload) -> Result<Vec<f32>, BackendError>;

    /// Cheap reachability check for health reporting.
    async fn probe(&self) -> bool {
        true
    }
}

/// Routes role calls to backends with concurrency caps, timeouts and retries.
pub struct Gateway {
    backends: HashMap<BackendRole, Arc<dyn Backend>>,
    limits: HashMap<BackendRole, Arc<Semaphore>>,
    cfg: GatewayConfig,
    dim: OnceLock<usize>,
    calls: [AtomicU64; 6],
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut roles: Vec<_> = self.backends.keys().collect();
        roles.sort();
        f.debug_struct("Gateway")
            .field("roles", &roles)
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Self {
        Self {
            backends: HashMap::new(),
            limits: HashMap::new(),
            cfg,
            dim: OnceLock::new(),
            calls: Default::default(),
        }
    }

    pub fn with_backend(mut self, role: BackendRole, backend: Arc<dyn Backend>) -> Self {
        self.limits
            .insert(role, Arc::new(Semaphore::new(self.cfg.concurrency.max(1))));
        self.backends.insert(role, backend);
        self
    }

    /// Same backend for every role.
    pub fn with_all(mut self, backend: Arc<dyn Backend>) -> Self {
        for role in BackendRole::ALL {
            self = self.with_backend(role, backend.clone());
        }
        self
    }

    /// Builds HTTP backends for configured endpoints. `mock` endpoints share
    /// one default [`MockBackend`]; `mock://<path>` loads a JSON script.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let mut gw = Gateway::new(cfg.gateway.clone());
        let mut mocks: HashMap<String, Arc<dyn Backend>> = HashMap::new();
        for (role, endpoint) in &cfg.backends {
            let backend: Arc<dyn Backend> = if endpoint.is_mock() {
                match mocks.get(&endpoint.url) {
                    Some(m) => m.clone(),
                    None => {
                        let script = endpoint
                            .url
                            .strip_prefix("mock://")
                            .filter(|p| !p.is_empty());
                        let m: Arc<dyn Backend> = match script {
                            Some(path) => Arc::new(MockBackend::from_script_file(
                                std::path::Path::new(path),
                            )?),
                            None => Arc::new(MockBackend::new()),
                        };
                        mocks.insert(endpoint.url.clone(), m.clone());
                        m
                    }
                }
            } else {
                Arc::new(HttpBackend::new(&endpoint.url, endpoint.model.clone())?)
            };
            gw = gw.with_backend(*role, backend);
        }
        Ok(gw)
    }

    /// Reachability of the backend behind `role`; `None` when unconfigured.
    pub async fn probe(&self, role: BackendRole) -> Option<bool> {
        let backend = self.backends.get(&role)?.clone();
        let timeout = Duration::from_millis(self.cfg.timeout_ms.min(2_000));
        Some(tokio::time::timeout(timeout, backend.probe()).await.unwrap_or(false))
    }

    pub fn has_role(&self, role: BackendRole) -> bool {
        self.backends.contains_key(&role)
    }

    pub fn backend_id(&self, role: BackendRole) -> Result<String> {
        Ok(self.backend(role)?.id())
    }

    /// Number of backend attempts made for `role` (retries included).
    pub fn call_count(&self, role: BackendRole) -> u64 {
        self.calls[role.slot()].load(Ordering::Relaxed)
    }

    /// Embedding dimension fixed by the first successful embed call.
    pub fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn backend(&self, role: BackendRole) -> Result<&Arc<dyn Backend>> {
        self.backends.get(&role).ok_or(Error::NotConfigured(role))
    }

    async fn with_retries<T, F, Fut>(&self, role: BackendRole, mut op: F) -> Result<T>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T, BackendError>>,
    {
        let limit = self.limits[&role].clone();
        let timeout = Duration::from_millis(self.cfg.timeout_ms);
        let mut last_timed_out = false;
        let mut last_message = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                tokio::time::sleep(Duration::from_millis(delay)).await;
            }
            let _permit = limit.acquire().await.expect("semaphore never closed");
            self.calls[role.slot()].fetch_add(1, Ordering::Relaxed);
            match tokio::time::timeout(timeout, op()).await {
                Ok(Ok(value)) => return Ok(value),
                Ok(Err(BackendError::Transient(msg))) => {
                    tracing::warn!(%role, attempt, "transient backend failure: {msg}");
                    last_timed_out = false;
                    last_message = msg;
                }
                Ok(Err(BackendError::Unavailable(msg))) => {
                    return Err(Error::BackendUnavailable { role, message: msg })
                }
                Ok(Err(BackendError::Malformed(msg))) => return Err(Error::MalformedResponse(msg)),
                Err(_) => {
                    tracing::warn!(%role, attempt, "backend call timed out");
                    last_timed_out = true;
                }
            }
        }
        if last_timed_out {
            Err(Error::Timeout {
                role,
                millis: self.cfg.timeout_ms,
            })
        } else {
            Err(Error::BackendUnavailable {
                role,
                message: last_message,
            })
        }
    }

    pub async fn complete(&self, role: BackendRole, req: &ChatRequest) -> Result<ChatResponse> {
        if role.is_encoder() {
            return Err(Error::Config(format!("{role} is not a chat role")));
        }
        let n_images = req.images().count();
        if n_images > MAX_IMAGES_PER_REQUEST {
            return Err(Error::Config(format!(
                "chat request carries {n_images} images, at most {MAX_IMAGES_PER_REQUEST} allowed"
            )));
        }
        let backend = self.backend(role)?.clone();
        let started = Instant::now();
        let text = self
            .with_retries(role, || {
                let backend = backend.clone();
                async move { backend.chat(role, req).await }
            })
            .await?;
        Ok(ChatResponse {
            text,
            latency_ms: started.elapsed().as_millis() as u64,
            backend_id: backend.id(),
        })
    }

    /// Embeds text or image bytes and returns a unit-norm vector.
    pub async fn embed(&self, role: BackendRole, payload: &EmbedPayload) -> Result<Embedding> {
        match (role, payload) {
            (BackendRole::TextEncoder, EmbedPayload::Text(_))
            | (BackendRole::ImageEncoder, EmbedPayload::Image(_)) => {}
            _ => {
                return Err(Error::Config(format!(
                    "payload modality does not match role {role}"
                )))
            }
        }
        if payload.is_empty() {
            return Err(Error::EmptyText);
        }
        let backend = self.backend(role)?.clone();
        let values = self
            .with_retries(role, || {
                let backend = backend.clone();
                async move { backend.embed(role, payload).await }
            })
            .await?;
        let expected = *self.dim.get_or_init(|| values.len());
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: values.len(),
            });
        }
        Embedding::new(values)?.normalize()
    }
}

mod b64 {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

pub(crate) fn encode_b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockBackend;

    fn fast_cfg() -> GatewayConfig {
        GatewayConfig {
            timeout_ms: 500,
            max_retries: 2,
            backoff_ms: 1,
            concurrency: 4,
        }
    }

    fn text_req(text: &str) -> ChatRequest {
        ChatRequest::new(
            vec![Message::user(vec![Part::Text(text.into())])],
            Sampling {
                temperature: 0.0,
                top_p: 1.0,
                max_tokens: 64,
            },
        )
    }

    #[tokio::test]
    async fn scripted_mock_reply_passes_through() {
        let mock = MockBackend::new().with_rule(BackendRole::Captioner, "hello", "a gray umbrella scene");
        let gw = Gateway::new(fast_cfg()).with_all(Arc::new(mock));
        let resp = gw
            .complete(BackendRole::Captioner, &text_req("hello there"))
            .await
            .unwrap();
        assert_eq!(resp.text, "a gray umbrella scene");
        assert_eq!(resp.backend_id, "mock");
    }

    #[tokio::test]
    async fn identical_requests_get_identical_answers() {
        let gw = Gateway::new(fast_cfg()).with_all(Arc::new(MockBackend::new()));
        let req = text_req("Is there a dog?");
        let a = gw.complete(BackendRole::Verifier, &req).await.unwrap();
        let b = gw.complete(BackendRole::Verifier, &req).await.unwrap();
        assert_eq!(a.text, b.text);
    }

    #[tokio::test]
    async fn transient_failures_are_retried() {
        let mock = Arc::new(MockBackend::new().fail_first(BackendRole::Reasoner, 2));
        let gw = Gateway::new(fast_cfg()).with_all(mock.clone());
        gw.complete(BackendRole::Reasoner, &text_req("x")).await.unwrap();
        assert_eq!(gw.call_count(BackendRole::Reasoner), 3);
    }

    #[tokio::test]
    async fn exhausting_retries_reports_unavailable() {
        let mock = Arc::new(MockBackend::new().fail_first(BackendRole::Reasoner, 10));
        let gw = Gateway::new(fast_cfg()).with_all(mock);
        let err = gw.complete(BackendRole::Reasoner, &text_req("x")).await.unwrap_err();
        assert!(matches!(err, Error::BackendUnavailable { role: BackendRole::Reasoner, .. }));
        assert_eq!(gw.call_count(BackendRole::Reasoner), 3);
    }

    #[tokio::test]
    async fn missing_role_is_reported() {
        let gw = Gateway::new(fast_cfg());
        let err = gw.complete(BackendRole::Evaluator, &text_req("x")).await.unwrap_err();
        assert!(matches!(err, Error::NotConfigured(BackendRole::Evaluator)));
    }

    #[tokio::test]
    async fn too_many_images_are_rejected() {
        let gw = Gateway::new(fast_cfg()).with_all(Arc::new(MockBackend::new()));
        let img = Part::Image(ImageAttachment::Uri("file:///a.png".into()));
        let req = ChatRequest::new(
            vec![Message::user(vec![img.clone(), img.clone(), img])],
            Sampling {
                temperature: 0.0,
                top_p: 1.0,
                max_tokens: 8,
            },
        );
        assert!(gw.complete(BackendRole::Evaluator, &req).await.is_err());
    }

    #[tokio::test]
    async fn embeddings_are_unit_norm_and_deterministic() {
        let gw = Gateway::new(fast_cfg()).with_all(Arc::new(MockBackend::new()));
        let t = EmbedPayload::Text("a red car".into());
        let a = gw.embed(BackendRole::TextEncoder, &t).await.unwrap();
        let b = gw.embed(BackendRole::TextEncoder, &t).await.unwrap();
        assert_eq!(a, b);
        assert!(a.normalized);
        assert!((a.norm() - 1.0).abs() <= 1e-6);
        let c = gw
            .embed(BackendRole::TextEncoder, &EmbedPayload::Text("a blue boat".into()))
            .await
            .unwrap();
        let cos: f64 = a
            .values
            .iter()
            .zip(&c.values)
            .map(|(x, y)| *x as f64 * *y as f64)
            .sum();
        assert!(cos < 1.0 - 1e-6);
    }

    #[tokio::test]
    async fn dimension_changes_are_rejected() {
        let mock = MockBackend::new()
            .with_text_embedder(|text| Some(if text == "short" { vec![1.0, 0.0] } else { vec![1.0, 0.0, 0.0] }));
        let gw = Gateway::new(fast_cfg()).with_all(Arc::new(mock));
        gw.embed(BackendRole::TextEncoder, &EmbedPayload::Text("long".into()))
            .await
            .unwrap();
        let err = gw
            .embed(BackendRole::TextEncoder, &EmbedPayload::Text("short".into()))
            .await
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 3, actual: 2 }));
    }

    #[tokio::test]
    async fn wrong_modality_is_rejected() {
        let gw = Gateway::new(fast_cfg()).with_all(Arc::new(MockBackend::new()));
        assert!(gw
            .embed(BackendRole::ImageEncoder, &EmbedPayload::Text("x".into()))
            .await
            .is_err());
        assert!(matches!(
            gw.embed(BackendRole::TextEncoder, &EmbedPayload::Text(String::new())).await,
            Err(Error::EmptyText)
        ));
    }

    #[test]
    fn env_role_names() {
        assert_eq!(BackendRole::from_env_name("TEXT_ENCODER"), Some(BackendRole::TextEncoder));
        assert_eq!(BackendRole::from_env_name("captioner"), Some(BackendRole::Captioner));
        assert_eq!(BackendRole::from_env_name("JUDGE"), None);
    }

    #[test]
    fn attachment_serializes_as_base64() {
        let a = ImageAttachment::Data {
            mime: "image/png".into(),
            bytes: vec![1, 2, 3],
        };
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.contains(&encode_b64(&[1, 2, 3])));
        let back: ImageAttachment = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }
}
