//! Deterministic in-process backend.
//!
//! Replies are a pure function of `(role, request)`: scripted rules first,
//! then an optional responder closure, then built-in heuristics that emit
//! well-formed outputs for every prompt. Embeddings are unit vectors seeded
//! from a hash of the payload unless an embedder closure is installed.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::parse::{canonical_stage1_json, canonical_stage2_text};
use super::{Backend, BackendError, BackendRole, ChatRequest, EmbedPayload};
use crate::error::{Error, Result};
use crate::model::{AtomicInstruction, InstructionKind, Proposition, TargetDescriptions};
use crate::prompts::{BLANK_REFERENCE, QUERY_MARKER};

pub const DEFAULT_MOCK_DIM: usize = 32;

type Responder = Arc<dyn Fn(BackendRole, &ChatRequest) -> Option<String> + Send + Sync>;
type Embedder<T> = Arc<dyn Fn(&T) -> Option<Vec<f32>> + Send + Sync>;

/// A scripted reply: first matching rule wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub role: Option<BackendRole>,
    /// Substring the request's user text must contain.
    #[serde(default)]
    pub contains: Option<String>,
    /// Attachment key (content hash or URI) one of the images must have.
    #[serde(default)]
    pub image: Option<String>,
    pub response: String,
}

impl ScriptRule {
    fn matches(&self, role: BackendRole, req: &ChatRequest) -> bool {
        self.role.is_none_or(|r| r == role)
            && self
                .contains
                .as_ref()
                .is_none_or(|s| req.user_text().contains(s.as_str()))
            && self
                .image
                .as_ref()
                .is_none_or(|key| req.images().any(|img| &img.key() == key))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub dim: Option<usize>,
}

/// One chat call as seen by the mock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub role: BackendRole,
    pub digest: String,
    pub user_text: String,
    pub image_keys: Vec<String>,
    pub has_system: bool,
}

pub struct MockBackend {
    id: String,
    dim: usize,
    rules: Vec<ScriptRule>,
    responder: Option<Responder>,
    text_embedder: Option<Embedder<str>>,
    image_embedder: Option<Embedder<[u8]>>,
    failures: HashMap<BackendRole, AtomicUsize>,
    log: Mutex<Vec<CallRecord>>,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend")
            .field("id", &self.id)
            .field("dim", &self.dim)
            .field("rules", &self.rules.len())
            .finish()
    }
}

impl MockBackend {
    pub fn new() -> Self {
        Self {
            id: "mock".into(),
            dim: DEFAULT_MOCK_DIM,
            rules: Vec::new(),
            responder: None,
            text_embedder: None,
            image_embedder: None,
            failures: HashMap::new(),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_script(script: MockScript) -> Self {
        let mut m = Self::new();
        m.rules = script.rules;
        if let Some(dim) = script.dim {
            m.dim = dim.max(1);
        }
        m
    }

    pub fn from_script_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let script: MockScript =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("mock script: {e}")))?;
        Ok(Self::from_script(script))
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim.max(1);
        self
    }

    pub fn with_rule(mut self, role: BackendRole, contains: &str, response: &str) -> Self {
        self.rules.push(ScriptRule {
            role: Some(role),
            contains: Some(contains.into()),
            image: None,
            response: response.into(),
        });
        self
    }

    pub fn with_script_rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(BackendRole, &ChatRequest) -> Option<String> + Send + Sync + 'static,
    {
        self.responder = Some(Arc::new(f));
        self
    }

    pub fn with_text_embedder<F>(mut self, f: F) -> Self
    where
        F: Fn(&str) -> Option<Vec<f32>> + Send + Sync + 'static,
    {
        self.text_embedder = Some(Arc::new(f));
        self
    }

    pub fn with_image_embedder<F>(mut self, f: F) -> Self
    where
        F: Fn(&[u8]) -> Option<Vec<f32>> + Send + Sync + 'static,
    {
        self.image_embedder = Some(Arc::new(f));
        self
    }

    /// The first `n` calls for `role` fail transiently.
    pub fn fail_first(mut self, role: BackendRole, n: usize) -> Self {
        self.failures.insert(role, AtomicUsize::new(n));
        self
    }

    /// Every call for `role` fails transiently.
    pub fn unavailable(self, role: BackendRole) -> Self {
        self.fail_first(role, usize::MAX)
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn calls_for(&self, role: BackendRole) -> Vec<CallRecord> {
        self.calls().into_iter().filter(|c| c.role == role).collect()
    }

    pub fn clear_calls(&self) {
        self.log.lock().expect("mock log poisoned").clear();
    }

    fn should_fail(&self, role: BackendRole) -> bool {
        let Some(remaining) = self.failures.get(&role) else {
            return false;
        };
        remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }

    fn default_reply(&self, role: BackendRole, req: &ChatRequest) -> String {
        let text = req.user_text();
        match role {
            BackendRole::Captioner => {
                let key = req.images().next().map(|i| i.key()).unwrap_or_default();
                format!("An image with fingerprint {}.", &key[..key.len().min(12)])
            }
            BackendRole::Reasoner => default_reasoner_reply(&text),
            BackendRole::Verifier => {
                let mut h = Sha256::new();
                for img in req.images() {
                    h.update(img.key().as_bytes());
                }
                h.update(text.as_bytes());
                if h.finalize()[0] & 1 == 0 {
                    "Yes".into()
                } else {
                    "No".into()
                }
            }
            BackendRole::Evaluator => {
                "ANSWER: No\nThe default mock evaluator does not accept candidates.".into()
            }
            BackendRole::TextEncoder | BackendRole::ImageEncoder => String::new(),
        }
    }
}

/// Unit vector drawn from a ChaCha stream seeded by `seed`'s SHA-256.
pub fn hash_unit_vector(seed: &[u8], dim: usize) -> Vec<f32> {
    let digest: [u8; 32] = Sha256::digest(seed).into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    raw.into_iter().map(|v| (v / norm) as f32).collect()
}

/// Pulls `Key: value` from the query section at the end of a rendered prompt.
pub fn query_field(prompt: &str, key: &str) -> Option<String> {
    let tail = prompt.rsplit(QUERY_MARKER).next()?;
    let needle = format!("{key}:");
    tail.lines().find_map(|line| {
        let line = line.trim().trim_start_matches('-').trim();
        line.strip_prefix(&needle).map(|v| v.trim().to_string())
    })
}

/// Atomic instructions listed in the query section of a Stage-2 prompt.
pub fn query_atomic_instructions(prompt: &str) -> Vec<AtomicInstruction> {
    let Some(tail) = prompt.rsplit(QUERY_MARKER).next() else {
        return Vec::new();
    };
    let Some(list) = tail.split("Atomic Instructions:").nth(1) else {
        return Vec::new();
    };
    list.lines()
        .filter_map(|line| {
            let line = line.trim();
            let rest = line.strip_prefix('(')?;
            let (_, rest) = rest.split_once(')')?;
            let (kind, text) = rest.split_once(':')?;
            Some(AtomicInstruction::new(
                InstructionKind::from_label(kind)?,
                text.trim(),
            ))
        })
        .collect()
}

fn sentence(text: &str) -> String {
    let t = text.trim().trim_end_matches('.');
    let mut chars = t.chars();
    match chars.next() {
        Some(c) => format!("{}{}.", c.to_uppercase(), chars.as_str()),
        None => String::new(),
    }
}

fn default_reasoner_reply(prompt: &str) -> String {
    if let Some(reference) = query_field(prompt, "Reference Image") {
        let instruction = query_field(prompt, "Instruction").unwrap_or_default();
        let blank = reference.trim() == BLANK_REFERENCE;
        let kind = if blank {
            InstructionKind::Addition
        } else {
            InstructionKind::Modification
        };
        let ce = sentence(&instruction);
        let cs = if blank {
            ce.clone()
        } else {
            format!("{} {}", ce, sentence(&reference))
        };
        return canonical_stage1_json(
            &[AtomicInstruction::new(kind, sentence(&instruction))],
            &TargetDescriptions::new(ce.clone(), ce, cs),
        );
    }
    let atomic = query_atomic_instructions(prompt);
    let props: Vec<Proposition> = atomic
        .iter()
        .map(|a| {
            let body = a.text.trim().trim_end_matches('.');
            Proposition {
                statement: format!("The image reflects: {body}."),
                question: format!("Does the image reflect: {body}?"),
                truth_value: a.kind != InstructionKind::Removal,
            }
        })
        .collect();
    canonical_stage2_text(&props)
}

#[async_trait]
impl Backend for MockBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    async fn chat(&self, role: BackendRole, req: &ChatRequest) -> Result<String, BackendError> {
        self.log.lock().expect("mock log poisoned").push(CallRecord {
            role,
            digest: req.digest(role),
            user_text: req.user_text(),
            image_keys: req.images().map(|i| i.key()).collect(),
            has_system: req.has_system_message(),
        });
        if self.should_fail(role) {
            return Err(BackendError::Transient(format!("mock {role} unavailable")));
        }
        if let Some(rule) = self.rules.iter().find(|r| r.matches(role, req)) {
            return Ok(rule.response.clone());
        }
        if let Some(reply) = self.responder.as_ref().and_then(|f| f(role, req)) {
            return Ok(reply);
        }
        Ok(self.default_reply(role, req))
    }

    async fn embed(&self, role: BackendRole, payload: &EmbedPayload) -> Result<Vec<f32>, BackendError> {
        if self.should_fail(role) {
            return Err(BackendError::Transient(format!("mock {role} unavailable")));
        }
        let custom = match payload {
            EmbedPayload::Text(t) => self.text_embedder.as_ref().and_then(|f| f(t.as_str())),
            EmbedPayload::Image(b) => self.image_embedder.as_ref().and_then(|f| f(b.as_slice())),
        };
        Ok(custom.unwrap_or_else(|| match payload {
            EmbedPayload::Text(t) => {
                hash_unit_vector(&[b"text:".as_slice(), t.as_bytes()].concat(), self.dim)
            }
            EmbedPayload::Image(b) => {
                hash_unit_vector(&[b"image:".as_slice(), b.as_slice()].concat(), self.dim)
            }
        }))
    }
}
