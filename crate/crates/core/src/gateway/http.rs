//! HTTP transport for model backends.
//!
//! Chat: `POST {endpoint}/chat` with [`wire::ChatBody`], answered by
//! [`wire::ChatReply`]. Embeddings: `POST {endpoint}/embed` with
//! [`wire::EmbedBody`], answered by [`wire::EmbedReply`]. Images travel as
//! base64 with a MIME type, or as a URI the server fetches itself.

use async_trait::async_trait;
use reqwest::StatusCode;

use super::{
    encode_b64, Backend, BackendError, BackendRole, ChatRequest, EmbedPayload, ImageAttachment,
    MessageRole, Part,
};
use crate::error::{Error, Result};

pub mod wire {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ChatBody {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub model: Option<String>,
        pub messages: Vec<WireMessage>,
        pub temperature: f64,
        pub top_p: f64,
        pub max_tokens: u32,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct WireMessage {
        /// `system` or `user`.
        pub role: String,
        pub content: Vec<ContentPart>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(tag = "type", rename_all = "snake_case")]
    pub enum ContentPart {
        Text {
            text: String,
        },
        Image {
            #[serde(default, skip_serializing_if = "Option::is_none")]
            data: Option<String>,
            #[serde(default, skip_serializing_if = "Option::is_none")]
            mime: Option<String>,
            #[serde(default, skip_serializing_if = "Option::is_none")]
            uri: Option<String>,
        },
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ChatReply {
        pub text: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedBody {
        /// `text` or `image`.
        pub modality: String,
        /// Raw text, or base64 image bytes.
        pub input: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub model: Option<String>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedReply {
        pub values: Vec<f32>,
        pub dim: usize,
    }
}

pub(crate) fn chat_body(req: &ChatRequest, model: Option<String>) -> wire::ChatBody {
    let messages = req
        .messages
        .iter()
        .map(|m| wire::WireMessage {
            role: match m.role {
                MessageRole::System => "system".into(),
                MessageRole::User => "user".into(),
            },
            content: m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text(text) => wire::ContentPart::Text { text: text.clone() },
                    Part::Image(ImageAttachment::Data { mime, bytes }) => wire::ContentPart::Image {
                        data: Some(encode_b64(bytes)),
                        mime: Some(mime.clone()),
                        uri: None,
                    },
                    Part::Image(ImageAttachment::Uri(uri)) => wire::ContentPart::Image {
                        data: None,
                        mime: None,
                        uri: Some(uri.clone()),
                    },
                })
                .collect(),
        })
        .collect();
    wire::ChatBody {
        model,
        messages,
        temperature: req.temperature,
        top_p: req.top_p,
        max_tokens: req.max_tokens,
    }
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    base: String,
    model: Option<String>,
}

impl HttpBackend {
    pub fn new(base: &str, model: Option<String>) -> Result<Self> {
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(Error::Config(format!("backend url must be http(s): {base:?}")));
        }
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            client,
            base: base.trim_end_matches('/').to_string(),
            model,
        })
    }

    async fn post<B: serde::Serialize, R: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, BackendError> {
        let url = format!("{}/{path}", self.base);
        let resp = self
            .client
            .post(&url)
            .json(body)
            .send()
            .await
            .map_err(|e| BackendError::Transient(format!("{url}: {e}")))?;
        let status = resp.status();
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::Transient(format!("{url}: HTTP {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Unavailable(format!("{url}: HTTP {status}")));
        }
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| BackendError::Transient(format!("{url}: {e}")))?;
        serde_json::from_slice(&bytes).map_err(|e| BackendError::Malformed(format!("{url}: {e}")))
    }
}

#[async_trait]
impl Backend for HttpBackend {
    fn id(&self) -> String {
        match &self.model {
            Some(m) => format!("{}#{m}", self.base),
            None => self.base.clone(),
        }
    }

    async fn chat(&self, _role: BackendRole, req: &ChatRequest) -> Result<String, BackendError> {
        let reply: wire::ChatReply = self.post("chat", &chat_body(req, self.model.clone())).await?;
        Ok(reply.text)
    }

    async fn embed(&self, _role: BackendRole, payload: &EmbedPayload) -> Result<Vec<f32>, BackendError> {
        let body = match payload {
            EmbedPayload::Text(t) => wire::EmbedBody {
                modality: "text".into(),
                input: t.clone(),
                model: self.model.clone(),
            },
            EmbedPayload::Image(bytes) => wire::EmbedBody {
                modality: "image".into(),
                input: encode_b64(bytes),
                model: self.model.clone(),
            },
        };
        let reply: wire::EmbedReply = self.post("embed", &body).await?;
        if reply.dim != reply.values.len() {
            return Err(BackendError::Malformed(format!(
                "embed reply dim {} but {} values",
                reply.dim,
                reply.values.len()
            )));
        }
        Ok(reply.values)
    }

    /// Any HTTP answer from the base URL counts as reachable.
    async fn probe(&self) -> bool {
        self.client.get(&self.base).send().await.is_ok()
    }
}
