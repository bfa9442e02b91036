//! Shared services for one pipeline run: gateway, prompts, cache and image
//! loading, with the cached model calls built on top of them.

use std::sync::Arc;

use crate::cache::Cache;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::gateway::parse::parse_yes_no;
use crate::gateway::{
    BackendRole, ChatRequest, EmbedPayload, Gateway, ImageAttachment, Message, Part, Sampling,
};
use crate::images::{data_uri_mime, guess_mime, ImageLoader};
use crate::model::{content_hash, Embedding, ImageRecord};
use crate::prompts::{verifier_question, PromptSet};
use crate::stage2::Answer;

#[derive(Debug, Clone)]
pub struct Engine {
    pub gateway: Arc<Gateway>,
    pub prompts: PromptSet,
    pub cache: Arc<Cache>,
    pub loader: ImageLoader,
    pub config: PipelineConfig,
}

/// An image whose bytes are in hand.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub record: ImageRecord,
    pub bytes: Vec<u8>,
}

impl Engine {
    pub fn new(gateway: Arc<Gateway>, config: PipelineConfig) -> Self {
        Self {
            gateway,
            prompts: PromptSet::default().with_examples(config.in_context_examples),
            cache: Arc::new(Cache::in_memory()),
            loader: ImageLoader::new(),
            config,
        }
    }

    /// Gateway from the configured endpoints, persistent cache when
    /// `cache_dir` is set.
    pub fn from_config(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let gateway = Arc::new(Gateway::from_config(&config)?);
        let cache = match &config.cache_dir {
            Some(dir) => Cache::open(dir)?,
            None => Cache::in_memory(),
        };
        Ok(Self::new(gateway, config).with_cache(Arc::new(cache)))
    }

    pub fn with_cache(mut self, cache: Arc<Cache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_prompts(mut self, prompts: PromptSet) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_config(mut self, config: PipelineConfig) -> Self {
        self.prompts.n_examples = config.in_context_examples;
        self.config = config;
        self
    }

    pub fn sampling(&self) -> Sampling {
        Sampling::from(&self.config)
    }

    /// Loads the bytes behind `record` and fills in its content hash.
    pub async fn load(&self, record: &ImageRecord) -> Result<LoadedImage> {
        let bytes = self.loader.load(&record.uri).await?;
        let mut record = record.clone();
        record.content_hash = content_hash(&bytes);
        Ok(LoadedImage { record, bytes })
    }

    pub fn attachment(image: &LoadedImage) -> ImageAttachment {
        let mime = data_uri_mime(&image.record.uri)
            .unwrap_or_else(|| guess_mime(&image.bytes))
            .to_string();
        ImageAttachment::Data {
            mime,
            bytes: image.bytes.clone(),
        }
    }

    /// Caption for an image, cached by captioner id and content hash.
    pub async fn caption(&self, image: &LoadedImage) -> Result<String> {
        let backend = self.gateway.backend_id(BackendRole::Captioner)?;
        let key = format!("caption:{backend}:{}", image.record.content_hash);
        if let Some(hit) = self.cache.get::<String>(&key) {
            return Ok(hit);
        }
        let req = ChatRequest::new(
            vec![Message::user(vec![
                Part::Image(Self::attachment(image)),
                Part::Text(self.prompts.render_caption()?),
            ])],
            self.sampling(),
        );
        let text = self
            .gateway
            .complete(BackendRole::Captioner, &req)
            .await?
            .text
            .trim()
            .to_string();
        if text.is_empty() {
            return Err(Error::MalformedResponse("captioner returned empty text".into()));
        }
        self.cache.put(&key, &text)?;
        Ok(text)
    }

    pub async fn embed_text(&self, text: &str) -> Result<Embedding> {
        let backend = self.gateway.backend_id(BackendRole::TextEncoder)?;
        let key = format!("embed:text:{backend}:{}", content_hash(text.as_bytes()));
        self.cached_embedding(&key, BackendRole::TextEncoder, EmbedPayload::Text(text.to_string()))
            .await
    }

    pub async fn embed_image(&self, image: &LoadedImage) -> Result<Embedding> {
        let backend = self.gateway.backend_id(BackendRole::ImageEncoder)?;
        let key = format!("embed:image:{backend}:{}", image.record.content_hash);
        self.cached_embedding(&key, BackendRole::ImageEncoder, EmbedPayload::Image(image.bytes.clone()))
            .await
    }

    async fn cached_embedding(&self, key: &str, role: BackendRole, payload: EmbedPayload) -> Result<Embedding> {
        if let Some(values) = self.cache.get::<Vec<f32>>(key) {
            return Embedding::new(values)?.normalize();
        }
        let emb = self.gateway.embed(role, &payload).await?;
        self.cache.put(key, &emb.values)?;
        Ok(emb)
    }

    /// Asks the verifier one yes/no question about one image. Answers are
    /// cached by content hash and question digest; unparseable answers come
    /// back as [`Answer::Ambiguous`].
    pub async fn ask_verifier(&self, image: &LoadedImage, question: &str) -> Result<Answer> {
        let backend = self.gateway.backend_id(BackendRole::Verifier)?;
        let key = format!(
            "verify:{backend}:{}:{}",
            image.record.content_hash,
            content_hash(question.as_bytes())
        );
        if let Some(hit) = self.cache.get::<Answer>(&key) {
            return Ok(hit);
        }
        let req = ChatRequest::new(
            vec![Message::user(vec![
                Part::Image(Self::attachment(image)),
                Part::Text(self.prompts.render_verify(question)?),
            ])],
            self.sampling(),
        );
        let raw = self.gateway.complete(BackendRole::Verifier, &req).await?.text;
        let answer = match parse_yes_no(&raw) {
            Ok(true) => Answer::Yes,
            Ok(false) => Answer::No,
            Err(_) => {
                tracing::debug!(question, raw, "ambiguous verifier answer");
                Answer::Ambiguous
            }
        };
        self.cache.put(&key, &answer)?;
        Ok(answer)
    }

    /// Calls the reasoner and parses its reply. On a parse failure the
    /// prompt is re-sent once with `nudge` as a system message; a second
    /// failure is returned. The flag reports whether a re-prompt happened.
    pub async fn reason<T>(
        &self,
        prompt: &str,
        nudge: &str,
        parse: impl Fn(&str) -> Result<T>,
    ) -> Result<(T, bool)> {
        let user = Message::user(vec![Part::Text(prompt.to_string())]);
        let req = ChatRequest::new(vec![user.clone()], self.sampling());
        let first = self.gateway.complete(BackendRole::Reasoner, &req).await?;
        match parse(&first.text) {
            Ok(v) => Ok((v, false)),
            Err(err @ Error::Parse { .. }) => {
                tracing::warn!("re-prompting reasoner after parse failure: {err}");
                let retry = ChatRequest::new(vec![Message::system(nudge), user], self.sampling());
                let second = self.gateway.complete(BackendRole::Reasoner, &retry).await?;
                parse(&second.text).map(|v| (v, true))
            }
            Err(other) => Err(other),
        }
    }
}

/// The question a verifier request carries, for mocks and logs.
pub fn question_of(req: &ChatRequest) -> String {
    verifier_question(&req.user_text()).to_string()
}
