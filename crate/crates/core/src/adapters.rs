//! Reduces text-to-image, composed and chat retrieval to one
//! `(instruction, reference description)` pair, and keeps chat sessions.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::config::ChatRefMode;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::index::EmbeddingIndex;
use crate::model::{
    validate_query_at_round, AtomicInstruction, ImageRecord, QueryKind, RankedEntry, RankedList,
    RetrievalQuery, Stage, TargetDescriptions,
};
use crate::pipeline::{run_pipeline, EvaluatorText, PipelineInput, PipelineOutput};
use crate::prompts::BLANK_REFERENCE;

pub fn adapt_tir(text: &str) -> Result<(String, String)> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    Ok((text.to_string(), BLANK_REFERENCE.to_string()))
}

/// The reference description is the captioner's caption of the reference.
pub async fn adapt_cir(engine: &Engine, instruction: &str, reference: &ImageRecord) -> Result<(String, String)> {
    if instruction.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    if let Some(c) = reference.caption.as_deref().filter(|c| !c.trim().is_empty()) {
        return Ok((instruction.to_string(), c.to_string()));
    }
    let loaded = engine.load(reference).await?;
    Ok((instruction.to_string(), engine.caption(&loaded).await?))
}

/// Round 1 starts from the blank reference; later rounds from the
/// session's carried description.
pub fn adapt_chatir(session: &Session, feedback: &str) -> Result<(String, String)> {
    if feedback.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let ref_desc = if session.rounds.is_empty() {
        BLANK_REFERENCE.to_string()
    } else {
        session.current_ref_desc.clone()
    };
    Ok((feedback.to_string(), ref_desc))
}

/// A reference given only by id is looked up in the index.
pub fn resolve_reference(index: &EmbeddingIndex, reference: &ImageRecord) -> Result<ImageRecord> {
    if reference.uri.is_empty() {
        index.record(&reference.id).cloned()
    } else {
        Ok(reference.clone())
    }
}

/// Single-shot retrieval for a validated query. Chat queries replay their
/// dialog in a throwaway session, then run `text` as the final round.
pub async fn run_query(
    engine: &Engine,
    index: &EmbeddingIndex,
    query: &RetrievalQuery,
    last: Stage,
) -> Result<PipelineOutput> {
    validate_query_at_round(query, 0)?;
    match query.kind {
        QueryKind::Tir => {
            let (instruction, ref_desc) = adapt_tir(&query.text)?;
            run_pipeline(engine, index, &PipelineInput::new(instruction, ref_desc), last).await
        }
        QueryKind::Cir => {
            let reference = resolve_reference(
                index,
                query.reference_image.as_ref().ok_or(Error::MissingReference)?,
            )?;
            let (instruction, ref_desc) = adapt_cir(engine, &query.text, &reference).await?;
            let mut input = PipelineInput::new(instruction, ref_desc);
            input.reference_image = Some(reference);
            run_pipeline(engine, index, &input, last).await
        }
        QueryKind::ChatIr => {
            let mut session = Session::new("replay", QueryKind::ChatIr);
            let mut output = None;
            for turn in query.dialog.iter().chain(std::iter::once(&query.text)) {
                output = Some(run_session_round(engine, index, &mut session, turn, None, last).await?);
            }
            Ok(output.expect("at least one round"))
        }
    }
}

/// Stage-1 facts kept per round: the decomposition, the descriptions and
/// the head of the Stage-1 ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub atomic_instructions: Vec<AtomicInstruction>,
    pub descriptions: TargetDescriptions,
    pub top: Vec<RankedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub user_text: String,
    pub ref_desc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_image_id: Option<String>,
    pub stage1_result: Stage1Summary,
    /// Top `top_n` of the final ranking, with trace.
    pub final_ranking: RankedList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub kind: QueryKind,
    pub rounds: Vec<Round>,
    /// Reference description the next chat round starts from.
    pub current_ref_desc: String,
}

impl Session {
    pub fn new(session_id: impl Into<String>, kind: QueryKind) -> Self {
        Self {
            session_id: session_id.into(),
            kind,
            rounds: Vec::new(),
            current_ref_desc: BLANK_REFERENCE.to_string(),
        }
    }

    pub fn dialog(&self) -> Vec<String> {
        self.rounds.iter().map(|r| r.user_text.clone()).collect()
    }
}

/// Runs one query inside a session and appends the round. For chat
/// sessions the reference description is carried from the previous round
/// and the evaluator judges against this round's comprehensive synthesis.
pub async fn run_session_round(
    engine: &Engine,
    index: &EmbeddingIndex,
    session: &mut Session,
    text: &str,
    reference: Option<ImageRecord>,
    last: Stage,
) -> Result<PipelineOutput> {
    let query = RetrievalQuery {
        kind: session.kind,
        text: text.to_string(),
        reference_image: reference,
        dialog: session.dialog(),
    };
    validate_query_at_round(&query, session.rounds.len())?;
    let (input, reference_image_id) = match session.kind {
        QueryKind::ChatIr => {
            let (instruction, ref_desc) = adapt_chatir(session, text)?;
            let mut input = PipelineInput::new(instruction, ref_desc);
            input.evaluator_instruction = EvaluatorText::Synthesis;
            (input, None)
        }
        QueryKind::Tir => {
            let (instruction, ref_desc) = adapt_tir(text)?;
            (PipelineInput::new(instruction, ref_desc), None)
        }
        QueryKind::Cir => {
            let reference = resolve_reference(index, query.reference_image.as_ref().expect("validated"))?;
            let (instruction, ref_desc) = adapt_cir(engine, text, &reference).await?;
            let id = reference.id.clone();
            let mut input = PipelineInput::new(instruction, ref_desc);
            input.reference_image = Some(reference);
            (input, Some(id))
        }
    };
    let output = run_pipeline(engine, index, &input, last).await?;
    let top_n = engine.config.top_n;
    session.rounds.push(Round {
        user_text: text.to_string(),
        ref_desc: input.ref_desc.clone(),
        reference_image_id,
        stage1_result: Stage1Summary {
            atomic_instructions: output.stage1.atomic_instructions.clone(),
            descriptions: output.stage1.descriptions.clone(),
            top: output.stage1.ranking.entries.iter().take(top_n).cloned().collect(),
        },
        final_ranking: output.ranking.truncated(top_n),
    });
    if session.kind == QueryKind::ChatIr {
        session.current_ref_desc = match engine.config.chat_ref {
            ChatRefMode::Synthesis => output.stage1.descriptions.comprehensive_synthesis.clone(),
            ChatRefMode::Top1Caption => output
                .ranking
                .entries
                .first()
                .and_then(|e| index.caption_of(&e.image_id))
                .unwrap_or(BLANK_REFERENCE)
                .to_string(),
        };
    }
    Ok(output)
}

/// Sessions as JSON files (`<dir>/<id>.json`), or memory only when no
/// directory is given. Each session has its own lock so rounds of one
/// session run one at a time while distinct sessions proceed in parallel.
#[derive(Debug, Default)]
pub struct SessionStore {
    dir: Option<PathBuf>,
    open: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            open: Mutex::default(),
        })
    }

    pub fn create(&self, kind: QueryKind) -> Result<Arc<tokio::sync::Mutex<Session>>> {
        let session = Session::new(uuid::Uuid::new_v4().simple().to_string(), kind);
        self.persist(&session)?;
        let handle = Arc::new(tokio::sync::Mutex::new(session.clone()));
        self.open
            .lock()
            .expect("session map poisoned")
            .insert(session.session_id, handle.clone());
        Ok(handle)
    }

    /// The session's lock, loading it from disk on first use.
    pub fn get(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>> {
        if !valid_session_id(id) {
            return Err(Error::SessionNotFound(id.to_string()));
        }
        let mut open = self.open.lock().expect("session map poisoned");
        if let Some(h) = open.get(id) {
            return Ok(h.clone());
        }
        let path = self
            .path_of(id)
            .filter(|p| p.exists())
            .ok_or_else(|| Error::SessionNotFound(id.to_string()))?;
        let session: Session = serde_json::from_slice(&std::fs::read(path)?)?;
        let handle = Arc::new(tokio::sync::Mutex::new(session));
        open.insert(id.to_string(), handle.clone());
        Ok(handle)
    }

    /// Writes the session file atomically; no-op in memory mode.
    pub fn persist(&self, session: &Session) -> Result<()> {
        let Some(path) = self.path_of(&session.session_id) else {
            return Ok(());
        };
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(session)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    fn path_of(&self, id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.json")))
    }
}
