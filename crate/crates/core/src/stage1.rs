//! Stage 1: decompose the query into atomic instructions, synthesize target
//! descriptions at three granularities and rank the database by fused
//! text-to-text / text-to-image similarity.

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::gateway::parse::parse_stage1_output;
use crate::index::{argsort_desc, cosine_scores, EmbeddingIndex};
use crate::model::{
    AtomicInstruction, Embedding, InstructionKind, RankedEntry, RankedList, Stage, StageTrace,
    TargetDescriptions,
};

const JSON_NUDGE: &str = "Return valid JSON only.";

/// Parsed reasoner output plus the fallbacks applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub atomic_instructions: Vec<AtomicInstruction>,
    pub descriptions: TargetDescriptions,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Result {
    pub atomic_instructions: Vec<AtomicInstruction>,
    pub descriptions: TargetDescriptions,
    pub scores: Vec<f64>,
    pub ranking: RankedList,
}

/// Runs the Stage-1 prompt through the reasoner, re-prompting once on a
/// parse failure.
pub async fn synthesize(engine: &Engine, instruction: &str, ref_desc: &str) -> Result<Synthesis> {
    let prompt = engine.prompts.render_prompt1(instruction, ref_desc)?;
    let ((atomic, descriptions), reprompted) =
        engine.reason(&prompt, JSON_NUDGE, parse_stage1_output).await?;
    let mut synthesis = apply_fallbacks(instruction, atomic, descriptions);
    if reprompted {
        synthesis.notes.insert(0, "stage1: reasoner re-prompted after parse failure".into());
    }
    Ok(synthesis)
}

/// Fills the gaps a well-formed but incomplete reply can leave: no atomic
/// instructions, or empty descriptions.
pub fn apply_fallbacks(
    instruction: &str,
    mut atomic: Vec<AtomicInstruction>,
    mut descriptions: TargetDescriptions,
) -> Synthesis {
    let mut notes = Vec::new();
    if atomic.is_empty() {
        atomic.push(AtomicInstruction::new(InstructionKind::Retention, instruction.trim()));
        notes.push("stage1: no atomic instructions parsed; using a single Retention instruction".into());
    }
    for (name, text) in [
        ("core_elements", &mut descriptions.core_elements),
        ("enhanced_details", &mut descriptions.enhanced_details),
        ("comprehensive_synthesis", &mut descriptions.comprehensive_synthesis),
    ] {
        if text.trim().is_empty() {
            *text = instruction.trim().to_string();
            notes.push(format!("stage1: empty {name}; using the raw instruction"));
        }
    }
    Synthesis {
        atomic_instructions: atomic,
        descriptions,
        notes,
    }
}

/// Embeds the three descriptions (concurrently) and fuses their scores.
pub async fn fuse_scores(
    engine: &Engine,
    descriptions: &TargetDescriptions,
    index: &EmbeddingIndex,
    tau: f64,
) -> Result<Vec<f64>> {
    let [ce, ed, cs] = descriptions.as_array();
    let (ce, ed, cs) =
        futures::try_join!(engine.embed_text(ce), engine.embed_text(ed), engine.embed_text(cs))?;
    fuse_embeddings(&[ce, ed, cs], index, tau)
}

/// Dual-path score per image: the mean over granularities of
/// `tau * cos(v_g, caption) + (1 - tau) * cos(v_g, image)`, summed in the
/// order given.
pub fn fuse_embeddings(granularities: &[Embedding], index: &EmbeddingIndex, tau: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")));
    }
    if granularities.is_empty() {
        return Err(Error::Config("no description embeddings to fuse".into()));
    }
    let mut acc = vec![0.0f64; index.len()];
    for v in granularities {
        let text = cosine_scores(v, index.caption_vectors())?;
        let image = cosine_scores(v, index.image_vectors())?;
        for ((a, t), i) in acc.iter_mut().zip(&text).zip(&image) {
            *a += tau * t + (1.0 - tau) * i;
        }
    }
    let g = granularities.len() as f64;
    Ok(acc.into_iter().map(|a| (a / g).clamp(-1.0, 1.0)).collect())
}

/// Stable descending ranking of `scores`; `ids[j]` names image `j`.
pub fn rank_stage1<S: AsRef<str>>(scores: &[f64], ids: &[S]) -> RankedList {
    assert_eq!(scores.len(), ids.len(), "one id per score");
    let entries = argsort_desc(scores)
        .into_iter()
        .enumerate()
        .map(|(pos, j)| RankedEntry {
            image_id: ids[j].as_ref().to_string(),
            stage1_score: scores[j],
            stage2_count: None,
            stage3_flag: None,
            stage1_rank: pos + 1,
        })
        .collect();
    RankedList {
        entries,
        stage: Stage::Stage1,
        trace: StageTrace::default(),
    }
}

/// Synthesis, fusion and ranking in one call.
pub async fn run_stage1(
    engine: &Engine,
    index: &EmbeddingIndex,
    instruction: &str,
    ref_desc: &str,
) -> Result<Stage1Result> {
    if index.is_empty() {
        return Err(Error::Config("index is empty".into()));
    }
    let synthesis = synthesize(engine, instruction, ref_desc).await?;
    let scores = fuse_scores(engine, &synthesis.descriptions, index, engine.config.tau).await?;
    let ids: Vec<&str> = index.image_ids().collect();
    let mut ranking = rank_stage1(&scores, &ids);
    ranking.trace = StageTrace {
        atomic_instructions: synthesis.atomic_instructions.clone(),
        descriptions: synthesis.descriptions.clone(),
        notes: synthesis.notes,
        ..StageTrace::default()
    };
    Ok(Stage1Result {
        atomic_instructions: synthesis.atomic_instructions,
        descriptions: synthesis.descriptions,
        scores,
        ranking,
    })
}
