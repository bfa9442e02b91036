//! The three stages chained over one adapted query.

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::Result;
use crate::index::EmbeddingIndex;
use crate::model::{ImageRecord, RankedList, Stage};
use crate::stage1::{run_stage1, Stage1Result};
use crate::stage2::{run_stage2, VerificationMatrix};
use crate::stage3::run_stage3;

/// What every task reduces to after adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineInput {
    pub instruction: String,
    pub ref_desc: String,
    /// Shown to the evaluator on the left; absent for text-only tasks.
    #[serde(default)]
    pub reference_image: Option<ImageRecord>,
    #[serde(default)]
    pub evaluator_instruction: EvaluatorText,
}

/// Which text the evaluator judges candidates against.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorText {
    /// The raw instruction.
    #[default]
    Instruction,
    /// This query's comprehensive synthesis (used for chat rounds, whose
    /// latest turn alone is not a complete target description).
    Synthesis,
    Custom(String),
}

impl PipelineInput {
    pub fn new(instruction: impl Into<String>, ref_desc: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            ref_desc: ref_desc.into(),
            reference_image: None,
            evaluator_instruction: EvaluatorText::Instruction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub stage1: Stage1Result,
    #[serde(default)]
    pub verification: Option<VerificationMatrix>,
    /// Final ranking over the whole database, trace included.
    pub ranking: RankedList,
}

/// Runs stages 1 through `last`.
pub async fn run_pipeline(
    engine: &Engine,
    index: &EmbeddingIndex,
    input: &PipelineInput,
    last: Stage,
) -> Result<PipelineOutput> {
    let stage1 = run_stage1(engine, index, &input.instruction, &input.ref_desc).await?;
    if last == Stage::Stage1 {
        return Ok(PipelineOutput {
            ranking: stage1.ranking.clone(),
            stage1,
            verification: None,
        });
    }
    let stage2 = run_stage2(engine, index, &stage1.ranking, &input.instruction).await?;
    if last == Stage::Stage2 {
        return Ok(PipelineOutput {
            stage1,
            verification: Some(stage2.verification),
            ranking: stage2.ranking,
        });
    }
    let evaluator_instruction = match &input.evaluator_instruction {
        EvaluatorText::Instruction => input.instruction.as_str(),
        EvaluatorText::Synthesis => stage1.descriptions.comprehensive_synthesis.as_str(),
        EvaluatorText::Custom(text) => text.as_str(),
    };
    let ranking = run_stage3(
        engine,
        index,
        &stage2.ranking,
        input.reference_image.as_ref(),
        evaluator_instruction,
    )
    .await?;
    Ok(PipelineOutput {
        stage1,
        verification: Some(stage2.verification),
        ranking,
    })
}

impl Stage {
    pub fn from_number(n: u8) -> Option<Stage> {
        match n {
            1 => Some(Stage::Stage1),
            2 => Some(Stage::Stage2),
            3 => Some(Stage::Stage3),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
            Stage::Stage3 => 3,
        }
    }
}
