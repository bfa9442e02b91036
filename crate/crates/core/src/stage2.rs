//! Stage 2: turn atomic instructions into yes/no propositions, ask the
//! verifier each question about each of the top-k candidates, and stably
//! re-rank them by the number of propositions they satisfy.

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::Result;
use crate::gateway::parse::parse_stage2_output;
use crate::index::EmbeddingIndex;
use crate::model::{cmp_stage2, AtomicInstruction, Proposition, RankedList, Stage};

const QA_NUDGE: &str =
    "Return only the numbered question list, one line per proposition, in the form \"(i) Q: ...? A: Yes. (True)\".";

/// Count recorded for a candidate the verifier could not be reached for.
pub const FAILED_COUNT: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    Ambiguous,
}

impl Answer {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Answer::Yes => Some(true),
            Answer::No => Some(false),
            Answer::Ambiguous => None,
        }
    }
}

/// Verifier answers for the top-k candidates (rows) against the
/// propositions (columns). A row whose verification failed is empty and
/// carries [`FAILED_COUNT`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationMatrix {
    pub candidate_ids: Vec<String>,
    pub propositions: Vec<Proposition>,
    pub answers: Vec<Vec<Answer>>,
    pub counts: Vec<i32>,
}

/// Number of propositions whose answer matches its truth value.
/// Ambiguous answers never count.
pub fn count_satisfied(answers: &[Answer], truths: &[bool]) -> i32 {
    answers
        .iter()
        .zip(truths)
        .filter(|(a, &t)| a.as_bool() == Some(t))
        .count() as i32
}

pub async fn derive_propositions(
    engine: &Engine,
    instruction: &str,
    atomic: &[AtomicInstruction],
) -> Result<(Vec<Proposition>, bool)> {
    let prompt = engine.prompts.render_prompt2(instruction, atomic)?;
    engine.reason(&prompt, QA_NUDGE, parse_stage2_output).await
}

/// Asks every question about one image. Backend or load failures yield
/// `(vec![], FAILED_COUNT)`.
pub async fn verify_candidate(
    engine: &Engine,
    index: &EmbeddingIndex,
    image_id: &str,
    props: &[Proposition],
) -> (Vec<Answer>, i32) {
    let outcome: Result<Vec<Answer>> = async {
        let image = engine.load(index.record(image_id)?).await?;
        futures::future::try_join_all(props.iter().map(|p| engine.ask_verifier(&image, &p.question))).await
    }
    .await;
    match outcome {
        Ok(answers) => {
            let truths: Vec<bool> = props.iter().map(|p| p.truth_value).collect();
            let c = count_satisfied(&answers, &truths);
            (answers, c)
        }
        Err(err) => {
            tracing::warn!(image_id, "verification failed: {err}");
            (Vec::new(), FAILED_COUNT)
        }
    }
}

/// Reorders the first `k` entries by count descending, ties by Stage-1
/// rank; later entries keep their order. `counts[j]` belongs to entry `j`.
pub fn rerank_stage2(stage1: &RankedList, counts: &[i32], k: usize) -> RankedList {
    let k = k.min(stage1.entries.len());
    assert_eq!(counts.len(), k, "one count per verified candidate");
    let mut entries = stage1.entries.clone();
    for (e, &c) in entries.iter_mut().zip(counts) {
        e.stage2_count = Some(c);
    }
    entries[..k].sort_by(cmp_stage2);
    RankedList {
        entries,
        stage: Stage::Stage2,
        trace: stage1.trace.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Result {
    pub propositions: Vec<Proposition>,
    pub verification: VerificationMatrix,
    pub ranking: RankedList,
}

/// Propositions, k×M verification (concurrent, capped by the gateway) and
/// re-ranking.
pub async fn run_stage2(
    engine: &Engine,
    index: &EmbeddingIndex,
    stage1: &RankedList,
    instruction: &str,
) -> Result<Stage2Result> {
    let atomic = &stage1.trace.atomic_instructions;
    let (propositions, reprompted) = derive_propositions(engine, instruction, atomic).await?;
    let k = engine.config.k_verify.min(stage1.len());
    let candidate_ids: Vec<String> = stage1.entries[..k].iter().map(|e| e.image_id.clone()).collect();
    let rows = futures::future::join_all(
        candidate_ids
            .iter()
            .map(|id| verify_candidate(engine, index, id, &propositions)),
    )
    .await;
    let (answers, counts): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let mut ranking = rerank_stage2(stage1, &counts, k);
    ranking.trace.propositions = propositions.clone();
    if reprompted {
        ranking
            .trace
            .notes
            .push("stage2: reasoner re-prompted after parse failure".into());
    }
    let failed = counts.iter().filter(|&&c| c == FAILED_COUNT).count();
    if failed > 0 {
        ranking
            .trace
            .notes
            .push(format!("stage2: verification failed for {failed} candidate(s)"));
    }
    Ok(Stage2Result {
        verification: VerificationMatrix {
            candidate_ids,
            propositions: propositions.clone(),
            answers,
            counts,
        },
        propositions,
        ranking,
    })
}
