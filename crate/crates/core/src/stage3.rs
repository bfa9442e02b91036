//! Stage 3: show the evaluator the reference (left) and each of the top-α
//! candidates (right) in turn, stop at the first acceptance and move that
//! candidate to the front.

use crate::engine::{Engine, LoadedImage};
use crate::error::Result;
use crate::gateway::parse::parse_evaluator_output;
use crate::gateway::{BackendRole, ChatRequest, Message, Part};
use crate::index::EmbeddingIndex;
use crate::model::{EvaluatorVerdict, ImageRecord, RankedList, Stage};

/// One evaluator call. Any failure (backend, load, unparseable reply)
/// counts as a rejection with the reason in the justification.
pub async fn evaluate_pairwise(
    engine: &Engine,
    reference: Option<&LoadedImage>,
    candidate: &LoadedImage,
    instruction: &str,
) -> (bool, String) {
    let outcome: Result<(bool, String)> = async {
        let mut parts = Vec::with_capacity(3);
        if let Some(r) = reference {
            parts.push(Part::Image(Engine::attachment(r)));
        }
        parts.push(Part::Image(Engine::attachment(candidate)));
        parts.push(Part::Text(engine.prompts.render_prompt3(instruction)?));
        let req = ChatRequest::new(vec![Message::user(parts)], engine.sampling());
        let raw = engine.gateway.complete(BackendRole::Evaluator, &req).await?.text;
        parse_evaluator_output(&raw)
    }
    .await;
    outcome.unwrap_or_else(|err| {
        tracing::warn!(candidate = %candidate.record.id, "evaluator verdict treated as No: {err}");
        (false, format!("rejected: {err}"))
    })
}

/// Applies sequential verdicts to the first `alpha` entries: the first
/// accepted entry moves to the front, everything else keeps its order.
/// Verdicts past the first acceptance or past `alpha` are ignored.
pub fn promote(stage2: &RankedList, verdicts: &[bool], alpha: usize) -> RankedList {
    let mut entries = stage2.entries.clone();
    let considered = verdicts.len().min(alpha).min(entries.len());
    let accepted = verdicts[..considered].iter().position(|&v| v);
    let evaluated = accepted.map_or(considered, |j| j + 1);
    for (e, &v) in entries.iter_mut().zip(verdicts).take(evaluated) {
        e.stage3_flag = Some(v);
    }
    if let Some(j) = accepted {
        entries[..=j].rotate_right(1);
    }
    RankedList {
        entries,
        stage: Stage::Stage3,
        trace: stage2.trace.clone(),
    }
}

/// Sequential evaluation with early stop, then promotion.
pub async fn run_stage3(
    engine: &Engine,
    index: &EmbeddingIndex,
    stage2: &RankedList,
    reference: Option<&ImageRecord>,
    instruction: &str,
) -> Result<RankedList> {
    let alpha = engine.config.alpha_evaluate;
    let reference = match reference {
        Some(r) => Some(engine.load(r).await?),
        None => None,
    };
    let mut verdicts = Vec::new();
    let mut trace_verdicts = Vec::new();
    let mut notes = Vec::new();
    for entry in stage2.entries.iter().take(alpha) {
        let (accepted, justification) = match engine.load(index.record(&entry.image_id)?).await {
            Ok(candidate) => {
                if reference
                    .as_ref()
                    .is_some_and(|r| r.record.content_hash == candidate.record.content_hash)
                {
                    notes.push(format!(
                        "stage3: candidate {} is identical to the reference image",
                        entry.image_id
                    ));
                }
                evaluate_pairwise(engine, reference.as_ref(), &candidate, instruction).await
            }
            Err(err) => (false, format!("rejected: {err}")),
        };
        verdicts.push(accepted);
        trace_verdicts.push(EvaluatorVerdict {
            image_id: entry.image_id.clone(),
            accepted,
            justification,
        });
        if accepted {
            break;
        }
    }
    let mut ranking = promote(stage2, &verdicts, alpha);
    ranking.trace.evaluator_verdicts = trace_verdicts;
    ranking.trace.notes.extend(notes);
    Ok(ranking)
}
