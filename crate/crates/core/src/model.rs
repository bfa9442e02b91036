//! Shared domain types: queries, synthesized descriptions, propositions and
//! the ranked candidate list that carries every stage's annotations.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hex SHA-256 of `bytes`. Used as the cache key for anything derived from
/// image content or prompt text.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One image of the database (or a reference image supplied with a query).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub uri: String,
    /// Empty when not yet known; filled in once the bytes are loaded.
    #[serde(default)]
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            uri: uri.into(),
            content_hash: String::new(),
            caption: None,
        }
    }

    /// Builds a record whose hash is taken from `bytes`.
    pub fn from_bytes(id: impl Into<String>, uri: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            id: id.into(),
            uri: uri.into(),
            content_hash: content_hash(bytes),
            caption: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub dim: usize,
    pub normalized: bool,
}

impl Embedding {
    /// Wraps raw encoder output, checking shape and finiteness.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedResponse(
                "embedding contains non-finite values".into(),
            ));
        }
        let dim = values.len();
        Ok(Self {
            values,
            dim,
            normalized: false,
        })
    }

    /// L2-normalizes in place. Zero vectors are rejected.
    pub fn normalize(mut self) -> Result<Self> {
        let norm = l2_norm(&self.values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::MalformedResponse("zero-norm embedding".into()));
        }
        for v in &mut self.values {
            *v = (*v as f64 / norm) as f32;
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

pub(crate) fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryKind {
    #[serde(rename = "TIR", alias = "tir")]
    Tir,
    #[serde(rename = "CIR", alias = "cir")]
    Cir,
    #[serde(rename = "ChatIR", alias = "chatir", alias = "chat_ir")]
    ChatIr,
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryKind::Tir => "TIR",
            QueryKind::Cir => "CIR",
            QueryKind::ChatIr => "ChatIR",
        })
    }
}

impl std::str::FromStr for QueryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "tir" => Ok(QueryKind::Tir),
            "cir" => Ok(QueryKind::Cir),
            "chatir" | "chat" => Ok(QueryKind::ChatIr),
            other => Err(Error::Config(format!("unknown query kind {other:?}"))),
        }
    }
}

/// Unified input for text-to-image, composed and chat-based retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub kind: QueryKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_image: Option<ImageRecord>,
    /// Prior dialog turns, oldest first.
    #[serde(default)]
    pub dialog: Vec<String>,
}

impl RetrievalQuery {
    pub fn tir(text: impl Into<String>) -> Self {
        Self {
            kind: QueryKind::Tir,
            text: text.into(),
            reference_image: None,
            dialog: Vec::new(),
        }
    }

    pub fn cir(text: impl Into<String>, reference: ImageRecord) -> Self {
        Self {
            kind: QueryKind::Cir,
            text: text.into(),
            reference_image: Some(reference),
            dialog: Vec::new(),
        }
    }

    pub fn chat(text: impl Into<String>, dialog: Vec<String>) -> Self {
        Self {
            kind: QueryKind::ChatIr,
            text: text.into(),
            reference_image: None,
            dialog,
        }
    }
}

/// Checks the kind-specific shape of a query.
///
/// Chat queries are checked with `round` = number of rounds already
/// completed in their session; a first-round chat query may have an empty
/// dialog, later ones may not.
pub fn validate_query(query: &RetrievalQuery) -> Result<()> {
    validate_query_at_round(query, 0)
}

pub fn validate_query_at_round(query: &RetrievalQuery, round: usize) -> Result<()> {
    if query.text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    match query.kind {
        QueryKind::Cir if query.reference_image.is_none() => Err(Error::MissingReference),
        QueryKind::Tir if query.reference_image.is_some() => Err(Error::UnexpectedReference),
        QueryKind::ChatIr if round > 0 && query.dialog.is_empty() => Err(Error::EmptyDialog),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstructionKind {
    Addition,
    Removal,
    Modification,
    Comparison,
    Retention,
}

impl InstructionKind {
    pub const ALL: [InstructionKind; 5] = [
        InstructionKind::Addition,
        InstructionKind::Removal,
        InstructionKind::Modification,
        InstructionKind::Comparison,
        InstructionKind::Retention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InstructionKind::Addition => "Addition",
            InstructionKind::Removal => "Removal",
            InstructionKind::Modification => "Modification",
            InstructionKind::Comparison => "Comparison",
            InstructionKind::Retention => "Retention",
        }
    }

    /// Case-insensitive label lookup.
    pub fn from_label(label: &str) -> Option<Self> {
        let label = label.trim().trim_matches(|c: char| !c.is_alphanumeric());
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(label))
    }
}

impl fmt::Display for InstructionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single operation on visual elements, e.g. "Addition: Make the woman
/// holding a baby."
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicInstruction {
    pub kind: InstructionKind,
    pub text: String,
}

impl AtomicInstruction {
    pub fn new(kind: InstructionKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
        }
    }
}

/// Target image descriptions at three granularities: core elements,
/// enhanced details and comprehensive synthesis.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetDescriptions {
    pub core_elements: String,
    pub enhanced_details: String,
    pub comprehensive_synthesis: String,
}

impl TargetDescriptions {
    pub fn new(
        core_elements: impl Into<String>,
        enhanced_details: impl Into<String>,
        comprehensive_synthesis: impl Into<String>,
    ) -> Self {
        Self {
            core_elements: core_elements.into(),
            enhanced_details: enhanced_details.into(),
            comprehensive_synthesis: comprehensive_synthesis.into(),
        }
    }

    /// The three texts in fixed CE, ED, CS order.
    pub fn as_array(&self) -> [&str; 3] {
        [
            &self.core_elements,
            &self.enhanced_details,
            &self.comprehensive_synthesis,
        ]
    }
}

/// A statement, its yes/no question form and the truth value the target
/// image should exhibit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposition {
    pub statement: String,
    pub question: String,
    pub truth_value: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
}

/// One candidate with the keys every stage produced for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: String,
    pub stage1_score: f64,
    /// Satisfied proposition count; -1 marks a candidate whose verification
    /// failed at the backend.
    #[serde(default)]
    pub stage2_count: Option<i32>,
    #[serde(default)]
    pub stage3_flag: Option<bool>,
    /// 1-based position in the Stage-1 ranking; the universal tiebreaker.
    pub stage1_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorVerdict {
    pub image_id: String,
    pub accepted: bool,
    pub justification: String,
}

/// Everything the pipeline decided along the way.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub atomic_instructions: Vec<AtomicInstruction>,
    pub descriptions: TargetDescriptions,
    pub propositions: Vec<Proposition>,
    pub evaluator_verdicts: Vec<EvaluatorVerdict>,
    /// Free-form notes (fallbacks taken, re-prompts, degenerate cases).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    pub stage: Stage,
    pub trace: StageTrace,
}

/// Stage-1 order: score descending, then Stage-1 rank ascending.
pub(crate) fn cmp_stage1(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.stage1_score
        .total_cmp(&a.stage1_score)
        .then(a.stage1_rank.cmp(&b.stage1_rank))
}

/// Stage-2 order: count descending (failures at -1 sort last), then
/// Stage-1 rank ascending.
pub(crate) fn cmp_stage2(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    let ca = a.stage2_count.unwrap_or(-1);
    let cb = b.stage2_count.unwrap_or(-1);
    cb.cmp(&ca).then(a.stage1_rank.cmp(&b.stage1_rank))
}

impl RankedList {
    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.image_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based position of `image_id`, if present.
    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.image_id == image_id)
            .map(|p| p + 1)
    }

    /// Checks that the entries obey the ordering of the list's stage.
    pub fn is_well_ordered(&self) -> bool {
        match self.stage {
            Stage::Stage1 => strictly_sorted(&self.entries, cmp_stage1),
            Stage::Stage2 => stage2_ordered(&self.entries),
            Stage::Stage3 => {
                let rest = match self.entries.first() {
                    Some(e) if e.stage3_flag == Some(true) => &self.entries[1..],
                    _ => &self.entries[..],
                };
                // The promoted entry left the verified block, so only the
                // relative order of the rest is checked.
                stage2_ordered(rest)
            }
        }
    }

    /// Top `n` entries, trace retained.
    pub fn truncated(&self, n: usize) -> RankedList {
        RankedList {
            entries: self.entries.iter().take(n).cloned().collect(),
            stage: self.stage,
            trace: self.trace.clone(),
        }
    }
}

fn strictly_sorted(entries: &[RankedEntry], cmp: fn(&RankedEntry, &RankedEntry) -> Ordering) -> bool {
    entries
        .windows(2)
        .all(|w| cmp(&w[0], &w[1]) == Ordering::Less)
}

fn stage2_ordered(entries: &[RankedEntry]) -> bool {
    let block = entries
        .iter()
        .take_while(|e| e.stage2_count.is_some())
        .count();
    let (verified, rest) = entries.split_at(block);
    strictly_sorted(verified, cmp_stage2)
        && rest.iter().all(|e| e.stage2_count.is_none())
        && rest.windows(2).all(|w| w[0].stage1_rank < w[1].stage1_rank)
}
