//! Synthetic corpus and ground-truth-driven mock backends shared by the
//! integration and acceptance tests.
//!
//! Every image is an (object, color) pair whose bytes spell out both
//! attributes, so each mock role can answer exactly from the bytes or text
//! it is handed. Color shades run light to dark: yellow, green, red, blue.
#![allow(dead_code)]

use std::sync::Arc;

use lgir_core::config::PipelineConfig;
use lgir_core::engine::{question_of, Engine};
use lgir_core::gateway::mock::{hash_unit_vector, query_atomic_instructions, query_field, MockBackend};
use lgir_core::gateway::parse::{canonical_stage1_json, canonical_stage2_text};
use lgir_core::config::GatewayConfig;
use lgir_core::gateway::{BackendRole, ChatRequest, Gateway, ImageAttachment};
use lgir_core::images::data_uri;
use lgir_core::index::{ingest, EmbeddingIndex};
use lgir_core::model::{AtomicInstruction, ImageRecord, InstructionKind, Proposition, TargetDescriptions};
use lgir_core::prompts::BLANK_REFERENCE;

pub const OBJECTS: [&str; 8] = ["dog", "cat", "car", "bicycle", "chair", "lamp", "boat", "tree"];
pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const SHADES: [&str; 4] = ["yellow", "green", "red", "blue"];
pub const DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attrs {
    pub object: Option<&'static str>,
    pub color: Option<&'static str>,
}

pub fn attrs(text: &str) -> Attrs {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_ascii_alphabetic()).collect();
    Attrs {
        object: OBJECTS.into_iter().find(|o| words.contains(o)),
        color: COLORS.into_iter().find(|c| words.contains(c)),
    }
}

pub fn image_id(object: &str, color: &str) -> String {
    format!("{object}-{color}")
}

pub fn image_bytes(object: &str, color: &str) -> Vec<u8> {
    format!("synthetic-image:{object}:{color}").into_bytes()
}

pub fn image_attrs(bytes: &[u8]) -> Option<Attrs> {
    let text = std::str::from_utf8(bytes).ok()?.strip_prefix("synthetic-image:")?;
    let (o, c) = text.split_once(':')?;
    Some(Attrs {
        object: OBJECTS.into_iter().find(|x| *x == o),
        color: COLORS.into_iter().find(|x| *x == c),
    })
}

/// The 32 images, object-major: dog-red, dog-blue, dog-green, dog-yellow, cat-red, ...
pub fn corpus() -> Vec<ImageRecord> {
    OBJECTS
        .iter()
        .flat_map(|o| COLORS.iter().map(move |c| (o, c)))
        .map(|(o, c)| {
            let bytes = image_bytes(o, c);
            ImageRecord::new(image_id(o, c), data_uri("application/octet-stream", &bytes))
        })
        .collect()
}

pub fn record(object: &str, color: &str) -> ImageRecord {
    corpus()
        .into_iter()
        .find(|r| r.id == image_id(object, color))
        .expect("in corpus")
}

fn phrase(a: Attrs) -> String {
    match (a.color, a.object) {
        (Some(c), Some(o)) => format!("{c} {o}"),
        (None, Some(o)) => o.to_string(),
        (Some(c), None) => format!("{c} thing"),
        (None, None) => "scene".to_string(),
    }
}

fn features(a: Attrs, with_color: bool) -> Option<Vec<f32>> {
    let mut v = vec![0.0f32; DIM];
    let mut any = false;
    if let Some(o) = a.object {
        v[OBJECTS.iter().position(|x| *x == o).unwrap()] = 1.0;
        any = true;
    }
    if with_color {
        if let Some(c) = a.color {
            v[8 + COLORS.iter().position(|x| *x == c).unwrap()] = 1.0;
            any = true;
        }
    }
    any.then_some(v)
}

fn darker(color: &str) -> Option<&'static str> {
    let i = SHADES.iter().position(|s| *s == color)?;
    SHADES.get(i + 1).copied()
}

fn stage1_reply(instruction: &str, reference: &str) -> String {
    let ia = attrs(instruction);
    let blank = reference.trim() == BLANK_REFERENCE;
    let ra = if blank { Attrs { object: None, color: None } } else { attrs(reference) };
    let is_darker = instruction.contains("darker");
    let object = ia.object.or(ra.object);
    if is_darker {
        let o = object.unwrap_or("object");
        let text = format!("Make the {o} one shade darker than in the reference image.");
        let desc = format!("A darker {o} than the reference.");
        return canonical_stage1_json(
            &[AtomicInstruction::new(InstructionKind::Comparison, text)],
            &TargetDescriptions::new(desc.clone(), desc.clone(), desc),
        );
    }
    let target = Attrs {
        object,
        color: ia.color.or(ra.color),
    };
    let p = phrase(target);
    let atomic = if blank {
        AtomicInstruction::new(InstructionKind::Addition, format!("Add a {p}."))
    } else if ia.color.is_some() {
        AtomicInstruction::new(InstructionKind::Modification, format!("Change the {} to {}.", phrase(Attrs { color: None, ..target }), ia.color.unwrap()))
    } else {
        AtomicInstruction::new(InstructionKind::Retention, format!("Keep the {p}."))
    };
    let desc = format!("A {p}.");
    canonical_stage1_json(&[atomic], &TargetDescriptions::new(desc.clone(), desc.clone(), desc))
}

fn stage2_reply(atomic: &[AtomicInstruction]) -> String {
    let mut props: Vec<Proposition> = Vec::new();
    let mut push = |statement: String, question: String, truth_value: bool| {
        if !props.iter().any(|p| p.question == question) {
            props.push(Proposition { statement, question, truth_value });
        }
    };
    for a in atomic {
        let at = attrs(&a.text);
        let o = at.object.unwrap_or("object");
        if a.kind == InstructionKind::Comparison {
            push(format!("There is a {o}."), format!("Is there a {o}?"), true);
            push(
                format!("The {o} is darker than in the reference image."),
                format!("Is the {o} darker than in the reference image?"),
                true,
            );
            continue;
        }
        let present = a.kind != InstructionKind::Removal;
        push(format!("There is a {o}."), format!("Is there a {o}?"), present);
        if let (Some(c), true) = (at.color, present) {
            push(format!("The {o} is {c}."), format!("Is the {o} {c}?"), true);
        }
    }
    canonical_stage2_text(&props)
}

fn image_of(att: &ImageAttachment) -> Option<Attrs> {
    match att {
        ImageAttachment::Data { bytes, .. } => image_attrs(bytes),
        ImageAttachment::Uri(_) => None,
    }
}

fn verifier_reply(req: &ChatRequest) -> String {
    let question = question_of(req);
    let Some(img) = req.images().next().and_then(image_of) else {
        return "I cannot see an image.".into();
    };
    if question.contains("darker") {
        return "I cannot tell from a single image.".into();
    }
    let q = attrs(&question);
    let yes = match (q.object, q.color) {
        (Some(o), None) => img.object == Some(o),
        (Some(o), Some(c)) => img.object == Some(o) && img.color == Some(c),
        _ => false,
    };
    if yes { "Yes." } else { "No." }.into()
}

fn evaluator_instruction(text: &str) -> Option<&str> {
    let start = text.find("<INSTRUCTION> \"")? + "<INSTRUCTION> \"".len();
    let end = text[start..].find('"')?;
    Some(&text[start..start + end])
}

fn evaluator_reply(req: &ChatRequest) -> String {
    let text = req.user_text();
    let instruction = evaluator_instruction(&text).unwrap_or_default();
    let images: Vec<Attrs> = req.images().filter_map(image_of).collect();
    let (reference, candidate) = match images.as_slice() {
        [c] => (None, *c),
        [r, c] => (Some(*r), *c),
        _ => return "ANSWER: No\nNo candidate image.".into(),
    };
    let ia = attrs(instruction);
    let object = ia.object.or(reference.and_then(|r| r.object));
    let color = if instruction.contains("darker") {
        reference.and_then(|r| r.color).and_then(darker)
    } else {
        ia.color.or(reference.and_then(|r| r.color))
    };
    let ok = candidate.object == object && color.is_none_or(|c| candidate.color == Some(c));
    if ok {
        "ANSWER: Yes\nThe candidate matches the instruction.".into()
    } else {
        "ANSWER: No\nThe candidate does not match the instruction.".into()
    }
}

/// Oracle mock: every role answers from ground truth. With `full_embeddings`
/// false, both encoders see only the object, never the color.
pub fn oracle_mock(full_embeddings: bool) -> MockBackend {
    MockBackend::new()
        .with_id("synthetic-oracle")
        .with_dim(DIM)
        .with_responder(|role, req| match role {
            BackendRole::Captioner => {
                let a = req.images().next().and_then(image_of)?;
                Some(format!("A {}.", phrase(a)))
            }
            BackendRole::Reasoner => {
                let prompt = req.user_text();
                match query_field(&prompt, "Reference Image") {
                    Some(reference) => Some(stage1_reply(&query_field(&prompt, "Instruction")?, &reference)),
                    None => Some(stage2_reply(&query_atomic_instructions(&prompt))),
                }
            }
            BackendRole::Verifier => Some(verifier_reply(req)),
            BackendRole::Evaluator => Some(evaluator_reply(req)),
            _ => None,
        })
        .with_text_embedder(move |t| {
            features(attrs(t), full_embeddings).or_else(|| Some(hash_unit_vector(t.as_bytes(), DIM)))
        })
        .with_image_embedder(move |b| {
            image_attrs(b)
                .and_then(|a| features(a, full_embeddings))
                .or_else(|| Some(hash_unit_vector(b, DIM)))
        })
}

pub fn engine_with(mock: Arc<MockBackend>) -> Engine {
    let gateway = Gateway::new(GatewayConfig {
        backoff_ms: 1,
        ..GatewayConfig::default()
    })
    .with_all(mock);
    Engine::new(Arc::new(gateway), PipelineConfig::all_mock())
}

pub async fn oracle_setup(full_embeddings: bool) -> (Arc<MockBackend>, Engine, EmbeddingIndex) {
    let mock = Arc::new(oracle_mock(full_embeddings));
    let engine = engine_with(mock.clone());
    let index = ingest(&engine, corpus()).await.expect("ingest synthetic corpus");
    (mock, engine, index)
}
