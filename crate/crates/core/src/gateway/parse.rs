//! Structured-output parsing for reasoner, verifier and evaluator replies.
//!
//! All parsers are pure. They tolerate prose around the payload, Markdown
//! fences and emphasis, and case differences in labels.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::{AtomicInstruction, InstructionKind, Proposition, TargetDescriptions};

const STAGE1: &str = "stage-1 reasoner";
const STAGE2: &str = "stage-2 reasoner";

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```[A-Za-z]*[ \t]*\r?\n(.*?)```").expect("valid regex"));
static QA_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^[ \t]*(?:[-*][ \t]*)?(?:\(?(\d+)[).][ \t]*)?\**Q\**:[ \t]*(.+?)[ \t]+\**A\**:[ \t]*(.+?)[ \t]*$")
        .expect("valid regex")
});
static NUMBERED_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^[ \t]*\((\d+)\)[ \t]*(.+?)[ \t]*$").expect("valid regex"));
static TRUTH_TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\(\s*(true|false)\s*\)").expect("valid regex"));

const KEY_ATOMIC: &[&str] = &["atomicinstructions", "atomicinstruction", "instructions"];
const KEY_CE: &[&str] = &["coreelements", "ce"];
const KEY_ED: &[&str] = &["enhanceddetails", "ed"];
const KEY_CS: &[&str] = &["comprehensivesynthesis", "cs"];

fn norm_key(k: &str) -> String {
    k.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Index just past the `}` that closes the object opening at `start`.
fn matching_brace(s: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Every top-level JSON object in `raw`, fenced blocks first.
fn json_objects(raw: &str) -> Vec<Map<String, Value>> {
    let mut found = Vec::new();
    let mut sources: Vec<&str> = FENCE
        .captures_iter(raw)
        .filter_map(|c| c.get(1).map(|m| m.as_str()))
        .collect();
    sources.push(raw);
    for src in sources {
        let mut pos = 0;
        while let Some(off) = src[pos..].find('{') {
            let start = pos + off;
            match matching_brace(src, start)
                .and_then(|end| serde_json::from_str::<Value>(&src[start..end]).ok().map(|v| (end, v)))
            {
                Some((end, Value::Object(map))) => {
                    found.push(map);
                    pos = end;
                }
                _ => pos = start + 1,
            }
        }
    }
    found
}

/// Depth-first search for the first key whose normalized form is in `names`.
fn find_key<'a>(map: &'a Map<String, Value>, names: &[&str]) -> Option<&'a Value> {
    for (k, v) in map {
        if names.contains(&norm_key(k).as_str()) {
            return Some(v);
        }
    }
    map.values().find_map(|v| match v {
        Value::Object(inner) => find_key(inner, names),
        _ => None,
    })
}

fn parse_atomic_entry(entry: &Value) -> Result<AtomicInstruction> {
    let (label, text) = match entry {
        Value::String(s) => {
            let (label, text) = s
                .split_once(':')
                .ok_or_else(|| Error::parse(STAGE1, format!("atomic instruction without type: {s:?}")))?;
            (label.to_string(), text.trim().to_string())
        }
        Value::Object(obj) => {
            let field = |names: &[&str]| {
                obj.iter()
                    .find(|(k, _)| names.contains(&norm_key(k).as_str()))
                    .and_then(|(_, v)| v.as_str())
                    .map(str::to_string)
            };
            match (
                field(&["type", "kind", "category"]),
                field(&["instruction", "text", "description", "operation", "content"]),
            ) {
                (Some(label), Some(text)) => (label, text),
                _ if obj.len() == 1 => {
                    let (k, v) = obj.iter().next().expect("one entry");
                    let text = v
                        .as_str()
                        .ok_or_else(|| Error::parse(STAGE1, "atomic instruction text is not a string"))?;
                    (k.clone(), text.to_string())
                }
                _ => return Err(Error::parse(STAGE1, format!("unrecognized atomic instruction {entry}"))),
            }
        }
        other => return Err(Error::parse(STAGE1, format!("unrecognized atomic instruction {other}"))),
    };
    let kind = InstructionKind::from_label(&label)
        .ok_or_else(|| Error::parse(STAGE1, format!("unknown instruction type {label:?}")))?;
    Ok(AtomicInstruction::new(kind, text.trim()))
}

fn description(map: &Map<String, Value>, names: &[&str], label: &str) -> Result<String> {
    match find_key(map, names) {
        Some(Value::String(s)) => Ok(s.trim().to_string()),
        Some(other) => Err(Error::parse(STAGE1, format!("{label} is not a string: {other}"))),
        None => Err(Error::parse(STAGE1, format!("missing {label:?}"))),
    }
}

/// Extracts atomic instructions and the three target descriptions from a
/// reasoner reply to the Stage-1 prompt.
pub fn parse_stage1_output(raw: &str) -> Result<(Vec<AtomicInstruction>, TargetDescriptions)> {
    let objects = json_objects(raw);
    let map = objects
        .iter()
        .find(|m| {
            find_key(m, KEY_CE).is_some()
                || find_key(m, KEY_CS).is_some()
                || find_key(m, KEY_ATOMIC).is_some()
        })
        .or_else(|| objects.first())
        .ok_or_else(|| Error::parse(STAGE1, "no JSON object found"))?;

    let atomic = match find_key(map, KEY_ATOMIC) {
        Some(Value::Array(items)) => items.iter().map(parse_atomic_entry).collect::<Result<Vec<_>>>()?,
        Some(Value::Null) => Vec::new(),
        Some(single @ (Value::Object(_) | Value::String(_))) => vec![parse_atomic_entry(single)?],
        Some(other) => return Err(Error::parse(STAGE1, format!("atomic instructions malformed: {other}"))),
        None => return Err(Error::parse(STAGE1, "missing \"Atomic Instructions\"")),
    };
    let descriptions = TargetDescriptions {
        core_elements: description(map, KEY_CE, "Core Elements")?,
        enhanced_details: description(map, KEY_ED, "Enhanced Details")?,
        comprehensive_synthesis: description(map, KEY_CS, "Comprehensive Synthesis")?,
    };
    Ok((atomic, descriptions))
}

/// The JSON object a well-behaved reasoner emits for Stage 1.
pub fn canonical_stage1_json(atomic: &[AtomicInstruction], descs: &TargetDescriptions) -> String {
    json!({
        "Atomic Instructions": atomic
            .iter()
            .map(|a| json!({"type": a.kind.as_str(), "instruction": a.text}))
            .collect::<Vec<_>>(),
        "Core Elements": descs.core_elements,
        "Enhanced Details": descs.enhanced_details,
        "Comprehensive Synthesis": descs.comprehensive_synthesis,
    })
    .to_string()
}

/// Extracts `(statement, question, truth)` triples from a reasoner reply to
/// the Stage-2 prompt.
///
/// Questions come from `Q: ... A: ...` lines; the truth value from a
/// `(True)`/`(False)` tag, falling back to the leading Yes/No of the answer.
/// Statements are the numbered lines preceding the first question; a
/// missing statement falls back to the question text.
pub fn parse_stage2_output(raw: &str) -> Result<Vec<Proposition>> {
    let first_q = QA_LINE.find(raw).map(|m| m.start()).unwrap_or(raw.len());
    let head = &raw[..first_q];
    let head = head
        .rfind("Step 1")
        .map(|i| &head[i..])
        .unwrap_or(head);
    let statements: HashMap<usize, String> = NUMBERED_LINE
        .captures_iter(head)
        .filter_map(|c| Some((c[1].parse().ok()?, c[2].trim_matches('*').trim().to_string())))
        .collect();

    let mut props = Vec::new();
    for (seq, cap) in QA_LINE.captures_iter(raw).enumerate() {
        let number: usize = cap
            .get(1)
            .and_then(|m| m.as_str().parse().ok())
            .unwrap_or(seq + 1);
        let question = cap[2].trim().to_string();
        let answer = &cap[3];
        let truth = match TRUTH_TAG.captures(answer) {
            Some(t) => t[1].eq_ignore_ascii_case("true"),
            None => match parse_yes_no(answer) {
                Ok(v) => v,
                Err(_) => continue,
            },
        };
        let statement = statements
            .get(&number)
            .cloned()
            .unwrap_or_else(|| question.clone());
        props.push(Proposition {
            statement,
            question,
            truth_value: truth,
        });
    }
    if props.is_empty() {
        return Err(Error::parse(STAGE2, "no propositions recovered"));
    }
    Ok(props)
}

/// The text a well-behaved reasoner emits for Stage 2.
pub fn canonical_stage2_text(props: &[Proposition]) -> String {
    let mut out = String::from("1. **Step 1.** Based on the atomic instructions, the statements are:\n");
    for (i, p) in props.iter().enumerate() {
        out.push_str(&format!("    ({}) {}\n", i + 1, p.statement));
    }
    out.push_str("\n2. **Step 2.** Based on step 1, the questions and answers are:\n");
    for (i, p) in props.iter().enumerate() {
        let (yn, tf) = if p.truth_value {
            ("Yes", "True")
        } else {
            ("No", "False")
        };
        out.push_str(&format!("    ({}) Q: {} A: {yn}. ({tf})\n", i + 1, p.question));
    }
    out
}

/// `true` for a leading "yes", `false` for a leading "no" (case and
/// punctuation ignored), [`Error::AmbiguousAnswer`] otherwise.
pub fn parse_yes_no(raw: &str) -> Result<bool> {
    let token: String = raw
        .split_whitespace()
        .next()
        .unwrap_or("")
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    match token.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(Error::AmbiguousAnswer(raw.chars().take(80).collect())),
    }
}

/// Parses `ANSWER: Yes|No` plus the explanation that follows it.
pub fn parse_evaluator_output(raw: &str) -> Result<(bool, String)> {
    let lines: Vec<&str> = raw.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        let stripped = line.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '#' | '-' | '>'));
        let Some(prefix) = stripped.get(..7) else {
            continue;
        };
        if !prefix.eq_ignore_ascii_case("answer:") {
            continue;
        }
        let rest = stripped[7..].trim_start_matches(|c: char| c.is_whitespace() || c == '*');
        let accepted = parse_yes_no(rest)?;
        let same_line = rest
            .split_once(char::is_whitespace)
            .map(|(_, tail)| tail.trim())
            .unwrap_or("");
        let mut justification: Vec<&str> = Vec::new();
        if !same_line.is_empty() {
            justification.push(same_line);
        }
        justification.extend(lines[i + 1..].iter().copied());
        return Ok((accepted, justification.join("\n").trim().to_string()));
    }
    Err(Error::AmbiguousAnswer(raw.chars().take(80).collect()))
}
