//! Prompt templates for the reasoner, verifier, evaluator and captioner.
//!
//! Bodies ship as versioned resource files under `prompts/<version>/` and
//! are embedded at build time; [`PromptSet::from_dir`] loads an override
//! set from disk. Placeholders are written `[[NAME]]` and substituted in a
//! single pass, so bound values are never re-scanned.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DEFAULT_IN_CONTEXT_EXAMPLES;
use crate::error::{Error, Result};
use crate::model::AtomicInstruction;

pub const PROMPT_VERSION: &str = "v1";

/// Reference description used when a query has no reference image.
pub const BLANK_REFERENCE: &str = "A blank image.";

/// Line that introduces the live query at the end of reasoner prompts.
pub const QUERY_MARKER: &str = "Below is the query you need to solve:";

const EXAMPLE_SEPARATOR: &str = "\n=====\n";
const EXAMPLES_SLOT: &str = "IN_CONTEXT_EXAMPLES";

const PROMPT1: &str = include_str!("../prompts/v1/prompt1.txt");
const PROMPT1_EXAMPLES: &str = include_str!("../prompts/v1/prompt1_examples.txt");
const PROMPT2: &str = include_str!("../prompts/v1/prompt2.txt");
const PROMPT2_EXAMPLES: &str = include_str!("../prompts/v1/prompt2_examples.txt");
const PROMPT3: &str = include_str!("../prompts/v1/prompt3.txt");
const CAPTION: &str = include_str!("../prompts/v1/caption.txt");
const VERIFY: &str = include_str!("../prompts/v1/verify.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateId {
    Prompt1,
    Prompt2,
    Prompt3,
    Caption,
    Verify,
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: String,
    pub in_context_examples: Vec<String>,
}

impl PromptTemplate {
    pub fn new(template_id: TemplateId, body: impl Into<String>, examples: &str) -> Self {
        let in_context_examples = examples
            .split(EXAMPLE_SEPARATOR)
            .map(|e| e.trim_end_matches('\n').to_string())
            .filter(|e| !e.trim().is_empty())
            .collect();
        Self {
            template_id,
            body: body.into(),
            in_context_examples,
        }
    }

    /// Substitutes every `[[NAME]]` from `bindings`; the first `n_examples`
    /// in-context examples fill `[[IN_CONTEXT_EXAMPLES]]`.
    pub fn render(&self, bindings: &[(&str, &str)], n_examples: usize) -> Result<String> {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("[[") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let Some(end) = after.find("]]") else {
                return Err(Error::Template(format!(
                    "{}: unterminated placeholder",
                    self.template_id
                )));
            };
            let name = &after[..end];
            if name == EXAMPLES_SLOT {
                for example in self.in_context_examples.iter().take(n_examples) {
                    out.push_str("---\nHere is an example:\n");
                    out.push_str(example);
                    out.push('\n');
                }
            } else {
                let value = bindings
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| {
                        Error::Template(format!("{}: unfilled placeholder [[{name}]]", self.template_id))
                    })?;
                out.push_str(value);
            }
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// The full set of templates used by one pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub prompt1: PromptTemplate,
    pub prompt2: PromptTemplate,
    pub prompt3: PromptTemplate,
    pub caption: PromptTemplate,
    pub verify: PromptTemplate,
    pub n_examples: usize,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            prompt1: PromptTemplate::new(TemplateId::Prompt1, PROMPT1, PROMPT1_EXAMPLES),
            prompt2: PromptTemplate::new(TemplateId::Prompt2, PROMPT2, PROMPT2_EXAMPLES),
            prompt3: PromptTemplate::new(TemplateId::Prompt3, PROMPT3, ""),
            caption: PromptTemplate::new(TemplateId::Caption, CAPTION, ""),
            verify: PromptTemplate::new(TemplateId::Verify, VERIFY, ""),
            n_examples: DEFAULT_IN_CONTEXT_EXAMPLES,
        }
    }
}

impl PromptSet {
    /// Loads `prompt1.txt`, `prompt1_examples.txt`, ... from `dir`. Missing
    /// files fall back to the embedded versions.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str, fallback: &str| -> Result<String> {
            let path = dir.join(name);
            if path.exists() {
                Ok(std::fs::read_to_string(path)?)
            } else {
                Ok(fallback.to_string())
            }
        };
        Ok(Self {
            prompt1: PromptTemplate::new(
                TemplateId::Prompt1,
                read("prompt1.txt", PROMPT1)?,
                &read("prompt1_examples.txt", PROMPT1_EXAMPLES)?,
            ),
            prompt2: PromptTemplate::new(
                TemplateId::Prompt2,
                read("prompt2.txt", PROMPT2)?,
                &read("prompt2_examples.txt", PROMPT2_EXAMPLES)?,
            ),
            prompt3: PromptTemplate::new(TemplateId::Prompt3, read("prompt3.txt", PROMPT3)?, ""),
            caption: PromptTemplate::new(TemplateId::Caption, read("caption.txt", CAPTION)?, ""),
            verify: PromptTemplate::new(TemplateId::Verify, read("verify.txt", VERIFY)?, ""),
            n_examples: DEFAULT_IN_CONTEXT_EXAMPLES,
        })
    }

    pub fn with_examples(mut self, n: usize) -> Self {
        self.n_examples = n;
        self
    }

    pub fn render_prompt1(&self, instruction: &str, ref_desc: &str) -> Result<String> {
        require_text(instruction)?;
        require_text(ref_desc)?;
        self.prompt1.render(
            &[("INSTRUCTION", instruction), ("REF_IMAGE_DESC", ref_desc)],
            self.n_examples,
        )
    }

    pub fn render_prompt2(&self, instruction: &str, atomic: &[AtomicInstruction]) -> Result<String> {
        require_text(instruction)?;
        if atomic.is_empty() {
            return Err(Error::EmptyDecomposition);
        }
        let list = render_atomic_list(atomic);
        self.prompt2.render(
            &[("INSTRUCTION", instruction), ("ATOMIC_INST", &list)],
            self.n_examples,
        )
    }

    pub fn render_prompt3(&self, instruction: &str) -> Result<String> {
        require_text(instruction)?;
        self.prompt3.render(&[("INSTRUCTION", instruction)], 0)
    }

    pub fn render_caption(&self) -> Result<String> {
        self.caption.render(&[], 0)
    }

    pub fn render_verify(&self, question: &str) -> Result<String> {
        require_text(question)?;
        self.verify.render(&[("QUESTION", question)], 0)
    }
}

/// Recovers the question from a rendered verifier prompt.
pub fn verifier_question(rendered: &str) -> &str {
    let t = rendered.trim();
    t.strip_suffix("Answer with a single Yes or No.")
        .map(str::trim_end)
        .unwrap_or(t)
}

/// Numbered `(i) Kind: text` lines, each on its own indented line.
pub fn render_atomic_list(atomic: &[AtomicInstruction]) -> String {
    atomic
        .iter()
        .enumerate()
        .map(|(i, a)| format!("\n    ({}) {}: {}", i + 1, a.kind, a.text))
        .collect()
}

fn require_text(s: &str) -> Result<()> {
    if s.trim().is_empty() {
        Err(Error::EmptyText)
    } else {
        Ok(())
    }
}
