//! Assembly of the clinical instruction and the two contrastive worked
//! examples into a few-shot chat message sequence.
//!
//! The instruction has four sections (role, overview, subtask breakdown,
//! self-check). Wording lives in editable asset files; this module enforces
//! the structure: eleven breakdown entries in canonical order, each label
//! named exactly once, and worked examples whose ideal responses parse as
//! adherent with the polarity-defining labels in place.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parse::{self, ApproxTokenCounter, TokenCounter};
use crate::subtask::{ExtractionScheme, LabelValue, Subtask};

/// Guidance for one subtask inside the instruction breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskGuide {
    pub subtask: Subtask,
    pub guidance: String,
}

/// The four structural elements of the instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSpec {
    pub role_definition: String,
    pub task_overview: String,
    pub subtask_breakdown: Vec<SubtaskGuide>,
    pub qa_mechanism: String,
}

impl InstructionSpec {
    fn validate(&self) -> Result<()> {
        for (name, text) in [
            ("role_definition", &self.role_definition),
            ("task_overview", &self.task_overview),
            ("qa_mechanism", &self.qa_mechanism),
        ] {
            if text.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "instruction element '{name}' is empty"
                )));
            }
        }
        if self.subtask_breakdown.len() != 11 {
            return Err(Error::Validation(format!(
                "subtask breakdown must have 11 entries, found {}",
                self.subtask_breakdown.len()
            )));
        }
        for (guide, expected) in self.subtask_breakdown.iter().zip(Subtask::ALL) {
            if guide.subtask != expected {
                return Err(Error::Validation(format!(
                    "subtask breakdown out of canonical order: expected {expected}, found {}",
                    guide.subtask
                )));
            }
            if guide.guidance.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "subtask breakdown entry {expected} is empty"
                )));
            }
        }
        Ok(())
    }
}

/// Counts boundary-delimited `NAME:` mentions in `text`.
fn count_label_mentions(text: &str, name: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let needle: Vec<char> = name.chars().chain(std::iter::once(':')).collect();
    let mut count = 0;
    for i in 0..chars.len() {
        if i + needle.len() > chars.len() {
            break;
        }
        if chars[i..i + needle.len()] != needle[..] {
            continue;
        }
        if i > 0 && chars[i - 1].is_alphanumeric() {
            continue;
        }
        count += 1;
    }
    count
}

/// Renders the instruction text: role, overview, breakdown, self-check, in
/// that order. Deterministic; errors if the rendered breakdown does not
/// mention every canonical label exactly once.
pub fn build_instruction(spec: &InstructionSpec) -> Result<String> {
    spec.validate()?;
    let breakdown = spec
        .subtask_breakdown
        .iter()
        .map(|g| format!("{}: {}", g.subtask.name(), g.guidance.trim()))
        .collect::<Vec<_>>()
        .join("\n");
    for subtask in Subtask::ALL {
        let mentions = count_label_mentions(&breakdown, subtask.name());
        if mentions != 1 {
            return Err(Error::Validation(format!(
                "breakdown must mention label {} exactly once, found {mentions}",
                subtask.name()
            )));
        }
    }
    Ok(format!(
        "{}\n\n{}\n\n{}\n\n{}",
        spec.role_definition.trim(),
        spec.task_overview.trim(),
        breakdown,
        spec.qa_mechanism.trim()
    ))
}

/// Whether a worked example demonstrates a positive or negative case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// One worked example: an input post and a complete, adherent diagnosis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptExample {
    pub input_text: String,
    pub ideal_response: String,
    pub polarity: Polarity,
    /// Token count of the ideal response under the configured counter.
    pub token_count: usize,
}

impl PromptExample {
    pub fn new(
        input_text: String,
        ideal_response: String,
        polarity: Polarity,
        counter: &dyn TokenCounter,
    ) -> Result<Self> {
        let token_count = counter.count_tokens(&ideal_response);
        let example = Self {
            input_text,
            ideal_response,
            polarity,
            token_count,
        };
        example.validate()?;
        Ok(example)
    }

    /// The ideal response must parse adherent with all eleven labels, and
    /// its extracted labels must match the example's polarity: a positive
    /// case shows S2 = Yes and D = Yes, a negative case D = No and S = No.
    pub fn validate(&self) -> Result<()> {
        let parsed = parse::parse_response(&self.ideal_response);
        if !parsed.adherent {
            return Err(Error::Validation(format!(
                "{:?} example response is not adherent",
                self.polarity
            )));
        }
        let labels = parse::extract_labels(&parsed, ExtractionScheme::Ir);
        labels.require_complete()?;
        let expectations: &[(Subtask, LabelValue)] = match self.polarity {
            Polarity::Positive => &[(Subtask::S2, LabelValue::Yes), (Subtask::D, LabelValue::Yes)],
            Polarity::Negative => &[(Subtask::D, LabelValue::No), (Subtask::S, LabelValue::No)],
        };
        for (subtask, expected) in expectations {
            if labels.get(*subtask) != Some(*expected) {
                return Err(Error::Validation(format!(
                    "{:?} example must have {subtask} = {expected}, found {:?}",
                    self.polarity,
                    labels.get(*subtask)
                )));
            }
        }
        Ok(())
    }
}

/// Chat message role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// An ordered chat transcript: one system message, alternating user and
/// assistant turns for each worked example, ending with the target user
/// message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageSequence(pub Vec<Message>);

impl MessageSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn messages(&self) -> &[Message] {
        &self.0
    }

    pub fn validate(&self) -> Result<()> {
        let msgs = &self.0;
        if msgs.len() < 2 || !msgs.len().is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "message sequence must have even length >= 2, found {}",
                msgs.len()
            )));
        }
        if msgs[0].role != Role::System {
            return Err(Error::Validation("sequence must begin with a system message".into()));
        }
        for (i, msg) in msgs[1..].iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if msg.role != expected {
                return Err(Error::Validation(format!(
                    "message {} must have role {expected}, found {}",
                    i + 1,
                    msg.role
                )));
            }
        }
        if msgs.last().map(|m| m.role) != Some(Role::User) {
            return Err(Error::Validation("sequence must end with a user message".into()));
        }
        Ok(())
    }
}

/// Builds the few-shot sequence for one target text: system instruction,
/// then a user/assistant pair per worked example, then the target text
/// verbatim as the final user message.
pub fn build_fewshot_messages(
    sample_text: &str,
    instruction: &str,
    examples: &[PromptExample],
) -> Result<MessageSequence> {
    for example in examples {
        example.validate()?;
    }
    let mut messages = Vec::with_capacity(2 + 2 * examples.len());
    messages.push(Message::new(Role::System, instruction));
    for example in examples {
        messages.push(Message::new(Role::User, example.input_text.clone()));
        messages.push(Message::new(Role::Assistant, example.ideal_response.clone()));
    }
    messages.push(Message::new(Role::User, sample_text));
    let sequence = MessageSequence(messages);
    sequence.validate()?;
    Ok(sequence)
}

/// The instruction spec plus worked examples, as loaded from asset files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssets {
    pub instruction: InstructionSpec,
    pub examples: Vec<PromptExample>,
}

const BUILTIN_INSTRUCTION: &str = include_str!("../assets/instruction.txt");
const BUILTIN_POSITIVE_INPUT: &str = include_str!("../assets/examples/positive.input.txt");
const BUILTIN_POSITIVE_RESPONSE: &str = include_str!("../assets/examples/positive.response.txt");
const BUILTIN_NEGATIVE_INPUT: &str = include_str!("../assets/examples/negative.input.txt");
const BUILTIN_NEGATIVE_RESPONSE: &str = include_str!("../assets/examples/negative.response.txt");

impl PromptAssets {
    /// The assets bundled with the crate.
    pub fn builtin() -> Result<Self> {
        Self::from_texts(
            BUILTIN_INSTRUCTION,
            &[
                (BUILTIN_POSITIVE_INPUT, BUILTIN_POSITIVE_RESPONSE, Polarity::Positive),
                (BUILTIN_NEGATIVE_INPUT, BUILTIN_NEGATIVE_RESPONSE, Polarity::Negative),
            ],
        )
    }

    /// Loads editable assets from a directory laid out like the bundled
    /// ones: `instruction.txt` plus `examples/<polarity>.input.txt` and
    /// `examples/<polarity>.response.txt`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |rel: &str| -> Result<String> {
            std::fs::read_to_string(dir.join(rel)).map_err(|e| {
                Error::Validation(format!("cannot read asset '{rel}' in {}: {e}", dir.display()))
            })
        };
        let instruction = read("instruction.txt")?;
        let positive_in = read("examples/positive.input.txt")?;
        let positive_resp = read("examples/positive.response.txt")?;
        let negative_in = read("examples/negative.input.txt")?;
        let negative_resp = read("examples/negative.response.txt")?;
        Self::from_texts(
            &instruction,
            &[
                (&positive_in, &positive_resp, Polarity::Positive),
                (&negative_in, &negative_resp, Polarity::Negative),
            ],
        )
    }

    fn from_texts(instruction: &str, examples: &[(&str, &str, Polarity)]) -> Result<Self> {
        let instruction = parse_instruction_file(instruction)?;
        let counter = ApproxTokenCounter;
        let examples = examples
            .iter()
            .map(|(input, response, polarity)| {
                PromptExample::new(
                    input.trim_end().to_string(),
                    response.trim_end().to_string(),
                    *polarity,
                    &counter,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            instruction,
            examples,
        })
    }

    /// Renders the instruction text for this asset set.
    pub fn instruction_text(&self) -> Result<String> {
        build_instruction(&self.instruction)
    }
}

/// Parses the sectioned instruction file. Sections are introduced by
/// `[role]`, `[overview]`, `[subtasks]`, `[qa]` header lines; breakdown
/// entries start with a canonical label name and a colon.
fn parse_instruction_file(text: &str) -> Result<InstructionSpec> {
    let mut sections: Vec<(String, Vec<&str>)> = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') && trimmed.ends_with(']') {
            sections.push((trimmed[1..trimmed.len() - 1].to_lowercase(), Vec::new()));
        } else if let Some((_, body)) = sections.last_mut() {
            body.push(line);
        } else if !trimmed.is_empty() {
            return Err(Error::Validation(
                "instruction file must start with a [section] header".into(),
            ));
        }
    }
    let section = |name: &str| -> Result<String> {
        sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, body)| body.join("\n").trim().to_string())
            .ok_or_else(|| Error::Validation(format!("instruction file missing [{name}] section")))
    };

    let breakdown_text = section("subtasks")?;
    let mut breakdown: Vec<SubtaskGuide> = Vec::new();
    for line in breakdown_text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let entry = trimmed.split_once(':').and_then(|(name, rest)| {
            Subtask::from_name(name.trim()).map(|s| (s, rest.trim().to_string()))
        });
        match entry {
            Some((subtask, guidance)) => breakdown.push(SubtaskGuide { subtask, guidance }),
            None => match breakdown.last_mut() {
                // Continuation line of the previous entry.
                Some(last) => {
                    last.guidance.push(' ');
                    last.guidance.push_str(trimmed);
                }
                None => {
                    return Err(Error::Validation(format!(
                        "breakdown line does not start a labeled entry: '{trimmed}'"
                    )))
                }
            },
        }
    }

    let spec = InstructionSpec {
        role_definition: section("role")?,
        task_overview: section("overview")?,
        subtask_breakdown: breakdown,
        qa_mechanism: section("qa")?,
    };
    spec.validate()?;
    Ok(spec)
}
