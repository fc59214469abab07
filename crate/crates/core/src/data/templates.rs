//! Instruction templates per task subtype and the tag instruction that
//! carries the soft-prompt placeholder.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::tokenizer::HINT_MARKER;
use crate::error::{Error, Result};
use crate::moa::TaskType;
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtype {
    Caption,
    Vqa,
    Vqg,
    Rec,
    Reg,
}

impl Subtype {
    pub const ALL: [Subtype; 5] = [
        Subtype::Caption,
        Subtype::Vqa,
        Subtype::Vqg,
        Subtype::Rec,
        Subtype::Reg,
    ];

    pub fn task(self) -> TaskType {
        match self {
            Subtype::Caption | Subtype::Vqa | Subtype::Vqg => TaskType::ImageLevel,
            Subtype::Rec | Subtype::Reg => TaskType::RegionLevel,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subtype::Caption => "caption",
            Subtype::Vqa => "vqa",
            Subtype::Vqg => "vqg",
            Subtype::Rec => "rec",
            Subtype::Reg => "reg",
        }
    }

    pub fn templates(self) -> &'static [&'static str] {
        match self {
            Subtype::Caption => CAPTION,
            Subtype::Vqa => VQA,
            Subtype::Vqg => VQG,
            Subtype::Rec => REC,
            Subtype::Reg => REG,
        }
    }

    /// Placeholder every template of this subtype substitutes, if any.
    pub fn slot(self) -> Option<&'static str> {
        match self {
            Subtype::Caption => None,
            Subtype::Vqa => Some("Question"),
            Subtype::Vqg => Some("Answer"),
            Subtype::Rec => Some("expr"),
            Subtype::Reg => Some("BBox"),
        }
    }

    /// Index of the instruction used by candidate-scoring evaluation, for
    /// subtypes that have a dedicated one.
    pub fn eval_template(self) -> Option<usize> {
        match self {
            Subtype::Caption => Some(CAPTION.len() - 1),
            Subtype::Vqa => Some(VQA.len() - 1),
            _ => None,
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subtype::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subtype {s:?}")))
    }
}

// The last caption and VQA entries are the evaluation instructions; they are
// part of the training pools so evaluation prompts are in-distribution.
const CAPTION: &[&str] = &[
    "Can you briefly explain what you see in the image?",
    "Could you use a few words to describe what you perceive in the photo?",
    "Please provide a short depiction of the picture.",
    "Using language, provide a short account of the image.",
    "Use a few words to illustrate what is happening in the picture.",
    "A short image description:",
];

const VQA: &[&str] = &[
    "Given the image, answer the following question with no more than three words. {Question}",
    "Based on the image, respond to this question with a short answer: {Question}. Answer:",
    "Use the provided image to answer the question: {Question} Provide your answer as short as possible:",
    "What is the answer to the following question? \"{Question}\"",
    "The question \"{Question}\" can be answered using the image. A short answer is",
    "Question: {Question} Short answer:",
];

const VQG: &[&str] = &[
    "Based on the image, provide a question with the answer: {Answer}. Question:",
    "Given the visual representation, create a question for which the answer is \"{Answer}\".",
    "From the image provided, craft a question that leads to the reply: {Answer}. Question:",
    "Considering the picture, come up with a question where the answer is: {Answer}.",
    "Taking the image into account, generate an question that has the answer: {Answer}. Question:",
];

const REC: &[&str] = &[
    "Identify the position of {expr} in image and share its coordinates.",
    "I'd like to request the coordinates of {expr} within the photo.",
    "How can I locate {expr} in the image? Please provide the coordinates.",
    "I am interested in knowing the coordinates of {expr} in the picture.",
    "Assist me in locating the position of {expr} in the photograph and its bounding box coordinates.",
    "In the image, I need to find {expr} and know its coordinates. Can you please help?",
];

const REG: &[&str] = &[
    "What are the unique characteristics of the rectangular section {BBox} in image?",
    "Describe the novel qualities of the selected bounding box {BBox} in image.",
    "What sets the chosen region {BBox} in image apart from its surroundings?",
    "Provide a one-of-a-kind depiction for the area enclosed by {BBox} in image.",
    "How would you portray the unique features of the designated box {BBox} in image?",
    "Explain the distinguishing characteristics of the marked bounding box {BBox} in image.",
];

/// How a template is picked from a subtype's list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplatePolicy {
    /// Uniform seeded draw per sample.
    Random,
    /// Always the given index.
    Fixed(usize),
}

pub fn choose_template(subtype: Subtype, policy: TemplatePolicy, rng: &mut Rng) -> Result<usize> {
    let n = subtype.templates().len();
    match policy {
        TemplatePolicy::Random => Ok(rng.below(n)),
        TemplatePolicy::Fixed(i) if i < n => Ok(i),
        TemplatePolicy::Fixed(i) => Err(Error::Config(format!(
            "template index {i} out of range for {subtype} ({n} templates)"
        ))),
    }
}

/// Substitutes every `{name}` placeholder of template `index`.
pub fn render_template(
    subtype: Subtype,
    index: usize,
    slots: &BTreeMap<String, String>,
) -> Result<String> {
    let templates = subtype.templates();
    let template = templates.get(index).ok_or_else(|| {
        Error::Config(format!(
            "template index {index} out of range for {subtype} ({} templates)",
            templates.len()
        ))
    })?;
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = *template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .map(|i| open + i)
            .ok_or_else(|| Error::contract(format!("unterminated placeholder in {template:?}")))?;
        let name = &rest[open + 1..close];
        let value = slots.get(name).ok_or_else(|| Error::MissingSlot {
            subtype: subtype.to_string(),
            placeholder: name.to_string(),
        })?;
        out.push_str(value);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// What stands in front of the tag list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintStyle {
    /// The soft-prompt placeholder token.
    Soft,
    /// A plain word, for models without a soft prompt.
    Plain,
}

pub fn render_tag_instruction(tags: &[String], style: HintStyle) -> String {
    let hint = match style {
        HintStyle::Soft => HINT_MARKER,
        HintStyle::Plain => "tags",
    };
    let head =
        format!("According to {hint}, you are allowed to use or partially use the following tags:");
    if tags.is_empty() {
        head
    } else {
        format!("{head} {}", tags.join(", "))
    }
}

/// The tag instruction placed in front of the task instruction.
pub fn with_tags(tags: &[String], style: HintStyle, instruction: &str) -> String {
    format!("{}. {instruction}", render_tag_instruction(tags, style))
}
