//! Domain types shared by every stage of the pipeline.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wire spelling of the "none of the above" label.
pub const REJECT_LABEL: &str = "<REJECT>";

/// Ground truth or model answer.
///
/// Choice letters compare after trimming surrounding whitespace; free text
/// compares exactly against the final extracted answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AnswerValue {
    Choice(char),
    Text(String),
    Reject,
}

impl AnswerValue {
    /// Whether a raw model answer counts as correct against this truth.
    pub fn is_matched_by(&self, answer: &str) -> bool {
        match self {
            AnswerValue::Choice(letter) => {
                let mut chars = answer.trim().chars();
                chars.next() == Some(*letter) && chars.next().is_none()
            }
            AnswerValue::Text(text) => answer == text,
            AnswerValue::Reject => answer.trim() == REJECT_LABEL,
        }
    }

    pub fn is_reject(&self) -> bool {
        matches!(self, AnswerValue::Reject)
    }
}

impl fmt::Display for AnswerValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerValue::Choice(c) => write!(f, "{c}"),
            AnswerValue::Text(t) => f.write_str(t),
            AnswerValue::Reject => f.write_str(REJECT_LABEL),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub letter: String,
    pub text: String,
}

impl Choice {
    pub fn new(letter: char, text: impl Into<String>) -> Self {
        Choice {
            letter: letter.to_string(),
            text: text.into(),
        }
    }
}

/// One task instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRecord {
    pub id: String,
    pub prompt: String,
    pub choices: Option<Vec<Choice>>,
    pub ground_truth: AnswerValue,
    pub subject: Option<String>,
}

/// JSONL line layout for [`QueryRecord`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecordWire {
    pub id: String,
    pub prompt: String,
    #[serde(default)]
    pub choices: Option<Vec<Choice>>,
    pub ground_truth: String,
    #[serde(default)]
    pub subject: Option<String>,
}

impl QueryRecord {
    /// Validate a wire record against the record invariants.
    pub fn from_wire(wire: QueryRecordWire) -> std::result::Result<Self, String> {
        if wire.id.is_empty() {
            return Err("id must be nonempty".into());
        }
        if let Some(choices) = &wire.choices {
            check_letters(choices)?;
        }
        let ground_truth = if wire.ground_truth == REJECT_LABEL {
            AnswerValue::Reject
        } else if let Some(choices) = &wire.choices {
            let gt = wire.ground_truth.trim();
            match choices.iter().find(|c| c.letter == gt) {
                Some(c) => AnswerValue::Choice(first_char(&c.letter)),
                None => {
                    return Err(format!(
                        "ground_truth {:?} does not match any choice letter",
                        wire.ground_truth
                    ))
                }
            }
        } else if wire.ground_truth.is_empty() {
            return Err("free-form ground_truth must be nonempty".into());
        } else {
            AnswerValue::Text(wire.ground_truth)
        };
        Ok(QueryRecord {
            id: wire.id,
            prompt: wire.prompt,
            choices: wire.choices,
            ground_truth,
            subject: wire.subject,
        })
    }

    pub fn to_wire(&self) -> QueryRecordWire {
        QueryRecordWire {
            id: self.id.clone(),
            prompt: self.prompt.clone(),
            choices: self.choices.clone(),
            ground_truth: self.ground_truth.to_string(),
            subject: self.subject.clone(),
        }
    }

    pub fn is_choice_question(&self) -> bool {
        self.choices.is_some()
    }

    /// Prompt text with the choice list appended, one `X. text` line per choice.
    pub fn rendered_prompt(&self) -> String {
        render_prompt(&self.prompt, self.choices.as_deref())
    }
}

/// The text a model sees: the prompt, then one `L. text` line per choice.
pub fn render_prompt(prompt: &str, choices: Option<&[Choice]>) -> String {
    let mut out = prompt.to_string();
    for c in choices.unwrap_or_default() {
        out.push('\n');
        out.push_str(&c.letter);
        out.push_str(". ");
        out.push_str(&c.text);
    }
    out
}

fn first_char(s: &str) -> char {
    s.chars().next().unwrap_or('?')
}

pub(crate) fn check_letters(choices: &[Choice]) -> std::result::Result<(), String> {
    for (i, c) in choices.iter().enumerate() {
        let expected = char::from(b'A' + (i as u8 % 26));
        if i >= 26 || c.letter.chars().count() != 1 || first_char(&c.letter) != expected {
            return Err(format!(
                "choice {} has letter {:?}, expected {:?}",
                i, c.letter, expected
            ));
        }
    }
    Ok(())
}

/// Whitespace tokenization shared by annotation, training and decoding.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Letter for the `index`-th choice.
pub fn choice_letter(index: usize) -> char {
    char::from(b'A' + index as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<QueryRecord>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(records: Vec<QueryRecord>, split_tag: SplitTag) -> Self {
        Dataset { records, split_tag }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QueryRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }
}

/// A model's answer to one query, with the probabilities needed downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub query_id: String,
    pub model_id: String,
    pub answer: String,
    pub token_probs: Vec<f64>,
    pub p_un: f64,
    pub p_cn: f64,
    pub latency_s: f64,
    pub token_count: u32,
}

impl PredictionRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if let Some(p) = self.token_probs.iter().find(|p| !unit(**p)) {
            return Err(format!("token probability {p} outside [0, 1]"));
        }
        if !unit(self.p_un) || !unit(self.p_cn) {
            return Err(format!(
                "p_un = {}, p_cn = {} must lie in [0, 1]",
                self.p_un, self.p_cn
            ));
        }
        if self.p_un + self.p_cn > 1.0 + 1e-9 {
            return Err(format!("p_un + p_cn = {} exceeds 1", self.p_un + self.p_cn));
        }
        if !self.latency_s.is_finite() || self.latency_s < 0.0 {
            return Err(format!(
                "latency_s = {} must be finite and >= 0",
                self.latency_s
            ));
        }
        if self.token_count == 0 {
            return Err("token_count must be positive".into());
        }
        Ok(())
    }

    pub fn per_token_latency(&self) -> f64 {
        self.latency_s / f64::from(self.token_count.max(1))
    }
}

/// Seed for every random choice in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Shuffle in place with a fresh generator for this seed.
    pub fn shuffle<T>(self, items: &mut [T]) {
        items.shuffle(&mut self.rng());
    }
}

impl Default for RngSeed {
    fn default() -> Self {
        RngSeed(2024)
    }
}
