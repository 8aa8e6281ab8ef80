//! Confidence-score extraction: the confidence-token ratio plus the four
//! baseline extractors (verbalized, yes/no tokens, answer-token logits).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::PredictionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMethod {
    SelfRef,
    Verbalized,
    YesNo,
    LogitsZeroShot,
    LogitsFinetuned,
}

impl std::str::FromStr for ConfidenceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "self_ref" => ConfidenceMethod::SelfRef,
            "verbalized" => ConfidenceMethod::Verbalized,
            "yes_no" => ConfidenceMethod::YesNo,
            "logits" | "logits_zero_shot" => ConfidenceMethod::LogitsZeroShot,
            "logits_finetuned" => ConfidenceMethod::LogitsFinetuned,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown confidence method {other:?}"
                )))
            }
        })
    }
}

/// A confidence value in `[0, 1]` tagged with how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub value: f64,
    pub method: ConfidenceMethod,
}

impl ConfidenceScore {
    pub fn new(value: f64, method: ConfidenceMethod) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Range(value));
        }
        Ok(ConfidenceScore { value, method })
    }
}

/// Line layout of a scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub query_id: String,
    pub value: f64,
    pub method: ConfidenceMethod,
}

impl ScoreRecord {
    pub fn score(&self) -> Result<ConfidenceScore> {
        ConfidenceScore::new(self.value, self.method)
    }
}

fn normalized_pair(
    num: f64,
    other: f64,
    what: &str,
    method: ConfidenceMethod,
) -> Result<ConfidenceScore> {
    if !(num >= 0.0 && other >= 0.0) || !num.is_finite() || !other.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "{what} probabilities must be finite and nonnegative, got ({other}, {num})"
        )));
    }
    let sum = num + other;
    if sum == 0.0 {
        return Err(Error::ZeroSum(format!(
            "no probability mass on either {what} token"
        )));
    }
    ConfidenceScore::new(num / sum, method)
}

/// `p_cn / (p_un + p_cn)`.
pub fn self_ref_score(p_un: f64, p_cn: f64) -> Result<ConfidenceScore> {
    normalized_pair(p_cn, p_un, "confidence", ConfidenceMethod::SelfRef)
}

/// `p_yes / (p_yes + p_no)`.
pub fn yes_no_score(p_yes: f64, p_no: f64) -> Result<ConfidenceScore> {
    normalized_pair(p_yes, p_no, "yes/no", ConfidenceMethod::YesNo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitsKind {
    /// Closed-form answers: the probability of the single predicted token.
    SingleToken,
    /// Free-text answers: mean probability over the answer tokens.
    FreeText,
}

pub fn logits_score(token_probs: &[f64], kind: LogitsKind) -> Result<ConfidenceScore> {
    logits_score_with(token_probs, kind, ConfidenceMethod::LogitsZeroShot)
}

/// Same as [`logits_score`] but tagged with the given method.
pub fn logits_score_with(
    token_probs: &[f64],
    kind: LogitsKind,
    method: ConfidenceMethod,
) -> Result<ConfidenceScore> {
    if token_probs.is_empty() {
        return Err(Error::Empty("token probabilities".into()));
    }
    if let Some(p) = token_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Range(*p));
    }
    let value = match kind {
        LogitsKind::SingleToken => {
            if token_probs.len() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "single-token score needs exactly one probability, got {}",
                    token_probs.len()
                )));
            }
            token_probs[0]
        }
        LogitsKind::FreeText => token_probs.iter().sum::<f64>() / token_probs.len() as f64,
    };
    ConfidenceScore::new(value.clamp(0.0, 1.0), method)
}

/// Parse `##Answer: <answer> ##Confidence: <value>` from model output,
/// taking the last occurrence.
pub fn parse_verbalized(text: &str) -> Result<(String, f64)> {
    const ANSWER: &str = "##Answer:";
    const CONF: &str = "##Confidence:";
    let no_match = || Error::Parse("no ##Answer/##Confidence pattern".into());

    let mut search_end = text.len();
    loop {
        let a = text[..search_end].rfind(ANSWER).ok_or_else(no_match)?;
        let rest = &text[a + ANSWER.len()..];
        if let Some(c) = rest.find(CONF) {
            let answer_part = &rest[..c];
            // A nested ##Answer means this occurrence has no confidence of its own.
            if !answer_part.contains(ANSWER) {
                let answer = answer_part.trim().to_string();
                let conf_text = rest[c + CONF.len()..].trim_start();
                let number: String = conf_text
                    .chars()
                    .take_while(|ch| {
                        ch.is_ascii_digit() || matches!(ch, '.' | '-' | '+' | 'e' | 'E')
                    })
                    .collect();
                let number = number.trim_end_matches(['.', 'e', 'E']);
                let value: f64 = number
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad confidence value {conf_text:?}")))?;
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::Range(value));
                }
                if answer.is_empty() {
                    return Err(Error::Parse("empty answer".into()));
                }
                return Ok((answer, value));
            }
        }
        if a == 0 {
            return Err(no_match());
        }
        search_end = a;
    }
}

/// Confidence of a prediction under `method`, using what the record carries.
pub fn score_prediction(
    pred: &PredictionRecord,
    method: ConfidenceMethod,
) -> Result<ConfidenceScore> {
    match method {
        ConfidenceMethod::SelfRef => self_ref_score(pred.p_un, pred.p_cn),
        ConfidenceMethod::LogitsZeroShot | ConfidenceMethod::LogitsFinetuned => {
            let kind = if pred.token_probs.len() == 1 {
                LogitsKind::SingleToken
            } else {
                LogitsKind::FreeText
            };
            logits_score_with(&pred.token_probs, kind, method)
        }
        ConfidenceMethod::Verbalized => parse_verbalized(&pred.answer)
            .and_then(|(_, v)| ConfidenceScore::new(v, ConfidenceMethod::Verbalized)),
        ConfidenceMethod::YesNo => Err(Error::InvalidArgument(
            "yes/no scores need the yes/no token probabilities; supply a scores file".into(),
        )),
    }
}
