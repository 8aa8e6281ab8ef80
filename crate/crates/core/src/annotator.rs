//! Confidence-token annotation of a training split.
//!
//! Every training query is paired with the base model's own prediction.
//! Correct predictions become `answer <CN>` examples with full supervision;
//! incorrect ones become `answer <UN>` examples whose answer tokens carry
//! zero loss weight, so training never reinforces a wrong answer. The
//! unconfident pool is subsampled to `ceil(alpha * |UN|)` items.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{tokenize, Dataset, PredictionRecord, RngSeed};

pub const UN_TOKEN: &str = "<UN>";
pub const CN_TOKEN: &str = "<CN>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConfidenceTag {
    #[serde(rename = "CN")]
    Confident,
    #[serde(rename = "UN")]
    Unconfident,
}

impl ConfidenceTag {
    pub fn token(self) -> &'static str {
        match self {
            ConfidenceTag::Confident => CN_TOKEN,
            ConfidenceTag::Unconfident => UN_TOKEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotationConfig {
    pub alpha: f64,
    pub seed: RngSeed,
}

impl AnnotationConfig {
    pub fn new(alpha: f64, seed: RngSeed) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(AnnotationConfig { alpha, seed })
    }
}

/// One supervised sequence: answer tokens followed by a single confidence token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedExample {
    pub query_id: String,
    pub prompt: String,
    #[serde(rename = "completion")]
    pub completion_tokens: Vec<String>,
    pub loss_weights: Vec<u8>,
    #[serde(rename = "tag")]
    pub confidence_tag: ConfidenceTag,
}

impl AugmentedExample {
    pub fn new(
        query_id: impl Into<String>,
        prompt: impl Into<String>,
        answer_tokens: Vec<String>,
        tag: ConfidenceTag,
    ) -> Self {
        let answer_weight = match tag {
            ConfidenceTag::Confident => 1,
            ConfidenceTag::Unconfident => 0,
        };
        let mut loss_weights = vec![answer_weight; answer_tokens.len()];
        loss_weights.push(1);
        let mut completion_tokens = answer_tokens;
        completion_tokens.push(tag.token().to_string());
        AugmentedExample {
            query_id: query_id.into(),
            prompt: prompt.into(),
            completion_tokens,
            loss_weights,
            confidence_tag: tag,
        }
    }

    pub fn answer_tokens(&self) -> &[String] {
        &self.completion_tokens[..self.completion_tokens.len().saturating_sub(1)]
    }

    /// Checks the mask layout; used when reading examples from disk.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.completion_tokens.len();
        if n == 0 || self.loss_weights.len() != n {
            return Err(format!(
                "completion has {n} tokens but {} weights",
                self.loss_weights.len()
            ));
        }
        let is_conf = |t: &str| t == UN_TOKEN || t == CN_TOKEN;
        if self.completion_tokens[..n - 1].iter().any(|t| is_conf(t)) {
            return Err("confidence token before final position".into());
        }
        if self.completion_tokens[n - 1] != self.confidence_tag.token() {
            return Err("final token does not match tag".into());
        }
        if self.loss_weights[n - 1] != 1 {
            return Err("confidence token must carry weight 1".into());
        }
        let expected = match self.confidence_tag {
            ConfidenceTag::Confident => 1,
            ConfidenceTag::Unconfident => 0,
        };
        if self.loss_weights[..n - 1].iter().any(|&w| w != expected) {
            return Err("answer-token weights do not match tag".into());
        }
        Ok(())
    }
}

/// Number of unconfident examples kept for `n` incorrect predictions.
pub fn subsample_count(alpha: f64, n: usize) -> usize {
    // Tolerance keeps e.g. 0.7 * 10 from rounding up to 8.
    ((alpha * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Build the augmented training set from a split and its base-model predictions.
pub fn annotate(
    train: &Dataset,
    predictions: &[PredictionRecord],
    config: &AnnotationConfig,
) -> Result<Vec<AugmentedExample>> {
    let known: HashSet<&str> = train.ids().collect();
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in predictions {
        if !known.contains(p.query_id.as_str()) {
            return Err(Error::UnknownQuery(p.query_id.clone()));
        }
        by_id.insert(p.query_id.as_str(), p);
    }

    let mut confident = Vec::new();
    let mut unconfident = Vec::new();
    for record in &train.records {
        let pred = by_id
            .get(record.id.as_str())
            .ok_or_else(|| Error::MissingPrediction(record.id.clone()))?;
        let tokens = tokenize(&pred.answer);
        let prompt = record.rendered_prompt();
        if record.ground_truth.is_matched_by(&pred.answer) {
            confident.push(AugmentedExample::new(
                &record.id,
                prompt,
                tokens,
                ConfidenceTag::Confident,
            ));
        } else {
            unconfident.push(AugmentedExample::new(
                &record.id,
                prompt,
                tokens,
                ConfidenceTag::Unconfident,
            ));
        }
    }

    let mut rng = config.seed.rng();
    let keep = subsample_count(config.alpha, unconfident.len());
    unconfident.shuffle(&mut rng);
    unconfident.truncate(keep);

    let mut out = confident;
    out.extend(unconfident);
    out.shuffle(&mut rng);
    Ok(out)
}

/// `|CN| / |UN|` over an augmented set.
pub fn un_cn_ratio(examples: &[AugmentedExample]) -> Result<f64> {
    let un = examples
        .iter()
        .filter(|e| e.confidence_tag == ConfidenceTag::Unconfident)
        .count();
    if un == 0 {
        return Err(Error::DivisionByZero("no unconfident examples".into()));
    }
    let cn = examples.len() - un;
    Ok(cn as f64 / un as f64)
}
