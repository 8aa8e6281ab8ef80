//! Glue between datasets and the tiny model: vocabulary construction,
//! supervised sequences, and batch prediction into prediction records.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::{
    confidence_probs, model_tokens, predict_greedy, ModelDims, TinyModel, TrainSequence, Vocab,
    PAD_TOKEN,
};
use crate::types::{tokenize, AnswerValue, Dataset, PredictionRecord, RngSeed};

/// Tokens a model should emit for a ground-truth answer.
pub fn answer_tokens(value: &AnswerValue) -> Result<Vec<String>> {
    match value {
        AnswerValue::Choice(c) => Ok(vec![c.to_string()]),
        AnswerValue::Text(t) => Ok(tokenize(t)),
        AnswerValue::Reject => Err(Error::InvalidArgument(
            "reject-labelled records have no answer tokens".into(),
        )),
    }
}

/// Base vocabulary covering every prompt, choice letter and answer in
/// `datasets`. Every seen letter is also paired with every seen option head
/// word, so re-lettered options (as in rejection sets) still encode.
pub fn build_vocab<'a>(datasets: impl IntoIterator<Item = &'a Dataset>) -> Result<Vocab> {
    let mut tokens = vec![PAD_TOKEN.to_string()];
    let mut letters = BTreeSet::new();
    let mut heads = BTreeSet::new();
    for d in datasets {
        for r in &d.records {
            tokens.extend(model_tokens(&r.rendered_prompt()));
            for c in r.choices.iter().flatten() {
                tokens.push(c.letter.clone());
                letters.insert(c.letter.clone());
                if let Some(w) = tokenize(&c.text).into_iter().next() {
                    heads.insert(w);
                }
            }
            if !r.ground_truth.is_reject() {
                tokens.extend(answer_tokens(&r.ground_truth)?);
            }
        }
    }
    for l in &letters {
        for w in &heads {
            tokens.extend(model_tokens(&format!("{l}. {w}")));
        }
    }
    Vocab::build(tokens)
}

/// Longest prompt-plus-answer length in `datasets`, with room for the end
/// marker or confidence token.
pub fn required_context<'a>(datasets: impl IntoIterator<Item = &'a Dataset>) -> usize {
    datasets
        .into_iter()
        .flat_map(|d| &d.records)
        .map(|r| {
            let answer = match &r.ground_truth {
                AnswerValue::Text(t) => tokenize(t).len(),
                _ => 1,
            };
            model_tokens(&r.rendered_prompt()).len() + answer + 2
        })
        .max()
        .unwrap_or(1)
}

/// Fresh model whose vocabulary and context cover every record of `datasets`.
pub fn init_model<'a, I>(datasets: I, d: usize, seed: RngSeed) -> Result<TinyModel>
where
    I: IntoIterator<Item = &'a Dataset>,
    I::IntoIter: Clone,
{
    let it = datasets.into_iter();
    let vocab = build_vocab(it.clone())?;
    Ok(TinyModel::new(
        vocab,
        ModelDims::with_width(d, required_context(it)),
        seed,
    ))
}

/// Plain supervised sequences: prompt, then the gold answer and `<eos>`.
pub fn supervised_sequences(model: &TinyModel, dataset: &Dataset) -> Result<Vec<TrainSequence>> {
    let eos = model
        .vocab
        .eos_id()
        .ok_or_else(|| Error::InvalidArgument("vocabulary lacks <eos>".into()))?;
    dataset
        .records
        .iter()
        .map(|r| {
            let prompt = model.encode_prompt(&r.rendered_prompt())?;
            let mut completion = model
                .vocab
                .encode_tokens(&answer_tokens(&r.ground_truth)?)?;
            completion.push(eos);
            let weights = vec![1.0; completion.len()];
            TrainSequence::from_parts(&prompt, &completion, &weights)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyMode {
    /// Wall-clock time of decoding.
    Measured,
    /// `seconds × tokens`, for reproducible logs.
    PerToken(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictConfig {
    pub model_id: String,
    pub max_new_tokens: usize,
    pub latency: LatencyMode,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            model_id: "tiny".into(),
            max_new_tokens: 8,
            latency: LatencyMode::Measured,
        }
    }
}

/// Greedy predictions for every record. Models carrying confidence tokens
/// also report `P(<UN>)` and `P(<CN>)` after the emitted answer; others
/// report zeros.
pub fn predict(
    model: &TinyModel,
    dataset: &Dataset,
    config: &PredictConfig,
) -> Result<Vec<PredictionRecord>> {
    dataset
        .records
        .iter()
        .map(|r| predict_prompt(model, &r.id, &r.rendered_prompt(), config))
        .collect()
}

/// Prediction for one already-rendered prompt.
pub fn predict_prompt(
    model: &TinyModel,
    query_id: &str,
    rendered_prompt: &str,
    config: &PredictConfig,
) -> Result<PredictionRecord> {
    let start = Instant::now();
    let prompt = model.encode_prompt(rendered_prompt)?;
    // Leave room to read the confidence token after the answer.
    let budget = config
        .max_new_tokens
        .min(model.dims.max_len.saturating_sub(prompt.len()));
    let decoded = predict_greedy(model, &prompt, budget)?;
    let mut answer = decoded.tokens;
    if answer
        .last()
        .is_some_and(|&t| model.vocab.is_confidence_token(t))
    {
        answer.pop();
    }
    let (p_un, p_cn) = if model.vocab.has_confidence_tokens() {
        confidence_probs(model, &prompt, &answer)?
    } else {
        (0.0, 0.0)
    };
    let token_count = decoded.probs.len().max(1) as u32;
    let latency_s = match config.latency {
        LatencyMode::Measured => start.elapsed().as_secs_f64(),
        LatencyMode::PerToken(s) => s * f64::from(token_count),
    };
    let text: Vec<&str> = answer.iter().map(|&t| model.vocab.token(t)).collect();
    Ok(PredictionRecord {
        query_id: query_id.to_string(),
        model_id: config.model_id.clone(),
        answer: text.join(" "),
        token_probs: decoded.probs[..answer.len()].to_vec(),
        p_un,
        p_cn,
        latency_s,
        token_count,
    })
}

/// Per-record correctness of `predictions`, in dataset order.
pub fn correctness(dataset: &Dataset, predictions: &[PredictionRecord]) -> Result<Vec<bool>> {
    let by_id: HashMap<&str, &PredictionRecord> = predictions
        .iter()
        .map(|p| (p.query_id.as_str(), p))
        .collect();
    dataset
        .records
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .map(|p| r.ground_truth.is_matched_by(&p.answer))
                .ok_or_else(|| Error::MissingPrediction(r.id.clone()))
        })
        .collect()
}

/// Fraction of records answered correctly.
pub fn accuracy(dataset: &Dataset, predictions: &[PredictionRecord]) -> Result<f64> {
    let c = correctness(dataset, predictions)?;
    if c.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    Ok(c.iter().filter(|&&x| x).count() as f64 / c.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::add_confidence_tokens;
    use crate::types::{Choice, QueryRecord, SplitTag};

    fn data() -> Dataset {
        let rec = |id: &str, gt: char| QueryRecord {
            id: id.into(),
            prompt: "pick one".into(),
            choices: Some(vec![Choice::new('A', "x"), Choice::new('B', "y")]),
            ground_truth: AnswerValue::Choice(gt),
            subject: None,
        };
        Dataset::new(vec![rec("a", 'A'), rec("b", 'B')], SplitTag::Test)
    }

    #[test]
    fn vocab_and_sequences() {
        let d = data();
        let v = build_vocab([&d]).unwrap();
        assert_eq!(
            v.tokens(),
            ["<eos>", "<pad>", "A", "A.x", "A.y", "B", "B.x", "B.y", "one", "pick"]
        );
        // pick one A.x B.y, one answer token, then <eos> and a spare slot.
        assert_eq!(required_context([&d]), 7);
        let m = TinyModel::zeros(v, ModelDims::with_width(4, 7));
        let seqs = supervised_sequences(&m, &d).unwrap();
        // One pad, four prompt tokens, then the answer; <eos> is only a target.
        assert_eq!(seqs[1].ids, vec![1, 9, 8, 3, 7, 5]);
        assert_eq!(seqs[1].targets, vec![(4, 5, 1.0), (5, 0, 1.0)]);
    }

    #[test]
    fn predictions_carry_confidence() {
        let d = data();
        let base = TinyModel::zeros(build_vocab([&d]).unwrap(), ModelDims::with_width(4, 8));
        let cfg = PredictConfig {
            latency: LatencyMode::PerToken(0.5),
            ..PredictConfig::default()
        };
        // All-zero model: <eos> wins every tie, so the answer is empty.
        let p = predict(&base, &d, &cfg).unwrap();
        assert_eq!(p[0].answer, "");
        assert_eq!(
            (p[0].p_un, p[0].p_cn, p[0].token_count, p[0].latency_s),
            (0.0, 0.0, 1, 0.5)
        );
        assert_eq!(accuracy(&d, &p).unwrap(), 0.0);

        let m = add_confidence_tokens(&base).unwrap();
        let p = predict(&m, &d, &cfg).unwrap();
        assert_eq!((p[1].p_un, p[1].p_cn), (1.0 / 12.0, 1.0 / 12.0));
        p[1].validate().unwrap();
    }
}
