use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::TinyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EndMarker,
    ConfidenceToken,
    Length,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated ids. A trailing confidence token is kept; `<eos>` is not.
    pub tokens: Vec<usize>,
    /// Probability of each generated token (plus the stop token, if any).
    pub probs: Vec<f64>,
    pub stop: StopReason,
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate().skip(1) {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `prompt` for at most `max_new` tokens. Stops at `<eos>`,
/// after a confidence token, or when the budget or context is exhausted.
pub fn predict_greedy(model: &TinyModel, prompt: &[usize], max_new: usize) -> Result<Decoded> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt".into()));
    }
    let eos = model.vocab.eos_id();
    let mut ids = prompt.to_vec();
    let mut out = Decoded {
        tokens: Vec::new(),
        probs: Vec::new(),
        stop: StopReason::Length,
    };
    while out.tokens.len() < max_new && ids.len() <= model.dims.max_len {
        let p = model.next_token_probs(&ids)?;
        let next = argmax(&p);
        out.probs.push(p[next]);
        if Some(next) == eos {
            out.stop = StopReason::EndMarker;
            return Ok(out);
        }
        out.tokens.push(next);
        if model.vocab.is_confidence_token(next) {
            out.stop = StopReason::ConfidenceToken;
            return Ok(out);
        }
        ids.push(next);
    }
    Ok(out)
}

/// `(P(<UN>), P(<CN>))` at the position right after `prompt ++ answer`.
pub fn confidence_probs(
    model: &TinyModel,
    prompt: &[usize],
    answer: &[usize],
) -> Result<(f64, f64)> {
    let (Some(un), Some(cn)) = (model.vocab.un_id(), model.vocab.cn_id()) else {
        return Err(Error::NoConfidenceTokens);
    };
    let ids: Vec<usize> = prompt.iter().chain(answer).copied().collect();
    let p = model.next_token_probs(&ids)?;
    Ok((p[un], p[cn]))
}
