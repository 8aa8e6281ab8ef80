//! Synthetic multiple-choice residue questions: "which is a multiple of m", with
//! exactly one option divisible by `m`.
//!
//! A one-block model can find the divisible option only if it can condition
//! the search on `m`, which a single attention hop cannot do at the answer
//! position. Checking a chosen option against `m` after the fact is one hop,
//! so the task has a built-in gap between answering and self-assessment.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{choice_letter, AnswerValue, Choice, Dataset, QueryRecord, RngSeed, SplitTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    /// Option values are drawn from `1..=max_value`.
    pub max_value: u32,
    pub moduli: Vec<u32>,
    /// Each question gets a uniform number of options in `min_choices..=n_choices`.
    pub n_choices: usize,
    pub min_choices: usize,
    pub seed: RngSeed,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 1000,
            max_value: 30,
            moduli: vec![2, 3, 5],
            n_choices: 4,
            min_choices: 4,
            seed: RngSeed::default(),
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.moduli.is_empty() || self.moduli.iter().any(|&m| m < 2) {
            return Err(Error::InvalidArgument(
                "moduli must be nonempty and >= 2".into(),
            ));
        }
        if !(2..=26).contains(&self.n_choices) || !(2..=self.n_choices).contains(&self.min_choices)
        {
            return Err(Error::InvalidArgument(
                "choice counts must satisfy 2 <= min_choices <= n_choices <= 26".into(),
            ));
        }
        for &m in &self.moduli {
            let multiples = self.max_value / m;
            let others = self.max_value - multiples;
            if multiples == 0 || (others as usize) < self.n_choices - 1 {
                return Err(Error::InvalidArgument(format!(
                    "max_value {} leaves too few options for modulus {m}",
                    self.max_value
                )));
            }
        }
        Ok(())
    }
}

/// Several phrasings, so the modulus does not sit at a fixed offset.
const TEMPLATES: [&str; 4] = [
    "which is a multiple of {m}",
    "which option is a multiple of {m}",
    "pick the multiple of {m}",
    "find a multiple of {m} below",
];

/// Moduli are spelled out so they never share a token with option values.
fn number_word(m: u32) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS
        .get(m as usize)
        .map_or_else(|| format!("n{m}"), |w| w.to_string())
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = config.seed.rng();
    let mut records = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let m = *config.moduli.choose(&mut rng).expect("nonempty moduli");
        let multiples: Vec<u32> = (1..=config.max_value).filter(|v| v % m == 0).collect();
        let others: Vec<u32> = (1..=config.max_value).filter(|v| v % m != 0).collect();
        let k = if config.min_choices == config.n_choices {
            config.n_choices
        } else {
            rng.gen_range(config.min_choices..=config.n_choices)
        };
        let correct = *multiples.choose(&mut rng).expect("checked nonempty");
        let mut values: Vec<u32> = others.choose_multiple(&mut rng, k - 1).copied().collect();
        let slot = rng.gen_range(0..k);
        values.insert(slot, correct);
        let choices = values
            .iter()
            .enumerate()
            .map(|(k, v)| Choice::new(choice_letter(k), v.to_string()))
            .collect();
        records.push(QueryRecord {
            id: format!("s{i:05}"),
            prompt: TEMPLATES
                .choose(&mut rng)
                .expect("nonempty templates")
                .replace("{m}", &number_word(m)),
            choices: Some(choices),
            ground_truth: AnswerValue::Choice(choice_letter(slot)),
            subject: Some(format!("mod{m}")),
        });
    }
    Ok(Dataset::new(records, SplitTag::Train))
}
