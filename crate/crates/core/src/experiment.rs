//! Desk-scale end-to-end run on the synthetic residue task: pretrain a base
//! model, annotate its training-set answers, fine-tune with confidence
//! tokens, then evaluate routing and rejection on held-out questions.
//!
//! The base corpus mixes 2- to 4-option questions drawn from a separate
//! seed. Without that breadth the base model learns that "D" always exists,
//! and on 3-option rejection items it confidently answers a missing "D".

use serde::{Deserialize, Serialize};

use crate::annotator::{annotate, AnnotationConfig};
use crate::confidence::{logits_score, self_ref_score, LogitsKind};
use crate::dataset::split;
use crate::error::Result;
use crate::pipeline::{self, LatencyMode, PredictConfig};
use crate::rejection::{build_rejection_set, roc_from_confidence, roc_from_scores};
use crate::routing::{
    curve_from_items, quantile_thresholds, random_baseline, RoutingItem, TradeoffCurve,
};
use crate::synth::{generate, SynthConfig};
use crate::tinylm::{
    add_confidence_tokens, train_sequences, TinyModel, TrainConfig, TrainSequence,
};
use crate::types::{Dataset, PredictionRecord, RngSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub seed: RngSeed,
    /// Questions for annotation, fine-tuning and evaluation.
    pub task_size: usize,
    pub test_fraction: f64,
    /// Questions for base-model pretraining, each with
    /// `base_min_choices..=4` options.
    pub base_size: usize,
    pub base_min_choices: usize,
    pub moduli: Vec<u32>,
    pub max_value: u32,
    pub d: usize,
    pub base_epochs: usize,
    pub base_lr: f64,
    pub base_batch: usize,
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub ft_batch: usize,
    pub alpha: f64,
    pub rejection_fraction: f64,
    pub per_token_s: f64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            seed: RngSeed(1),
            task_size: 8000,
            test_fraction: 0.25,
            base_size: 1500,
            base_min_choices: 2,
            moduli: vec![2, 3, 4, 5, 7],
            max_value: 30,
            d: 32,
            base_epochs: 10,
            base_lr: 3e-3,
            base_batch: 8,
            ft_epochs: 20,
            ft_lr: 1e-3,
            ft_batch: 4,
            alpha: 1.0,
            rejection_fraction: 0.5,
            per_token_s: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeskRun {
    pub base: TinyModel,
    pub model: TinyModel,
    pub train: Dataset,
    pub test: Dataset,
    pub rejection: Dataset,
    pub base_test_predictions: Vec<PredictionRecord>,
    pub test_predictions: Vec<PredictionRecord>,
    pub rejection_predictions: Vec<PredictionRecord>,
}

pub fn run(config: &DeskConfig) -> Result<DeskRun> {
    let seed = config.seed;
    let task = generate(&SynthConfig {
        n: config.task_size,
        max_value: config.max_value,
        moduli: config.moduli.clone(),
        n_choices: 4,
        min_choices: 4,
        seed,
    })?;
    let (train, _, test) = split(
        &task,
        (1.0 - config.test_fraction, 0.0, config.test_fraction),
        seed,
    )?;
    let base_data = generate(&SynthConfig {
        n: config.base_size,
        max_value: config.max_value,
        moduli: config.moduli.clone(),
        n_choices: 4,
        min_choices: config.base_min_choices,
        seed: RngSeed(seed.0.wrapping_add(1000)),
    })?;

    let init = pipeline::init_model([&task, &base_data], config.d, seed)?;
    let base_cfg = TrainConfig {
        learning_rate: config.base_lr,
        epochs: config.base_epochs,
        batch_size: config.base_batch,
        seed,
        ..TrainConfig::default()
    };
    let seqs = pipeline::supervised_sequences(&init, &base_data)?;
    let base = train_sequences(&init, &seqs, &base_cfg, |_| {})?;

    let pc = PredictConfig {
        latency: LatencyMode::PerToken(config.per_token_s),
        ..PredictConfig::default()
    };
    let train_preds = pipeline::predict(&base, &train, &pc)?;
    let augmented = annotate(
        &train,
        &train_preds,
        &AnnotationConfig::new(config.alpha, seed)?,
    )?;

    let start = add_confidence_tokens(&base)?;
    let seqs = augmented
        .iter()
        .map(|e| TrainSequence::from_example(&start, e))
        .collect::<Result<Vec<_>>>()?;
    let ft_cfg = TrainConfig {
        learning_rate: config.ft_lr,
        epochs: config.ft_epochs,
        batch_size: config.ft_batch,
        seed,
        ..TrainConfig::default()
    };
    let model = train_sequences(&start, &seqs, &ft_cfg, |_| {})?;

    let rejection = build_rejection_set(&test, config.rejection_fraction, seed)?;
    Ok(DeskRun {
        base_test_predictions: pipeline::predict(&base, &test, &pc)?,
        test_predictions: pipeline::predict(&model, &test, &pc)?,
        rejection_predictions: pipeline::predict(&model, &rejection, &pc)?,
        base,
        model,
        train,
        test,
        rejection,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub base_accuracy: f64,
    pub accuracy: f64,
    pub correctness_auc_self_ref: f64,
    pub correctness_auc_logits: f64,
    pub curve: TradeoffCurve,
    /// Smallest accuracy gain over random routing among curve points with a
    /// routing rate in `[0.3, 0.7]`.
    pub min_gain_over_random: f64,
    pub rejection_auc_self_ref: f64,
    pub rejection_auc_logits: f64,
}

fn self_ref_values(preds: &[PredictionRecord]) -> Result<Vec<f64>> {
    preds
        .iter()
        .map(|p| Ok(self_ref_score(p.p_un, p.p_cn)?.value))
        .collect()
}

/// Answer-token probability; empty answers count as zero confidence.
fn logit_values(preds: &[PredictionRecord]) -> Vec<f64> {
    preds
        .iter()
        .map(|p| logits_score(&p.token_probs, LogitsKind::SingleToken).map_or(0.0, |s| s.value))
        .collect()
}

impl DeskRun {
    /// Metrics against a perfect remote model with twice the per-token cost.
    pub fn report(&self, per_token_s: f64) -> Result<DeskReport> {
        let correct = pipeline::correctness(&self.test, &self.test_predictions)?;
        let accuracy = pipeline::accuracy(&self.test, &self.test_predictions)?;
        let c = self_ref_values(&self.test_predictions)?;
        let items: Vec<RoutingItem> = c
            .iter()
            .zip(&correct)
            .map(|(&score, &ok)| RoutingItem {
                score,
                local_correct: ok,
                remote_correct: true,
                local_per_token_s: per_token_s,
                remote_per_token_s: 2.0 * per_token_s,
            })
            .collect();
        let curve = curve_from_items(&items, &quantile_thresholds(&c, 20)?)?;
        let mut min_gain = f64::INFINITY;
        for pt in &curve.points {
            if (0.3 - 1e-9..=0.7 + 1e-9).contains(&pt.routing_rate) {
                let baseline = random_baseline(accuracy, 1.0, &[pt.routing_rate])?[0].1;
                min_gain = min_gain.min(pt.accuracy - baseline);
            }
        }

        let truth: Vec<bool> = self
            .rejection
            .records
            .iter()
            .map(|r| r.ground_truth.is_reject())
            .collect();
        Ok(DeskReport {
            base_accuracy: pipeline::accuracy(&self.test, &self.base_test_predictions)?,
            accuracy,
            correctness_auc_self_ref: roc_from_scores(&c, &correct)?.auc,
            correctness_auc_logits: roc_from_scores(
                &logit_values(&self.test_predictions),
                &correct,
            )?
            .auc,
            curve,
            min_gain_over_random: min_gain,
            rejection_auc_self_ref: roc_from_confidence(
                &self_ref_values(&self.rejection_predictions)?,
                &truth,
            )?
            .auc,
            rejection_auc_logits: roc_from_confidence(
                &logit_values(&self.rejection_predictions),
                &truth,
            )?
            .auc,
        })
    }
}
