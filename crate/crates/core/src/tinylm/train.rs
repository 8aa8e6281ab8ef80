use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::annotator::AugmentedExample;
use crate::error::{Error, Result};
use crate::types::RngSeed;

use super::grad::{accumulate_grad, grad_check_sequence, TrainSequence};
use super::{TinyModel, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: RngSeed,
    /// Run a finite-difference check on the first sequence of every n-th batch.
    pub grad_check_every: Option<usize>,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 8,
            seed: RngSeed::default(),
            grad_check_every: None,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.grad_check_every == Some(0) {
            return Err(Error::InvalidArgument(
                "grad_check_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

struct Adam {
    m: Weights,
    v: Weights,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(like: &Weights) -> Self {
        Adam {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut Weights, grad: &Weights, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

/// Fine-tune on annotated examples with the masked loss.
pub fn train(
    model: &TinyModel,
    examples: &[AugmentedExample],
    config: &TrainConfig,
) -> Result<TinyModel> {
    let seqs = examples
        .iter()
        .map(|e| TrainSequence::from_example(model, e))
        .collect::<Result<Vec<_>>>()?;
    train_sequences(model, &seqs, config, |_| {})
}

/// Mini-batch training on the mean weighted loss. Batches are drawn from a
/// seeded reshuffle each epoch, so a fixed seed gives bit-identical weights.
pub fn train_sequences(
    model: &TinyModel,
    seqs: &[TrainSequence],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(EpochStats),
) -> Result<TinyModel> {
    config.validate()?;
    if seqs.is_empty() {
        return Err(Error::Empty("training examples".into()));
    }
    let mut model = model.clone();
    let mut rng = config.seed.rng();
    let mut adam = Adam::new(&model.weights);
    let mut grad = model.weights.zeros_like();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            if let Some(every) = config.grad_check_every {
                if step.is_multiple_of(every) {
                    let err = grad_check_sequence(&model, &seqs[batch[0]], 1e-5)?;
                    if err > GRAD_CHECK_TOLERANCE {
                        return Err(Error::GradCheck { step, error: err });
                    }
                }
            }
            grad.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += accumulate_grad(&model, &seqs[i], scale, &mut grad)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            match config.optimizer {
                Optimizer::Adam => adam.apply(&mut model.weights, &grad, config.learning_rate),
                Optimizer::Sgd => {
                    for (p, g) in model.weights.tensors_mut().into_iter().zip(grad.tensors()) {
                        for (pi, gi) in p.iter_mut().zip(g) {
                            *pi -= config.learning_rate * gi;
                        }
                    }
                }
            }
            if !model.weights.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            step += 1;
        }
        on_epoch(EpochStats {
            epoch,
            mean_loss: epoch_loss / seqs.len() as f64,
        });
    }
    Ok(model)
}
