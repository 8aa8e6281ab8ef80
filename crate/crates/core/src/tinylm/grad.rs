use crate::annotator::AugmentedExample;
use crate::error::{Error, Result};

use super::{dot, gelu_grad, mat_vec_acc, outer_acc, softmax_in_place, TinyModel, Trace, Weights};

/// A tokenized training sequence: model input ids plus weighted targets.
///
/// `targets[k] = (position, token, weight)` asks the distribution at
/// `position` to predict `token`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub ids: Vec<usize>,
    pub targets: Vec<(usize, usize, f64)>,
}

impl TrainSequence {
    /// Prompt followed by a completion; the final completion token is only
    /// a target, never an input.
    pub fn from_parts(prompt: &[usize], completion: &[usize], weights: &[f64]) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt".into()));
        }
        if completion.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: completion.len(),
                right: weights.len(),
            });
        }
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(&completion[..completion.len().saturating_sub(1)]);
        let targets = completion
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(k, (&tok, &w))| (prompt.len() - 1 + k, tok, w))
            .collect();
        Ok(TrainSequence { ids, targets })
    }

    pub fn from_example(model: &TinyModel, ex: &AugmentedExample) -> Result<Self> {
        let prompt = model.encode_prompt(&ex.prompt)?;
        let completion = model.vocab.encode_tokens(&ex.completion_tokens)?;
        let weights: Vec<f64> = ex.loss_weights.iter().map(|&w| f64::from(w)).collect();
        Self::from_parts(&prompt, &completion, &weights)
    }

    pub fn total_weight(&self) -> f64 {
        self.targets.iter().map(|t| t.2).sum()
    }
}

/// Weighted mean negative log-likelihood, without gradients.
pub fn sequence_loss(model: &TinyModel, seq: &TrainSequence) -> Result<f64> {
    sequence_loss_biased(model, seq, None)
}

fn sequence_loss_biased(
    model: &TinyModel,
    seq: &TrainSequence,
    bias: Option<(usize, usize, f64)>,
) -> Result<f64> {
    let total = seq.total_weight();
    if total <= 0.0 {
        return Err(Error::AllZeroWeights);
    }
    let trace = model.forward(&seq.ids)?;
    let mut loss = 0.0;
    for &(pos, tok, w) in &seq.targets {
        if w == 0.0 {
            continue;
        }
        let mut logits = model.logits_at(&trace, pos);
        if let Some((bp, bt, delta)) = bias {
            if bp == pos {
                logits[bt] += delta;
            }
        }
        loss += w * nll(&logits, tok);
    }
    Ok(loss / total)
}

fn nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Loss and its gradient for one sequence.
pub fn loss_and_grad(model: &TinyModel, seq: &TrainSequence) -> Result<(f64, Weights)> {
    let mut grad = model.weights.zeros_like();
    let loss = accumulate_grad(model, seq, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// Add `scale * d(loss)/d(params)` into `grad`; returns the unscaled loss.
///
/// Weight-0 targets are skipped entirely, so they contribute exactly
/// nothing to either the loss or the gradient.
pub(crate) fn accumulate_grad(
    model: &TinyModel,
    seq: &TrainSequence,
    scale: f64,
    grad: &mut Weights,
) -> Result<f64> {
    let total = seq.total_weight();
    if total <= 0.0 {
        return Err(Error::AllZeroWeights);
    }
    let t = model.forward(&seq.ids)?;
    let d = model.dims.d;
    let hidden = model.dims.hidden;
    let len = t.len;
    let w = &model.weights;

    let mut dz = vec![0.0; len * d];
    let mut loss = 0.0;
    for &(pos, tok, wt) in &seq.targets {
        if wt == 0.0 {
            continue;
        }
        let mut p = model.logits_at(&t, pos);
        loss += wt * nll(&p, tok);
        softmax_in_place(&mut p);
        p[tok] -= 1.0;
        let coef = scale * wt / total;
        let z = &t.z[pos * d..(pos + 1) * d];
        let dzi = &mut dz[pos * d..(pos + 1) * d];
        for (v, &pv) in p.iter().enumerate() {
            let dl = coef * pv;
            if dl == 0.0 {
                continue;
            }
            let row = v * d..(v + 1) * d;
            for (dzj, &ej) in dzi.iter_mut().zip(&w.emb[row.clone()]) {
                *dzj += dl * ej;
            }
            // Tied output projection.
            for (gj, &zj) in grad.emb[row].iter_mut().zip(z) {
                *gj += dl * zj;
            }
        }
    }

    backward_block(model, &t, &seq.ids, &dz, grad, d, hidden);
    Ok(loss / total)
}

fn backward_block(
    model: &TinyModel,
    t: &Trace,
    ids: &[usize],
    dz: &[f64],
    grad: &mut Weights,
    d: usize,
    hidden: usize,
) {
    let len = t.len;
    let w = &model.weights;
    let mut dx = vec![0.0; len * d];
    let mut dctx = vec![0.0; len * d];
    let mut dg = vec![0.0; hidden];
    let mut du = vec![0.0; hidden];

    for i in 0..len {
        let dzi = &dz[i * d..(i + 1) * d];
        if dzi.iter().all(|&x| x == 0.0) {
            continue;
        }
        // MLP branch: z = h + gelu(h W1 + b1) W2 + b2.
        let mut dh = dzi.to_vec();
        for (b, g) in grad.b2.iter_mut().zip(dzi) {
            *b += g;
        }
        outer_acc(&t.g[i * hidden..(i + 1) * hidden], dzi, &mut grad.w2);
        dg.fill(0.0);
        mat_vec_acc(&w.w2, dzi, &mut dg);
        for j in 0..hidden {
            du[j] = dg[j] * gelu_grad(t.u[i * hidden + j]);
        }
        for (b, g) in grad.b1.iter_mut().zip(&du) {
            *b += g;
        }
        outer_acc(&t.h[i * d..(i + 1) * d], &du, &mut grad.w1);
        mat_vec_acc(&w.w1, &du, &mut dh);

        // Attention output projection: h = x + ctx Wo.
        for (x, g) in dx[i * d..(i + 1) * d].iter_mut().zip(&dh) {
            *x += g;
        }
        outer_acc(&t.ctx[i * d..(i + 1) * d], &dh, &mut grad.wo);
        mat_vec_acc(&w.wo, &dh, &mut dctx[i * d..(i + 1) * d]);
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; len * d];
    let mut dk = vec![0.0; len * d];
    let mut dv = vec![0.0; len * d];
    let mut da = vec![0.0; len];
    for i in 0..len {
        let dci = &dctx[i * d..(i + 1) * d];
        if dci.iter().all(|&x| x == 0.0) {
            continue;
        }
        let a = &t.att[i * len..i * len + i + 1];
        for j in 0..=i {
            da[j] = dot(dci, &t.v[j * d..(j + 1) * d]);
            for (dvj, c) in dv[j * d..(j + 1) * d].iter_mut().zip(dci) {
                *dvj += a[j] * c;
            }
        }
        let mean: f64 = (0..=i).map(|j| a[j] * da[j]).sum();
        for j in 0..=i {
            let ds = a[j] * (da[j] - mean) * scale;
            if ds == 0.0 {
                continue;
            }
            for ((dqi, kj), (dkj, qi)) in dq[i * d..(i + 1) * d]
                .iter_mut()
                .zip(&t.k[j * d..(j + 1) * d])
                .zip(
                    dk[j * d..(j + 1) * d]
                        .iter_mut()
                        .zip(&t.q[i * d..(i + 1) * d]),
                )
            {
                *dqi += ds * kj;
                *dkj += ds * qi;
            }
        }
    }

    for i in 0..len {
        let x = &t.x[i * d..(i + 1) * d];
        let dxi = &mut dx[i * d..(i + 1) * d];
        for (proj, gproj, dproj) in [
            (&w.wq, &mut grad.wq, &dq),
            (&w.wk, &mut grad.wk, &dk),
            (&w.wv, &mut grad.wv, &dv),
        ] {
            let dp = &dproj[i * d..(i + 1) * d];
            outer_acc(x, dp, gproj);
            mat_vec_acc(proj, dp, dxi);
        }
        let id = ids[i];
        for (g, v) in grad.emb[id * d..(id + 1) * d].iter_mut().zip(dxi.iter()) {
            *g += v;
        }
        for (g, v) in grad.pos[i * d..(i + 1) * d].iter_mut().zip(dxi.iter()) {
            *g += v;
        }
    }
}

/// Masked loss of an annotated example and its gradient.
pub fn masked_loss(model: &TinyModel, example: &AugmentedExample) -> Result<(f64, Weights)> {
    loss_and_grad(model, &TrainSequence::from_example(model, example)?)
}

/// Central finite differences over every parameter against the analytic
/// gradient. Returns the maximum relative error; entries whose analytic
/// magnitude is below 1e-8 are compared absolutely.
pub fn grad_check(model: &TinyModel, example: &AugmentedExample, epsilon: f64) -> Result<f64> {
    let seq = TrainSequence::from_example(model, example)?;
    grad_check_sequence(model, &seq, epsilon)
}

pub(crate) fn grad_check_sequence(
    model: &TinyModel,
    seq: &TrainSequence,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1e-2], got {epsilon}"
        )));
    }
    let (_, analytic) = loss_and_grad(model, seq)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..model.weights.num_params() {
        let orig = model.weights.get(i);
        probe.weights.set(i, orig + epsilon);
        let plus = sequence_loss(&probe, seq)?;
        probe.weights.set(i, orig - epsilon);
        let minus = sequence_loss(&probe, seq)?;
        probe.weights.set(i, orig);
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.get(i);
        let err = if a.abs() < 1e-8 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / a.abs().max(numeric.abs())
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Finite-difference derivative of the example's loss with respect to the
/// log-probability its target token gets at completion index `k`
/// (perturbing that target's logit by +/- `epsilon`).
pub fn target_logit_sensitivity(
    model: &TinyModel,
    example: &AugmentedExample,
    k: usize,
    epsilon: f64,
) -> Result<f64> {
    let seq = TrainSequence::from_example(model, example)?;
    let &(pos, tok, _) = seq
        .targets
        .get(k)
        .ok_or_else(|| Error::InvalidArgument(format!("completion index {k} out of range")))?;
    let plus = sequence_loss_biased(model, &seq, Some((pos, tok, epsilon)))?;
    let minus = sequence_loss_biased(model, &seq, Some((pos, tok, -epsilon)))?;
    Ok((plus - minus) / (2.0 * epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::{ConfidenceTag, UN_TOKEN};
    use crate::tinylm::{add_confidence_tokens, ModelDims, Vocab};
    use crate::types::RngSeed;

    fn model(d: usize, seed: u64) -> TinyModel {
        let vocab = Vocab::build(["q", "x", "y", "A", "B", "C"]).unwrap();
        add_confidence_tokens(&TinyModel::new(
            vocab,
            ModelDims::with_width(d, 12),
            RngSeed(seed),
        ))
        .unwrap()
    }

    fn example(tag: ConfidenceTag, answer: &[&str]) -> AugmentedExample {
        AugmentedExample::new(
            "q1",
            "q x y",
            answer.iter().map(|s| s.to_string()).collect(),
            tag,
        )
    }

    #[test]
    fn un_loss_reads_only_confidence_position() {
        let m = model(6, 1);
        let ex = example(ConfidenceTag::Unconfident, &["A", "B", "C"]);
        assert_eq!(ex.loss_weights, vec![0, 0, 0, 1]);
        let seq = TrainSequence::from_example(&m, &ex).unwrap();
        let probs = m.position_probs(&seq.ids).unwrap();
        let un = m.vocab.id(UN_TOKEN).unwrap();
        let last = seq.ids.len() - 1;
        let (loss, _) = masked_loss(&m, &ex).unwrap();
        assert!((loss + probs[last][un].ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let vocab = Vocab::build((0..9).map(|i| format!("t{i}"))).unwrap();
        let m =
            add_confidence_tokens(&TinyModel::zeros(vocab, ModelDims::with_width(4, 8))).unwrap();
        assert_eq!(m.vocab_size(), 12);
        let ex = AugmentedExample::new("q", "t1 t2", vec![], ConfidenceTag::Confident);
        let (loss, _) = masked_loss(&m, &ex).unwrap();
        assert!((loss - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn three_token_cross_entropy() {
        // d = V = 3, identity embeddings, zero block: logits = e_last + pos.
        let vocab = Vocab::from_list(vec!["a".into(), "b".into(), "c".into()]);
        let mut m = TinyModel::zeros(vocab, ModelDims::with_width(3, 2));
        m.weights.emb = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        // Prompt "a" at position 0: z = e_a + pos0 = (1, 0, 0) + (0, 2, -1).
        m.weights.pos[..3].copy_from_slice(&[0.0, 2.0, -1.0]);
        let seq = TrainSequence::from_parts(&[0], &[1], &[1.0]).unwrap();
        let loss = sequence_loss(&m, &seq).unwrap();
        // logits (1, 2, -1), target b: -ln(e^2 / (e^1 + e^2 + e^-1)).
        let expected = -(2f64.exp() / (1f64.exp() + 2f64.exp() + (-1f64).exp())).ln();
        assert!((loss - expected).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let m = model(4, 0);
        let mut ex = example(ConfidenceTag::Confident, &["A"]);
        ex.completion_tokens[0] = "Z".into();
        assert!(matches!(masked_loss(&m, &ex), Err(Error::OutOfVocab(_))));
        let seq = TrainSequence::from_parts(&[1], &[2], &[0.0]).unwrap();
        assert!(matches!(
            loss_and_grad(&m, &seq),
            Err(Error::AllZeroWeights)
        ));
        let ex = example(ConfidenceTag::Confident, &["A"]);
        assert!(grad_check(&m, &ex, 0.0).is_err());
        assert!(grad_check(&m, &ex, 0.1).is_err());
    }

    #[test]
    fn grad_check_cn() {
        let m = model(6, 4);
        let ex = example(ConfidenceTag::Confident, &["A", "B"]);
        let err = grad_check(&m, &ex, 1e-4).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn grad_check_un() {
        let m = model(6, 5);
        let ex = example(ConfidenceTag::Unconfident, &["C"]);
        assert!(grad_check(&m, &ex, 1e-4).unwrap() < 1e-4);
    }

    #[test]
    fn masked_positions_have_zero_sensitivity() {
        let m = model(6, 6);
        let ex = example(ConfidenceTag::Unconfident, &["A", "B"]);
        assert_eq!(target_logit_sensitivity(&m, &ex, 0, 1e-4).unwrap(), 0.0);
        assert_eq!(target_logit_sensitivity(&m, &ex, 1, 1e-4).unwrap(), 0.0);
        assert!(target_logit_sensitivity(&m, &ex, 2, 1e-4).unwrap().abs() > 1e-3);
    }

    #[test]
    fn un_loss_ignores_answer_targets() {
        // Swapping which token the masked positions "should" predict leaves
        // the loss unchanged when the model input is the same.
        let m = model(6, 7);
        let ex = example(ConfidenceTag::Unconfident, &["A", "B"]);
        let seq = TrainSequence::from_example(&m, &ex).unwrap();
        let mut other = seq.clone();
        other.targets[0].1 = m.vocab.id("C").unwrap();
        assert_eq!(
            sequence_loss(&m, &seq).unwrap(),
            sequence_loss(&m, &other).unwrap()
        );
        let (_, g1) = loss_and_grad(&m, &seq).unwrap();
        let (_, g2) = loss_and_grad(&m, &other).unwrap();
        assert_eq!(g1, g2);
    }
}
