use crate::autodiff::{Tape, Var};
use crate::data::SampleBundle;
use crate::error::{Error, Result};
use crate::model::HeadVars;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the six intermediate-checkpoint terms relative to the final term.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.1 }
    }
}

impl LossConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be finite and nonnegative, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

/// A recorded masked MSE and how many entries it averaged over.
#[derive(Debug, Clone, Copy)]
pub struct MaskedLoss {
    pub value: Var,
    pub observed: usize,
}

impl MaskedLoss {
    /// `true` when no entry was observed and the term was replaced by 0.
    pub fn is_empty(&self) -> bool {
        self.observed == 0
    }
}

/// Mean squared error over entries where `mask` is nonzero.
pub fn masked_mse(tape: &mut Tape, pred: Var, target: &Tensor, mask: &Tensor) -> Result<MaskedLoss> {
    let shape = tape.value(pred).shape().to_vec();
    for t in [target, mask] {
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "masked_mse",
                lhs: shape,
                rhs: t.shape().to_vec(),
            });
        }
    }
    let observed = mask.data().iter().filter(|m| **m != 0.0).count();
    if observed == 0 {
        log::warn!("masked_mse: no observed entries; term contributes 0");
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(MaskedLoss { value: zero, observed });
    }
    let t = tape.constant(target.clone());
    let m = tape.constant(mask.clone());
    let diff = tape.sub(pred, t)?;
    let diff = tape.mul(diff, m)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    let value = tape.scale(total, 1.0 / observed as f64)?;
    Ok(MaskedLoss { value, observed })
}

/// Plain-value masked MSE; `(0.0, 0)` when nothing is observed.
pub fn masked_mse_value(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<(f64, usize)> {
    pred.require_same_shape(target, "masked_mse")?;
    pred.require_same_shape(mask, "masked_mse")?;
    let mut total = 0.0;
    let mut observed = 0;
    for ((p, t), m) in pred.data().iter().zip(target.data()).zip(mask.data()) {
        if *m != 0.0 {
            total += (p - t) * (p - t);
            observed += 1;
        }
    }
    if observed == 0 {
        return Ok((0.0, 0));
    }
    Ok((total / observed as f64, observed))
}

/// `L = mse(final) + alpha / 6 * sum of the six intermediate mse terms`.
pub fn composite_loss(tape: &mut Tape, head: &HeadVars, bundle: &SampleBundle, cfg: &LossConfig) -> Result<Var> {
    let p = &bundle.predicted;
    let last = masked_mse(tape, head.fused, &p.values, &p.mask)?.value;
    let mut inter: Option<Var> = None;
    for (preds, targets) in head.intermediate.iter().zip(&bundle.intermediate) {
        for (pred, seg) in preds.iter().zip(targets) {
            let term = masked_mse(tape, *pred, &seg.values, &seg.mask)?.value;
            inter = Some(match inter {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let inter = inter.expect("six intermediate terms");
    let weighted = tape.scale(inter, cfg.alpha / 6.0)?;
    tape.add(last, weighted)
}
