use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{bce_term, Tape, Tensor, Var};

/// `L = lambda_cls * BCE + lambda_reg * l2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 0.8,
            lambda_reg: 1.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cls >= 0.0 && self.lambda_reg >= 0.0)
            || !self.lambda_cls.is_finite()
            || !self.lambda_reg.is_finite()
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {} / {}",
                self.lambda_cls, self.lambda_reg
            )));
        }
        Ok(())
    }
}

/// Binary cross-entropy with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    bce_term(p, y)
}

/// Mean of [`bce_loss`] over a batch.
pub fn bce_batch(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::invalid(
            "bce_batch",
            format!("{} probabilities for {} labels", probs.len(), labels.len()),
        ));
    }
    Ok(probs.iter().zip(labels).map(|(&p, &y)| bce_term(p, y)).sum::<f64>() / probs.len() as f64)
}

/// Mean squared error over all `C x 4` entries.
pub fn l2_traj_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.numel() == 0 {
        return Err(Error::Shape {
            op: "l2_traj_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / pred.numel() as f64)
}

pub fn ted_loss(
    probs: &[f64],
    labels: &[f64],
    pred: &Tensor,
    target: &Tensor,
    w: LossWeights,
) -> Result<f64> {
    Ok(w.lambda_cls * bce_batch(probs, labels)? + w.lambda_reg * l2_traj_loss(pred, target)?)
}

/// Training objective on the tape: BCE alone, or the weighted sum when a
/// trajectory prediction and its target are given.
pub fn objective(
    tape: &mut Tape,
    prob: Var,
    labels: &[f64],
    traj: Option<(Var, Var)>,
    w: LossWeights,
) -> Result<Var> {
    let bce = tape.bce(prob, labels)?;
    match traj {
        Some((pred, target)) => {
            let l2 = tape.mse(pred, target)?;
            tape.weighted_sum(&[(bce, w.lambda_cls), (l2, w.lambda_reg)])
        }
        None => Ok(bce),
    }
}
