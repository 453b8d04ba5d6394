use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Variant;

/// Squared Bellman error of the value head.
///
/// `values` is `[B, n]` from the online network; `targets` is `[B, n]` and
/// already holds `R + γ (1 - done) V̄(next)`, computed without a tape. For
/// the autoregressive model every agent's value is fitted to the target;
/// the decentralised variant fits the mean over agents to the mean target.
pub fn encoder_loss<'t>(tape: &'t Tape, values: &Var<'t>, targets: &Tensor, variant: Variant) -> Result<Var<'t>> {
    if values.shape() != targets.shape() {
        return Err(Error::shape("encoder_loss", &values.shape(), targets.shape()));
    }
    let targets = tape.constant(targets.clone());
    match variant {
        Variant::Mat => Ok(values.sub(&targets)?.square().mean()),
        Variant::MatDec => {
            let n = values.shape()[1] as f64;
            let v = values.sum_last().scale(1.0 / n);
            let y = targets.sum_last().scale(1.0 / n);
            Ok(v.sub(&y)?.square().mean())
        }
    }
}

/// Clipped surrogate loss with entropy bonus, plus the fraction of ratios
/// outside the clip interval.
pub struct DecoderLoss<'t> {
    pub loss: Var<'t>,
    pub clip_fraction: f64,
}

/// `-mean(min(r Â, clip(r, 1-ε, 1+ε) Â)) - c·mean(H)` over `[B, n]` entries,
/// with `r = exp(log π - log π_old)`.
///
/// `labels[b]` names the rollout step of batch row `b` and is used to report
/// a non-finite ratio as `(t, m)`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_loss<'t>(
    tape: &'t Tape,
    log_probs: &Var<'t>,
    old_log_probs: &Tensor,
    advantages: &Tensor,
    entropy: &Var<'t>,
    clip: f64,
    entropy_coef: f64,
    labels: &[usize],
) -> Result<DecoderLoss<'t>> {
    let shape = log_probs.shape();
    for (name, other) in [("old log-probs", old_log_probs.shape()), ("advantages", advantages.shape())] {
        if other != shape.as_slice() {
            return Err(Error::shape(name, &shape, other));
        }
    }
    let ratio = log_probs.sub(&tape.constant(old_log_probs.clone()))?.exp();
    let r = ratio.value();
    let n = *shape.last().unwrap_or(&1);
    if let Some(bad) = r.data().iter().position(|v| !v.is_finite()) {
        let (row, m) = (bad / n, bad % n);
        let t = labels.get(row).copied().unwrap_or(row);
        return Err(Error::numeric(format!(
            "non-finite probability ratio at step t={t}, decoding position m={m}"
        )));
    }
    let clipped = r.data().iter().filter(|&&v| (v - 1.0).abs() > clip).count();
    let adv = tape.constant(advantages.clone());
    let surrogate = ratio.mul(&adv)?;
    let clipped_surrogate = ratio.clip(1.0 - clip, 1.0 + clip).mul(&adv)?;
    let objective = surrogate.minimum(&clipped_surrogate)?.mean();
    let loss = objective.neg().sub(&entropy.mean().scale(entropy_coef))?;
    Ok(DecoderLoss {
        loss,
        clip_fraction: clipped as f64 / r.len().max(1) as f64,
    })
}
