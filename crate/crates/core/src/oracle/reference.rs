//! Straight-line re-implementations used to cross-check the training code.

use crate::model::Variant;

/// Advantages by explicit discounted summation of TD errors,
/// `Â_t = Σ_l (γλ)^l δ_{t+l}`, truncated at episode ends. Quadratic in the
/// sequence length on purpose: it shares no code with the recursion.
pub fn reference_gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let t_len = rewards.len();
    let value_after = |t: usize| if t + 1 < t_len { values[t + 1] } else { bootstrap };
    let delta: Vec<f64> = (0..t_len)
        .map(|t| {
            let live = if dones[t] { 0.0 } else { 1.0 };
            rewards[t] + gamma * value_after(t) * live - values[t]
        })
        .collect();
    (0..t_len)
        .map(|t| {
            let mut sum = 0.0;
            let mut weight = 1.0;
            for l in t..t_len {
                sum += weight * delta[l];
                if dones[l] {
                    break;
                }
                weight *= gamma * lambda;
            }
            sum
        })
        .collect()
}

/// Mean squared Bellman error over `[B][n]` values and targets.
pub fn reference_encoder_loss(values: &[Vec<f64>], targets: &[Vec<f64>], variant: Variant) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for (v, y) in values.iter().zip(targets) {
        match variant {
            Variant::Mat => {
                for (a, b) in v.iter().zip(y) {
                    total += (a - b) * (a - b);
                    count += 1.0;
                }
            }
            Variant::MatDec => {
                let n = v.len() as f64;
                let d = v.iter().sum::<f64>() / n - y.iter().sum::<f64>() / n;
                total += d * d;
                count += 1.0;
            }
        }
    }
    total / count
}

/// Clipped surrogate loss with entropy bonus over `[B][n]` entries.
pub fn reference_decoder_loss(
    log_probs: &[Vec<f64>],
    old_log_probs: &[Vec<f64>],
    advantages: &[Vec<f64>],
    entropy: &[Vec<f64>],
    clip: f64,
    entropy_coef: f64,
) -> f64 {
    let mut objective = 0.0;
    let mut ent = 0.0;
    let mut count = 0.0;
    for b in 0..log_probs.len() {
        for m in 0..log_probs[b].len() {
            let r = (log_probs[b][m] - old_log_probs[b][m]).exp();
            let a = advantages[b][m];
            let clipped = r.clamp(1.0 - clip, 1.0 + clip);
            objective += (r * a).min(clipped * a);
            ent += entropy[b][m];
            count += 1.0;
        }
    }
    -objective / count - entropy_coef * ent / count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let r = [1.0, 2.0, 3.0];
        let v = [0.5, 0.25, 0.125];
        let td = reference_gae(&r, &v, &[false; 3], 1.0, 0.9, 0.0);
        assert_eq!(td, vec![1.0 + 0.9 * 0.25 - 0.5, 2.0 + 0.9 * 0.125 - 0.25, 3.0 + 0.9 - 0.125]);
        // λ = 1: discounted return minus the value
        let mc = reference_gae(&r, &v, &[false; 3], 1.0, 0.9, 1.0);
        let ret0 = 1.0 + 0.9 * 2.0 + 0.81 * 3.0 + 0.729 * 1.0;
        assert!((mc[0] - (ret0 - 0.5)).abs() < 1e-12);
    }
}
