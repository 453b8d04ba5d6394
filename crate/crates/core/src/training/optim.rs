use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Group, ParamSet};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;

/// Adam moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Learning rates and numerical settings of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamSettings {
    /// Rate for the encoder and value head.
    pub lr_encoder: f64,
    /// Rate for the action path.
    pub lr_decoder: f64,
    pub eps: f64,
    /// Global L2 norm cap applied to the gradients before the update.
    pub max_grad_norm: f64,
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.data_mut()).for_each(|v| *v *= s);
    }
    norm
}

/// One bias-corrected Adam step after global-norm clipping. Returns the
/// gradient norm before clipping.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &mut [Tensor],
    state: &mut OptimState,
    settings: &AdamSettings,
) -> Result<f64> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads.iter()) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape("optimizer_step", g.shape(), params.get(id).shape()));
        }
        if !g.all_finite() {
            return Err(Error::numeric(format!("non-finite gradient for {}", params.name(id))));
        }
    }
    let norm = clip_grad_norm(grads, settings.max_grad_norm);
    state.step += 1;
    let bc1 = 1.0 - BETA1.powf(state.step as f64);
    let bc2 = 1.0 - BETA2.powf(state.step as f64);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let lr = match params.group(id) {
            Group::Encoder => settings.lr_encoder,
            Group::Decoder => settings.lr_decoder,
        };
        let i = id.index();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + settings.eps);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::filled(&[2], value), Group::Encoder);
        ps
    }

    const SETTINGS: AdamSettings = AdamSettings {
        lr_encoder: 0.01,
        lr_decoder: 0.01,
        eps: 1e-5,
        max_grad_norm: 10.0,
    };

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = one_param(0.7);
        let mut st = OptimState::new(&ps);
        let mut g = vec![Tensor::zeros(&[2])];
        optimizer_step(&mut ps, &mut g, &mut st, &SETTINGS).unwrap();
        assert_eq!(ps.tensors()[0].data(), &[0.7, 0.7]);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let mut ps = one_param(0.0);
        let mut st = OptimState::new(&ps);
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..500 {
            let mut g = vec![Tensor::filled(&[2], 3.0)];
            optimizer_step(&mut ps, &mut g, &mut st, &SETTINGS).unwrap();
            let now = ps.tensors()[0].data()[0];
            step = prev - now;
            prev = now;
        }
        assert!((step - 0.01).abs() < 1e-6, "{step}");
    }

    #[test]
    fn gradient_norm_is_capped() {
        let mut g = vec![Tensor::filled(&[4], 10.0)];
        let before = clip_grad_norm(&mut g, 10.0);
        assert_eq!(before, 20.0);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
        let mut small = vec![Tensor::filled(&[1], 0.5)];
        clip_grad_norm(&mut small, 10.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut ps = one_param(1.0);
        let mut st = OptimState::new(&ps);
        let mut g = vec![Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap()];
        assert!(optimizer_step(&mut ps, &mut g, &mut st, &SETTINGS).is_err());
        assert_eq!(ps.tensors()[0].data(), &[1.0, 1.0]);
        assert_eq!(st.step, 0);
    }
}
