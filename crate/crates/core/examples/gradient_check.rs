//! Compares reverse-mode gradients with central finite differences: first
//! for a small attention-like expression, then for the value loss with
//! respect to every value-head parameter of a small model.

use mat_core::autodiff::gradcheck::{max_relative_error, numeric_gradient, FLOOR, STEP};
use mat_core::autodiff::{Tape, Tensor};
use mat_core::envs::ActionSpace;
use mat_core::model::{AgentOrdering, MatModel, ModelSpec, Variant};
use mat_core::training::encoder_loss;
use mat_core::transformer::Activation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> mat_core::Result<Tensor> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn main() -> mat_core::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // softmax(q kᵀ) v through tanh and a sum, as a function of q, k and v.
    let inputs = vec![random(&[1, 3, 4], &mut rng)?, random(&[1, 3, 4], &mut rng)?, random(&[1, 3, 4], &mut rng)?];
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = vars[0].bmm_nt(&vars[1])?.softmax(2)?.bmm(&vars[2])?.tanh().sum();
    let grads = out.backward()?;
    let value = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let v: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let attend = || -> mat_core::Result<f64> { v[0].bmm_nt(&v[1])?.softmax(2)?.bmm(&v[2])?.tanh().sum().item() };
        attend().unwrap_or(f64::NAN)
    };
    for (i, name) in ["q", "k", "v"].iter().enumerate() {
        let numeric = numeric_gradient(value, &inputs, i, STEP);
        let err = max_relative_error(grads.wrt(vars[i]).data(), numeric.data(), FLOOR);
        println!("attention d/d{name}: max relative error {err:.2e}");
    }

    // Value loss of a small model, differentiated with respect to the value head.
    let spec = ModelSpec {
        n_agents: 2,
        obs_dim: 3,
        action_space: ActionSpace::Discrete(3),
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        activation: Activation::Gelu,
        variant: Variant::Mat,
    };
    let model = MatModel::new(spec, &mut rng)?;
    let obs: Vec<Tensor> = (0..3).map(|_| random(&[2, 3], &mut rng)).collect::<mat_core::Result<_>>()?;
    let actions = [[0.0, 1.0], [2.0, 2.0], [1.0, 0.0]];
    let targets = random(&[3, 2], &mut rng)?;
    let ordering = AgentOrdering::identity(2);
    let loss = |m: &MatModel, trainable: bool| -> mat_core::Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = m.params().bind(&tape, trainable);
        let obs_refs: Vec<&Tensor> = obs.iter().collect();
        let acts: Vec<&[f64]> = actions.iter().map(|a| a.as_slice()).collect();
        let eval = m.evaluate(&p, &tape, &obs_refs, &acts, &ordering)?;
        let l = encoder_loss(&tape, &eval.values, &targets, Variant::Mat)?;
        let grads = if trainable { p.gradients(&l.backward()?) } else { Vec::new() };
        Ok((l.item()?, grads))
    };
    let (value, grads) = loss(&model, true)?;
    println!("value loss {value:.6}");
    let mut work = model.clone();
    for id in model.params().ids().filter(|&id| model.params().name(id).starts_with("encoder.value")) {
        let mut numeric = Vec::new();
        for i in 0..model.params().get(id).len() {
            let orig = model.params().get(id).data()[i];
            work.params_mut().get_mut(id).data_mut()[i] = orig + STEP;
            let plus = loss(&work, false)?.0;
            work.params_mut().get_mut(id).data_mut()[i] = orig - STEP;
            let minus = loss(&work, false)?.0;
            work.params_mut().get_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
        let err = max_relative_error(grads[id.index()].data(), &numeric, FLOOR);
        println!("  {:<28} max relative error {err:.2e}", model.params().name(id));
    }
    Ok(())
}
