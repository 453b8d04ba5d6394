//! Named parameter storage and the small layers built on it.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::Result;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which half of the model a parameter belongs to. The encoder half also
/// holds the value head; the decoder half holds everything on the action
/// path. Each half gets its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    groups: Vec<Group>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: Group) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.groups.push(group);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`. Differentiable when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters of a [`ParamSet`] recorded on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Replaces the bound value of one parameter, e.g. to route a frozen
    /// copy through the same forward code.
    pub fn rebind(&mut self, id: ParamId, var: Var<'t>) {
        self.vars[id.0] = var;
    }

    /// One gradient tensor per parameter, zeros where unreachable.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}

/// Affine map `x W + b` over the trailing axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        group: Group,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), orthogonal(inputs, outputs, gain, rng), group);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), group);
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&p.var(self.weight))?.add_row(&p.var(self.bias))
    }
}

/// Learned gain and bias of a layer norm.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, group: Group) -> Self {
        let gain = params.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0), group);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[dim]), group);
        Self { gain, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&p.var(self.gain), &p.var(self.bias))
    }
}

/// `rows × cols` matrix with orthonormal rows or columns (whichever is
/// fewer), scaled by `gain`.
pub fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let gauss = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = gauss.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(gain * m[(i, j)]);
        }
    }
    Tensor::new(vec![rows, cols], data).expect("orthogonal shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_columns_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = orthogonal(6, 4, 1.0, &mut rng);
        let d = w.data();
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..6).map(|i| d[i * 4 + a] * d[i * 4 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_wide_matrix_has_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = orthogonal(3, 5, 0.01, &mut rng);
        let d = w.data();
        for a in 0..3 {
            let dot: f64 = (0..5).map(|j| d[a * 5 + j] * d[a * 5 + j]).sum();
            assert!((dot - 1e-4).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_gradient_reaches_weight_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "l", 3, 2, 1.0, Group::Encoder, &mut rng);
        let tape = Tape::new();
        let bound = ps.bind(&tape, true);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]]).unwrap());
        let loss = lin.forward(&bound, &x).unwrap().sum();
        let grads = bound.gradients(&loss.backward().unwrap());
        assert_eq!(grads[lin.bias.index()].data(), &[2.0, 2.0]);
        assert_eq!(grads[lin.weight.index()].data(), &[1.0, 1.0, 3.0, 3.0, 3.0, 3.0]);
    }
}
