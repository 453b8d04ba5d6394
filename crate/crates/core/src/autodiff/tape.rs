use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Records operations over tensors for one reverse pass.
///
/// A tape is confined to the thread that created it. Frozen parameters
/// live outside as plain [`Tensor`]s and enter the tape by copy through
/// [`Tape::param`] or [`Tape::constant`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Bmm { a: usize, b: usize, trans_b: bool },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LogSoftmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Rc<Vec<f64>>, inv_std: Rc<Vec<f64>> },
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Minimum(usize, usize),
    Clip { x: usize, lo: f64, hi: f64 },
    GatherLast { x: usize, idx: Rc<Vec<usize>> },
    ConcatLast(Vec<usize>),
    Reshape(usize),
    TakePosition { x: usize, pos: usize },
    StackPositions(Vec<usize>),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

/// Gradients produced by [`Var::backward`], indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when the loss
    /// does not depend on it through differentiable paths.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `var`; zeros when unreachable.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = &self.shapes[var.id];
        match self.get(var) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Number of nodes whose backward rule ran.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a differentiable leaf.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single value of a scalar var.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.id);
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(value, op, needs)
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(out, op)
    }

    fn zip(&self, other: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.zip(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.zip(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.zip(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.zip(other, "minimum", f64::min)?;
        Ok(self.binary(other, out, Op::Minimum(self.id, other.id)))
    }

    fn row_broadcast(&self, row: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(row)?;
        let (a, b) = (self.value(), row.value());
        let d = a.last_dim();
        if b.shape() != [d] {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % d]))
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    /// Adds a `[d]` vector to every trailing-axis row.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let out = self.row_broadcast(row, "add_row", |x, y| x + y)?;
        Ok(self.binary(row, out, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every trailing-axis row by a `[d]` vector.
    pub fn mul_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let out = self.row_broadcast(row, "mul_row", |x, y| x * y)?;
        Ok(self.binary(row, out, Op::MulRow(self.id, row.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.map(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.map(|v| v + c, Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.map(|v| v.max(0.0), Op::Relu(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.map(
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Op::Gelu(self.id),
        )
    }

    pub fn tanh(&self) -> Var<'t> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::numeric(format!("log of non-positive value {bad}")));
        }
        Ok(self.map(f64::ln, Op::Log(self.id)))
    }

    /// Clamps to `[lo, hi]`; gradient 1 inside the interval, 0 outside.
    pub fn clip(&self, lo: f64, hi: f64) -> Var<'t> {
        self.map(|v| v.clamp(lo, hi), Op::Clip { x: self.id, lo, hi })
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let s: f64 = x.data().iter().sum();
        self.unary(Tensor::scalar(s / x.len() as f64), Op::Mean(self.id))
    }

    /// Sums over the trailing axis, dropping it.
    pub fn sum_last(&self) -> Var<'t> {
        let x = self.value();
        let d = x.last_dim();
        let data = x.data().chunks(d).map(|c| c.iter().sum()).collect();
        let shape = leading(x.shape());
        self.unary(Tensor::new(shape, data).expect("sum_last"), Op::SumLast(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.unary(x, Op::Reshape(self.id)))
    }

    /// `[..., k] · [k, p] -> [..., p]`, leading axes treated as rows.
    pub fn matmul(&self, w: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(w)?;
        let (a, b) = (self.value(), w.value());
        let k = a.last_dim();
        if b.shape().len() != 2 || b.shape()[0] != k || a.shape().is_empty() {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let p = b.shape()[1];
        let m = a.rows();
        let mut out = vec![0.0; m * p];
        kernels::gemm_nn(a.data(), b.data(), &mut out, m, k, p);
        let mut shape = leading(a.shape());
        shape.push(p);
        let t = Tensor::new(shape, out)?;
        Ok(self.binary(w, t, Op::MatMul(self.id, w.id)))
    }

    /// Batched product `[B, m, k] · [B, k, p] -> [B, m, p]`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.batched(other, false)
    }

    /// Batched product against the transpose: `[B, m, k] · [B, p, k]^T -> [B, m, p]`.
    pub fn bmm_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.batched(other, true)
    }

    fn batched(&self, other: &Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (bsz, m, k) = if ok { (sa[0], sa[1], sa[2]) } else { (0, 0, 0) };
        let (kb, p) = if trans_b { (sb.get(2), sb.get(1)) } else { (sb.get(1), sb.get(2)) };
        if !ok || kb != Some(&k) {
            return Err(Error::shape("bmm", sa, sb));
        }
        let p = *p.expect("checked");
        let mut out = vec![0.0; bsz * m * p];
        for bi in 0..bsz {
            let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
            let bd = &b.data()[bi * k * p..(bi + 1) * k * p];
            let od = &mut out[bi * m * p..(bi + 1) * m * p];
            if trans_b {
                kernels::gemm_nt(ad, bd, od, m, k, p);
            } else {
                kernels::gemm_nn(ad, bd, od, m, k, p);
            }
        }
        let t = Tensor::new(vec![bsz, m, p], out)?;
        Ok(self.binary(
            other,
            t,
            Op::Bmm {
                a: self.id,
                b: other.id,
                trans_b,
            },
        ))
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::contract(format!("softmax axis {axis} invalid for shape {shape:?}")));
        }
        check_finite(&x, "softmax")?;
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; x.len()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        Ok(self.unary(
            t,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Softmax over the trailing axis of `[..., m, n]` restricted to entries
    /// where `mask[r * n + j]` holds. Excluded entries are exactly zero.
    pub fn masked_softmax(&self, mask: &[bool]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if shape.len() < 2 || mask.len() != shape[shape.len() - 2] * shape[shape.len() - 1] {
            return Err(Error::shape("masked_softmax", shape, &[mask.len()]));
        }
        check_finite(&x, "masked_softmax")?;
        let n = x.last_dim();
        let m = shape[shape.len() - 2];
        let mut out = vec![0.0; x.len()];
        for (row_idx, (xr, yr)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mr = &mask[(row_idx % m) * n..(row_idx % m + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if mr[j] {
                    max = max.max(xr[j]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!("attention row {} has no permitted positions", row_idx % m)));
            }
            let mut z = 0.0;
            for j in 0..n {
                if mr[j] {
                    yr[j] = (xr[j] - max).exp();
                    z += yr[j];
                }
            }
            for j in 0..n {
                if mr[j] {
                    yr[j] /= z;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let len = n;
        Ok(self.unary(
            t,
            Op::Softmax {
                x: self.id,
                outer: x.len() / len,
                len,
                inner: 1,
            },
        ))
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        check_finite(&x, "log_softmax")?;
        let n = x.last_dim();
        let mut out = vec![0.0; x.len()];
        for (xr, yr) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (y, v) in yr.iter_mut().zip(xr) {
                *y = v - lse;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.unary(t, Op::LogSoftmax(self.id)))
    }

    /// Per-row normalisation (population variance, eps 1e-5) then affine.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let x = self.value();
        let d = x.last_dim();
        let (g, b) = (gain.value(), bias.value());
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), g.shape()));
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xr[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let needs = [self.id, gain.id, bias.id].iter().any(|&i| self.tape.needs(i));
        Ok(self.tape.push(
            t,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat: Rc::new(xhat),
                inv_std: Rc::new(inv_std),
            },
            needs,
        ))
    }

    /// Picks `x[..., idx[r]]` from each trailing-axis row.
    pub fn gather_last(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let d = x.last_dim();
        if idx.len() != x.rows() {
            return Err(Error::shape("gather_last", x.shape(), &[idx.len()]));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= d) {
            return Err(Error::contract(format!("gather index {bad} out of range for width {d}")));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| x.data()[r * d + i]).collect();
        let t = Tensor::new(leading(x.shape()), data)?;
        Ok(self.unary(
            t,
            Op::GatherLast {
                x: self.id,
                idx: Rc::new(idx.to_vec()),
            },
        ))
    }

    /// Concatenates along the trailing axis; leading shapes must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let lead = leading(values[0].shape());
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            if leading(v.shape()) != lead {
                return Err(Error::shape("concat_last", values[0].shape(), v.shape()));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = values[0].rows();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|p| first.tape.needs(p.id));
        let t = Tensor::new(shape, out)?;
        Ok(first
            .tape
            .push(t, Op::ConcatLast(parts.iter().map(|p| p.id).collect()), needs))
    }

    /// Row `pos` of axis 1 of a `[B, n, d]` tensor, as `[B, d]`.
    pub fn take_position(&self, pos: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || pos >= s[1] {
            return Err(Error::shape("take_position", s, &[pos]));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&x.data()[(bi * n + pos) * d..(bi * n + pos + 1) * d]);
        }
        let t = Tensor::new(vec![b, d], out)?;
        Ok(self.unary(t, Op::TakePosition { x: self.id, pos }))
    }

    /// Inverse of [`take_position`](Self::take_position): stacks `n` `[B, d]`
    /// tensors into `[B, n, d]`.
    pub fn stack_positions(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let s0 = values[0].shape().to_vec();
        if s0.len() != 2 {
            return Err(Error::shape("stack_positions", &s0, &[2]));
        }
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            if v.shape() != s0.as_slice() {
                return Err(Error::shape("stack_positions", &s0, v.shape()));
            }
        }
        let (b, d, n) = (s0[0], s0[1], parts.len());
        let mut out = vec![0.0; b * n * d];
        for (pos, v) in values.iter().enumerate() {
            for bi in 0..b {
                out[(bi * n + pos) * d..(bi * n + pos + 1) * d].copy_from_slice(&v.data()[bi * d..(bi + 1) * d]);
            }
        }
        let needs = parts.iter().any(|p| first.tape.needs(p.id));
        let t = Tensor::new(vec![b, n, d], out)?;
        Ok(first
            .tape
            .push(t, Op::StackPositions(parts.iter().map(|p| p.id).collect()), needs))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self) -> Result<Gradients> {
        let loss = self.value();
        if !loss.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.tape.nodes.borrow();
        let count = self.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);
        let mut visited = 0;
        for id in (0..count).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            visited += 1;
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            visited,
        })
    }
}

fn leading(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

fn check_finite(x: &Tensor, op: &str) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite input to {op}")))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |s| axpy(s, g, 1.0));
            accumulate(grads, nodes, *b, |s| axpy(s, g, 1.0));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |s| axpy(s, g, 1.0));
            accumulate(grads, nodes, *b, |s| axpy(s, g, -1.0));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, |s| axpy(s, g, 1.0));
            let d = val(*b).len();
            accumulate(grads, nodes, *b, |s| {
                for (i, gi) in g.iter().enumerate() {
                    s[i % d] += gi;
                }
            });
        }
        Op::MulRow(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let d = bv.len();
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i % d];
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for (i, gi) in g.iter().enumerate() {
                    s[i % d] += gi * av[i];
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, |s| axpy(s, g, *c)),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, |s| axpy(s, g, 1.0)),
        Op::MatMul(a, w) => {
            let (av, wv) = (val(*a), val(*w));
            let k = av.last_dim();
            let p = wv.shape()[1];
            let m = av.rows();
            accumulate(grads, nodes, *a, |s| kernels::gemm_nt(g, wv.data(), s, m, p, k));
            accumulate(grads, nodes, *w, |s| kernels::gemm_tn(av.data(), g, s, m, k, p));
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let p = out.shape()[2];
            accumulate(grads, nodes, *a, |s| {
                for bi in 0..bsz {
                    let gs = &g[bi * m * p..(bi + 1) * m * p];
                    let bs = &bv.data()[bi * k * p..(bi + 1) * k * p];
                    let ss = &mut s[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        // dA = G · B where B is [p, k]
                        kernels::gemm_nn(gs, bs, ss, m, p, k);
                    } else {
                        kernels::gemm_nt(gs, bs, ss, m, p, k);
                    }
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for bi in 0..bsz {
                    let gs = &g[bi * m * p..(bi + 1) * m * p];
                    let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let ss = &mut s[bi * k * p..(bi + 1) * k * p];
                    if *trans_b {
                        // dB = G^T · A, [p, k]
                        kernels::gemm_tn(gs, as_, ss, m, p, k);
                    } else {
                        kernels::gemm_tn(as_, gs, ss, m, k, p);
                    }
                }
            });
        }
        Op::Softmax { x, outer, len, inner } => {
            let y = out.data();
            accumulate(grads, nodes, *x, |s| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let y = out.data();
            let n = out.last_dim();
            accumulate(grads, nodes, *x, |s| {
                for ((sr, gr), yr) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        sr[j] += gr[j] - yr[j].exp() * gsum;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain).data();
            let d = gv.len();
            accumulate(grads, nodes, *gain, |s| {
                for (i, gi) in g.iter().enumerate() {
                    s[i % d] += gi * xhat[i];
                }
            });
            accumulate(grads, nodes, *bias, |s| {
                for (i, gi) in g.iter().enumerate() {
                    s[i % d] += gi;
                }
            });
            accumulate(grads, nodes, *x, |s| {
                for (r, is) in inv_std.iter().enumerate() {
                    let base = r * d;
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = g[base + j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[base + j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = g[base + j] * gv[j];
                        s[base + j] += is * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                    }
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            accumulate(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    if xv[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            accumulate(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    let v = xv[i];
                    let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    s[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            });
        }
        Op::Tanh(x) => {
            let y = out.data();
            accumulate(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Exp(x) => {
            let y = out.data();
            accumulate(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            });
        }
        Op::Log(x) => {
            let xv = val(*x).data();
            accumulate(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / xv[i];
                }
            });
        }
        Op::Sum(x) => accumulate(grads, nodes, *x, |s| s.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            accumulate(grads, nodes, *x, |s| s.iter_mut().for_each(|v| *v += g[0] / n));
        }
        Op::SumLast(x) => {
            let d = val(*x).last_dim();
            accumulate(grads, nodes, *x, |s| {
                for (i, v) in s.iter_mut().enumerate() {
                    *v += g[i / d];
                }
            });
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    if av[i] <= bv[i] {
                        s[i] += g[i];
                    }
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for i in 0..s.len() {
                    if av[i] > bv[i] {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Clip { x, lo, hi } => {
            let xv = val(*x).data();
            accumulate(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::GatherLast { x, idx } => {
            let d = val(*x).last_dim();
            accumulate(grads, nodes, *x, |s| {
                for (r, &i) in idx.iter().enumerate() {
                    s[r * d + i] += g[r];
                }
            });
        }
        Op::ConcatLast(parts) => {
            let total = out.last_dim();
            let rows = out.rows();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).last_dim();
                accumulate(grads, nodes, p, |s| {
                    for r in 0..rows {
                        for j in 0..w {
                            s[r * w + j] += g[r * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::TakePosition { x, pos } => {
            let s3 = val(*x).shape().to_vec();
            let (b, n, d) = (s3[0], s3[1], s3[2]);
            accumulate(grads, nodes, *x, |s| {
                for bi in 0..b {
                    for j in 0..d {
                        s[(bi * n + pos) * d + j] += g[bi * d + j];
                    }
                }
            });
        }
        Op::StackPositions(parts) => {
            let s3 = out.shape();
            let (b, n, d) = (s3[0], s3[1], s3[2]);
            for (pos, &p) in parts.iter().enumerate() {
                accumulate(grads, nodes, p, |s| {
                    for bi in 0..b {
                        for j in 0..d {
                            s[bi * d + j] += g[(bi * n + pos) * d + j];
                        }
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
