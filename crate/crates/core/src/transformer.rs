//! Attention, encoder and decoder blocks.
//!
//! All sequence tensors are `[B, n, d]`: a batch of `B` timesteps, one row
//! per agent in decoding order. Blocks are pre-norm:
//! `x + sublayer(layer_norm(x))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Group, Linear, Norm, ParamId, ParamSet};

/// Which positions each query row may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Every row attends to every position.
    pub fn full(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("attention mask needs at least one position"));
        }
        Ok(Self {
            n,
            allowed: vec![true; n * n],
        })
    }

    /// Row `r` attends to positions `j <= r`.
    pub fn causal(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("attention mask needs at least one position"));
        }
        let allowed = (0..n * n).map(|i| i % n <= i / n).collect();
        Ok(Self { n, allowed })
    }

    /// Arbitrary mask; mostly useful for negative tests.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::contract("attention mask must be square and non-empty"));
        }
        Ok(Self {
            n,
            allowed: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.n + col]
    }

    pub fn row_sum(&self, row: usize) -> usize {
        self.allowed[row * self.n..(row + 1) * self.n].iter().filter(|&&a| a).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<'t>(self, x: &Var<'t>) -> Var<'t> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }
}

/// Shape hyperparameters shared by the encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dims {
    pub obs_dim: usize,
    pub max_agents: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Width of one agent's action encoding (action count for discrete
    /// spaces, dimension for continuous ones).
    pub action_width: usize,
    pub activation: Activation,
}

impl Dims {
    pub fn head_dim(&self) -> Result<usize> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(self.d_model / self.n_heads)
    }
}

#[derive(Clone, Copy, Debug)]
struct Head {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

/// Multi-head scaled dot-product attention with an output projection.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    heads: Vec<Head>,
    out: Linear,
    head_dim: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, dims: &Dims, group: Group, rng: &mut R) -> Result<Self> {
        let head_dim = dims.head_dim()?;
        let heads = (0..dims.n_heads)
            .map(|h| {
                let mut proj = |kind: &str| {
                    ps.add(
                        format!("{name}.head{h}.{kind}"),
                        crate::nn::orthogonal(dims.d_model, head_dim, 1.0, rng),
                        group,
                    )
                };
                Head {
                    query: proj("query"),
                    key: proj("key"),
                    value: proj("value"),
                }
            })
            .collect();
        let out = Linear::new(ps, &format!("{name}.out"), dims.n_heads * head_dim, dims.d_model, 1.0, group, rng);
        Ok(Self { heads, out, head_dim })
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V` per head, concatenated, then projected.
///
/// `queries` is `[B, n, d]`; `keys` and `values` are `[B, n_kv, d]`; `mask`
/// is `n × n_kv` with `n == n_kv`. Masked logits are excluded before the
/// softmax, so row `r` is a convex combination of permitted value rows only.
pub fn attention<'t>(
    p: &Bound<'t>,
    params: &AttentionParams,
    queries: &Var<'t>,
    keys: &Var<'t>,
    values: &Var<'t>,
    mask: &AttentionMask,
) -> Result<Var<'t>> {
    let qs = queries.shape();
    let ks = keys.shape();
    if qs.len() != 3 || ks.len() != 3 || mask.size() != qs[1] || mask.size() != ks[1] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let scale = 1.0 / (params.head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let q = queries.matmul(&p.var(head.query))?;
        let k = keys.matmul(&p.var(head.key))?;
        let v = values.matmul(&p.var(head.value))?;
        let weights = q.bmm_nt(&k)?.scale(scale).masked_softmax(mask.as_slice())?;
        outs.push(weights.bmm(&v)?);
    }
    let mixed = if outs.len() == 1 { outs[0] } else { Var::concat_last(&outs)? };
    params.out.forward(p, &mixed)
}

#[derive(Clone, Debug)]
struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    fn new<R: Rng>(ps: &mut ParamSet, name: &str, d: usize, group: Group, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(ps, &format!("{name}.hidden"), d, d, 2f64.sqrt(), group, rng),
            out: Linear::new(ps, &format!("{name}.out"), d, d, 1.0, group, rng),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, act: Activation) -> Result<Var<'t>> {
        let h = act.apply(&self.hidden.forward(p, x)?);
        self.out.forward(p, &h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlockParams {
    norm_attn: Norm,
    attn: AttentionParams,
    norm_mlp: Norm,
    mlp: Mlp,
}

impl EncoderBlockParams {
    fn new<R: Rng>(ps: &mut ParamSet, name: &str, dims: &Dims, rng: &mut R) -> Result<Self> {
        let g = Group::Encoder;
        Ok(Self {
            norm_attn: Norm::new(ps, &format!("{name}.norm_attn"), dims.d_model, g),
            attn: AttentionParams::new(ps, &format!("{name}.attn"), dims, g, rng)?,
            norm_mlp: Norm::new(ps, &format!("{name}.norm_mlp"), dims.d_model, g),
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dims.d_model, g, rng),
        })
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, mask: &AttentionMask, act: Activation) -> Result<Var<'t>> {
        let h = self.norm_attn.forward(p, x)?;
        let x = x.add(&attention(p, &self.attn, &h, &h, &h, mask)?)?;
        let h = self.norm_mlp.forward(p, &x)?;
        x.add(&self.mlp.forward(p, &h, act)?)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlockParams {
    norm_self: Norm,
    self_attn: AttentionParams,
    norm_cross: Norm,
    cross_attn: AttentionParams,
    norm_mlp: Norm,
    mlp: Mlp,
}

impl DecoderBlockParams {
    fn new<R: Rng>(ps: &mut ParamSet, name: &str, dims: &Dims, rng: &mut R) -> Result<Self> {
        let g = Group::Decoder;
        Ok(Self {
            norm_self: Norm::new(ps, &format!("{name}.norm_self"), dims.d_model, g),
            self_attn: AttentionParams::new(ps, &format!("{name}.self_attn"), dims, g, rng)?,
            norm_cross: Norm::new(ps, &format!("{name}.norm_cross"), dims.d_model, g),
            cross_attn: AttentionParams::new(ps, &format!("{name}.cross_attn"), dims, g, rng)?,
            norm_mlp: Norm::new(ps, &format!("{name}.norm_mlp"), dims.d_model, g),
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dims.d_model, g, rng),
        })
    }

    fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: &Var<'t>,
        encoded: &Var<'t>,
        causal: &AttentionMask,
        full: &AttentionMask,
        act: Activation,
    ) -> Result<Var<'t>> {
        let h = self.norm_self.forward(p, x)?;
        let x = x.add(&attention(p, &self.self_attn, &h, &h, &h, causal)?)?;
        let h = self.norm_cross.forward(p, &x)?;
        let x = x.add(&attention(p, &self.cross_attn, &h, encoded, encoded, full)?)?;
        let h = self.norm_mlp.forward(p, &x)?;
        x.add(&self.mlp.forward(p, &h, act)?)
    }
}

/// Concatenates each observation row with the one-hot id of its agent.
///
/// `obs` is `[B, n, obs_dim]`; the result is `[B, n, obs_dim + max_agents]`.
pub fn observation_features(obs: &Tensor, agent_ids: &[usize], max_agents: usize) -> Result<Tensor> {
    let s = obs.shape();
    if s.len() != 3 || s[1] != agent_ids.len() {
        return Err(Error::shape("observation_features", s, &[agent_ids.len()]));
    }
    if let Some(bad) = agent_ids.iter().find(|&&id| id >= max_agents) {
        return Err(Error::contract(format!("agent id {bad} out of range for {max_agents} agents")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let width = d + max_agents;
    let mut data = vec![0.0; b * n * width];
    for bi in 0..b {
        for (m, &id) in agent_ids.iter().enumerate() {
            let row = &mut data[(bi * n + m) * width..(bi * n + m + 1) * width];
            row[..d].copy_from_slice(&obs.data()[(bi * n + m) * d..(bi * n + m + 1) * d]);
            row[d + id] = 1.0;
        }
    }
    Tensor::new(vec![b, n, width], data)
}

/// Encoder: agent-id embedding, full self-attention blocks, per-agent value
/// head.
#[derive(Clone, Debug)]
pub struct Encoder {
    embed: Linear,
    blocks: Vec<EncoderBlockParams>,
    norm_out: Norm,
    value_hidden: Linear,
    value_out: Linear,
    dims: Dims,
}

impl Encoder {
    pub fn new<R: Rng>(ps: &mut ParamSet, dims: &Dims, rng: &mut R) -> Result<Self> {
        let g = Group::Encoder;
        let d = dims.d_model;
        let embed = Linear::new(ps, "encoder.embed", dims.obs_dim + dims.max_agents, d, 1.0, g, rng);
        let blocks = (0..dims.n_blocks)
            .map(|i| EncoderBlockParams::new(ps, &format!("encoder.block{i}"), dims, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            blocks,
            norm_out: Norm::new(ps, "encoder.norm_out", d, g),
            value_hidden: Linear::new(ps, "encoder.value.hidden", d, d, 2f64.sqrt(), g, rng),
            value_out: Linear::new(ps, "encoder.value.out", d, 1, 1.0, g, rng),
            dims: *dims,
        })
    }

    /// Projects `[obs ∥ one-hot(id)]` rows to `d_model`.
    pub fn embed_observation<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        obs: &Tensor,
        agent_ids: &[usize],
    ) -> Result<Var<'t>> {
        let features = observation_features(obs, agent_ids, self.dims.max_agents)?;
        self.embed.forward(p, &tape.constant(features))
    }

    /// Returns the encodings `[B, n, d_model]` and per-agent values `[B, n]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, embedded: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let s = embedded.shape();
        if s.len() != 3 || s[2] != self.dims.d_model {
            return Err(Error::shape("encoder_forward", &s, &[self.dims.d_model]));
        }
        let mask = AttentionMask::full(s[1])?;
        let mut x = *embedded;
        for block in &self.blocks {
            x = block.forward(p, &x, &mask, self.dims.activation)?;
        }
        let encoded = self.norm_out.forward(p, &x)?;
        let h = self.dims.activation.apply(&self.value_hidden.forward(p, &encoded)?);
        let values = self.value_out.forward(p, &h)?.reshape(&[s[0], s[1]])?;
        Ok((encoded, values))
    }
}

/// Decoder: causal self-attention over action embeddings, full
/// cross-attention onto the observation encodings, per-row action head.
#[derive(Clone, Debug)]
pub struct Decoder {
    embed: Linear,
    blocks: Vec<DecoderBlockParams>,
    norm_out: Norm,
    head_hidden: Linear,
    head_out: Linear,
    dims: Dims,
}

impl Decoder {
    pub fn new<R: Rng>(ps: &mut ParamSet, dims: &Dims, rng: &mut R) -> Result<Self> {
        let g = Group::Decoder;
        let d = dims.d_model;
        let input = Self::input_width(dims);
        Ok(Self {
            embed: Linear::new(ps, "decoder.embed", input, d, 1.0, g, rng),
            blocks: (0..dims.n_blocks)
                .map(|i| DecoderBlockParams::new(ps, &format!("decoder.block{i}"), dims, rng))
                .collect::<Result<_>>()?,
            norm_out: Norm::new(ps, "decoder.norm_out", d, g),
            head_hidden: Linear::new(ps, "decoder.head.hidden", d, d, 2f64.sqrt(), g, rng),
            head_out: Linear::new(ps, "decoder.head.out", d, dims.action_width, 0.01, g, rng),
            dims: *dims,
        })
    }

    /// Width of one decoder input row: start flag, previous action
    /// encoding and the one-hot id of the agent being decoded.
    pub fn input_width(dims: &Dims) -> usize {
        1 + dims.action_width + dims.max_agents
    }

    /// Projects `[B, n, input_width]` action features to `d_model`.
    pub fn embed_actions<'t>(&self, p: &Bound<'t>, features: &Var<'t>) -> Result<Var<'t>> {
        self.embed.forward(p, features)
    }

    /// Row `m` of the result parameterises the action distribution of the
    /// `m`-th agent in decoding order.
    pub fn forward<'t>(&self, p: &Bound<'t>, action_embeds: &Var<'t>, encoded: &Var<'t>) -> Result<Var<'t>> {
        let s = action_embeds.shape();
        if s.len() != 3 || s[2] != self.dims.d_model || encoded.shape() != s {
            return Err(Error::shape("decoder_forward", &s, &encoded.shape()));
        }
        let causal = AttentionMask::causal(s[1])?;
        let full = AttentionMask::full(s[1])?;
        let mut x = *action_embeds;
        for block in &self.blocks {
            x = block.forward(p, &x, encoded, &causal, &full, self.dims.activation)?;
        }
        let x = self.norm_out.forward(p, &x)?;
        let h = self.dims.activation.apply(&self.head_hidden.forward(p, &x)?);
        self.head_out.forward(p, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> Dims {
        Dims {
            obs_dim: 3,
            max_agents: 4,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            action_width: 3,
            activation: Activation::Gelu,
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = AttentionMask::causal(2).unwrap();
        assert_eq!(m.as_slice(), &[true, false, true, true]);
        assert_eq!(AttentionMask::causal(1).unwrap().as_slice(), &[true]);
        let m = AttentionMask::causal(5).unwrap();
        for r in 0..5 {
            assert_eq!(m.row_sum(r), r + 1);
        }
        assert!(AttentionMask::causal(0).is_err());
    }

    #[test]
    fn single_position_attention_is_value_then_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Dims { n_heads: 1, ..dims() };
        let mut ps = ParamSet::new();
        let attn = AttentionParams::new(&mut ps, "a", &d, Group::Encoder, &mut rng).unwrap();
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let x = tape.constant(random(&[1, 1, 8], &mut rng));
        let out = attention(&p, &attn, &x, &x, &x, &AttentionMask::full(1).unwrap()).unwrap();
        let v = x.matmul(&p.var(attn.heads[0].value)).unwrap();
        let want = attn.out.forward(&p, &v).unwrap();
        assert_eq!(out.value().data(), want.value().data());
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let tape = Tape::new();
        let scores = tape.constant(Tensor::filled(&[1, 3, 3], 0.7));
        let w = scores.masked_softmax(AttentionMask::full(3).unwrap().as_slice()).unwrap();
        for v in w.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let tape = Tape::new();
        let scores = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let mask = AttentionMask::from_rows(&[vec![false, false], vec![true, true]]).unwrap();
        assert!(matches!(scores.masked_softmax(mask.as_slice()), Err(Error::Contract(_))));
    }

    #[test]
    fn observation_embedding_distinguishes_agents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, &dims(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let obs = Tensor::zeros(&[1, 2, 3]);
        let e = enc.embed_observation(&p, &tape, &obs, &[0, 1]).unwrap();
        let v = e.value();
        assert_ne!(&v.data()[..8], &v.data()[8..]);
        let again = enc.embed_observation(&p, &tape, &obs, &[0, 1]).unwrap();
        assert_eq!(v.data(), again.value().data());
        assert!(enc.embed_observation(&p, &tape, &obs, &[0, 4]).is_err());
    }

    #[test]
    fn value_head_has_one_output_per_agent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, &dims(), &mut rng).unwrap();
        for n in [1usize, 2, 4] {
            let tape = Tape::new();
            let p = ps.bind(&tape, false);
            let obs = random(&[2, n, 3], &mut rng);
            let ids: Vec<usize> = (0..n).collect();
            let e = enc.embed_observation(&p, &tape, &obs, &ids).unwrap();
            let (encoded, values) = enc.forward(&p, &e).unwrap();
            assert_eq!(values.shape(), vec![2, n]);
            assert_eq!(encoded.shape(), vec![2, n, 8]);
            assert!(values.value().all_finite());
        }
    }

    #[test]
    fn decoder_rows_ignore_later_action_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let dec = Decoder::new(&mut ps, &dims(), &mut rng).unwrap();
        let enc_in = random(&[1, 3, 8], &mut rng);
        let act = random(&[1, 3, 8], &mut rng);
        let mut perturbed = act.clone();
        for j in 16..24 {
            perturbed.data_mut()[j] += 0.5;
        }
        let run = |a: &Tensor| {
            let tape = Tape::new();
            let p = ps.bind(&tape, false);
            let out = dec
                .forward(&p, &tape.constant(a.clone()), &tape.constant(enc_in.clone()))
                .unwrap();
            out.value().data().to_vec()
        };
        let (x, y) = (run(&act), run(&perturbed));
        assert_eq!(&x[..6], &y[..6]);
        assert_ne!(&x[6..], &y[6..]);
    }
}
