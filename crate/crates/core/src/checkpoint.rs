//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MATCKPT\0" | version u32 | config text (u64 length + UTF-8)
//! iteration u64 | env_steps u64 | epochs_done u64 | last_mean_return f64
//! adam_step u64 | rng count u32 | per rng: seed [32] | stream u64 | word_pos u128
//! four tensor lists: parameters, target, adam first moments, adam second moments
//!   list: count u32 | per tensor: name (u32 length + UTF-8) | rank u32 |
//!         dims u64 × rank | values f64 × numel
//! ```
//!
//! Encoding is deterministic, so saving a loaded checkpoint reproduces the
//! file byte for byte.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::MatModel;
use crate::training::{OptimState, Trainer};

pub const MAGIC: &[u8; 8] = b"MATCKPT\0";
pub const VERSION: u32 = 1;

/// Exact position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

pub type NamedTensors = Vec<(String, Tensor)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// The resolved run configuration as TOML.
    pub config: String,
    pub iteration: u64,
    pub env_steps: u64,
    pub epochs_done: u64,
    pub last_mean_return: f64,
    pub adam_step: u64,
    /// Trainer stream first, then one per environment.
    pub rngs: Vec<RngState>,
    pub params: NamedTensors,
    pub target: NamedTensors,
    pub adam_m: NamedTensors,
    pub adam_v: NamedTensors,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config: &str) -> Self {
        let model = &trainer.model;
        let names = model.params().names();
        let named = |ts: &[Tensor]| -> NamedTensors { names.iter().cloned().zip(ts.iter().cloned()).collect() };
        let mut rngs = vec![RngState::capture(&trainer.rng)];
        rngs.extend(trainer.env_rngs.iter().map(RngState::capture));
        Self {
            config: config.to_string(),
            iteration: trainer.iteration,
            env_steps: trainer.env_steps,
            epochs_done: trainer.epochs_done,
            last_mean_return: trainer.last_mean_return,
            adam_step: trainer.optim.step,
            rngs,
            params: named(model.params().tensors()),
            target: model
                .target_params()
                .map(|(id, t)| (model.params().name(id).to_string(), t.clone()))
                .collect(),
            adam_m: named(&trainer.optim.m),
            adam_v: named(&trainer.optim.v),
        }
    }

    /// Copies parameters and target tensors into `model`, which must have
    /// the same architecture.
    pub fn load_into(&self, model: &mut MatModel) -> Result<()> {
        let expected = ordered(model.params().names(), model.params().tensors(), &self.params, "parameter")?;
        let target_ids: Vec<_> = model.target_params().map(|(id, _)| id).collect();
        let mut targets = Vec::with_capacity(target_ids.len());
        for id in &target_ids {
            let name = model.params().name(*id);
            let (_, t) = self
                .target
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("target tensor `{name}` missing from checkpoint")))?;
            if t.shape() != model.params().get(*id).shape() {
                return Err(mismatch(name, model.params().get(*id).shape(), t.shape()));
            }
            targets.push((*id, t.clone()));
        }
        if self.target.len() != target_ids.len() {
            return Err(Error::Checkpoint("checkpoint holds extra target tensors".into()));
        }
        for (slot, t) in model.params_mut().tensors_mut().iter_mut().zip(expected) {
            *slot = t;
        }
        for (id, t) in targets {
            model.set_target_param(id, t)?;
        }
        Ok(())
    }

    pub fn optim_state(&self, model: &MatModel) -> Result<OptimState> {
        let names = model.params().names();
        let tensors = model.params().tensors();
        Ok(OptimState {
            m: ordered(names, tensors, &self.adam_m, "first moment")?,
            v: ordered(names, tensors, &self.adam_v, "second moment")?,
            step: self.adam_step,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_str64(&mut w, &self.config);
        for v in [self.iteration, self.env_steps, self.epochs_done] {
            w.extend_from_slice(&v.to_le_bytes());
        }
        w.extend_from_slice(&self.last_mean_return.to_le_bytes());
        w.extend_from_slice(&self.adam_step.to_le_bytes());
        w.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for r in &self.rngs {
            w.extend_from_slice(&r.seed);
            w.extend_from_slice(&r.stream.to_le_bytes());
            w.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        for list in [&self.params, &self.target, &self.adam_m, &self.adam_v] {
            w.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for (name, t) in list {
                w.extend_from_slice(&(name.len() as u32).to_le_bytes());
                w.extend_from_slice(name.as_bytes());
                w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    w.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    w.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let len = r.u64()? as usize;
        let config = r.string(len)?;
        let (iteration, env_steps, epochs_done) = (r.u64()?, r.u64()?, r.u64()?);
        let last_mean_return = f64::from_le_bytes(r.array()?);
        let adam_step = r.u64()?;
        let n_rngs = r.u32()? as usize;
        let rngs = (0..n_rngs)
            .map(|_| {
                Ok(RngState {
                    seed: r.array()?,
                    stream: r.u64()?,
                    word_pos: u128::from_le_bytes(r.array()?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut lists = Vec::with_capacity(4);
        for _ in 0..4 {
            let count = r.u32()? as usize;
            let mut list = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let name_len = r.u32()? as usize;
                let name = r.string(name_len)?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
                let numel = shape
                    .iter()
                    .try_fold(1usize, |a, &d| a.checked_mul(d))
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is impossibly large")))?;
                let data = (0..numel).map(|_| Ok(f64::from_le_bytes(r.array()?))).collect::<Result<Vec<_>>>()?;
                list.push((name, Tensor::new(shape, data)?));
            }
            lists.push(list);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let adam_v = lists.pop().expect("four lists");
        let adam_m = lists.pop().expect("four lists");
        let target = lists.pop().expect("four lists");
        let params = lists.pop().expect("four lists");
        Ok(Self {
            config,
            iteration,
            env_steps,
            epochs_done,
            last_mean_return,
            adam_step,
            rngs,
            params,
            target,
            adam_m,
            adam_v,
        })
    }

    /// Writes atomically: a temporary file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn mismatch(name: &str, expected: &[usize], found: &[usize]) -> Error {
    Error::Checkpoint(format!(
        "architecture mismatch at tensor `{name}`: model expects {expected:?}, checkpoint has {found:?}"
    ))
}

/// Tensors of `saved` in the order of `names`, with matching shapes.
fn ordered(names: &[String], like: &[Tensor], saved: &NamedTensors, what: &str) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(names.len());
    for (name, t) in names.iter().zip(like) {
        let (_, s) = saved
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("architecture mismatch: {what} tensor `{name}` missing from checkpoint")))?;
        if s.shape() != t.shape() {
            return Err(mismatch(name, t.shape(), s.shape()));
        }
        out.push(s.clone());
    }
    if let Some((extra, _)) = saved.iter().find(|(n, _)| !names.contains(n)) {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint {what} tensor `{extra}` does not exist in the model"
        )));
    }
    Ok(out)
}

fn put_str64(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u64).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 text".into()))
    }
}
