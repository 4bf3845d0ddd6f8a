//! Versioned binary checkpoint container.
//!
//! ```text
//! magic "DCIGNCKP" | u32 version | u8 dtype bytes
//! u64 len + training config as JSON
//! u32 tensor count, each: u16 name len, name, u8 rank, u64 dims, raw values
//! u8 optimizer flag, if 1: u64 optimizer step, one raw cache per tensor
//! u64 step | u64 rng seed | u64 rng stream | u128 rng word position
//! ```

use std::path::Path;

use super::binary::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::optim::OptimState;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{RngState, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCIGNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar = f32> {
    pub config: TrainConfig,
    pub net: Network<T>,
    pub optim: Option<OptimState<T>>,
    pub step: u64,
    pub rng: RngState,
}

impl<T: Scalar> Checkpoint<T> {
    /// Untrained network straight from the config, no optimizer state.
    pub fn initial(config: TrainConfig) -> Result<Self> {
        let trainer = Trainer::<T>::new(config)?;
        let mut c = Self::from_trainer(&trainer);
        c.optim = None;
        Ok(c)
    }

    pub fn from_trainer(trainer: &Trainer<T>) -> Self {
        Self {
            config: trainer.config.clone(),
            net: trainer.net.clone(),
            optim: Some(trainer.optim.clone()),
            step: trainer.step_count(),
            rng: trainer.rng_state(),
        }
    }

    /// Trainer that continues where this checkpoint left off.
    pub fn into_trainer(self) -> Result<Trainer<T>> {
        let optim = match self.optim {
            Some(o) => o,
            None => {
                let mut o = OptimState::new(&self.net.params());
                o.step = self.step;
                o
            }
        };
        Trainer::from_parts(self.config, self.net, optim, self.rng)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::default();
        e.bytes(CHECKPOINT_MAGIC);
        e.u32(CHECKPOINT_VERSION);
        e.u8(T::DTYPE);
        let json = serde_json::to_vec(&self.config).map_err(|err| Error::Format(err.to_string()))?;
        e.blob(&json);
        let named = self.net.named_params();
        e.u32(named.len() as u32);
        for (name, t) in &named {
            e.u16(name.len() as u16);
            e.bytes(name.as_bytes());
            e.u8(t.shape().len() as u8);
            for &d in t.shape() {
                e.u64(d as u64);
            }
            T::to_le_bytes_vec(t.data(), &mut e.buf);
        }
        match &self.optim {
            Some(o) => {
                e.u8(1);
                e.u64(o.step);
                for c in &o.cache {
                    T::to_le_bytes_vec(c.data(), &mut e.buf);
                }
            }
            None => e.u8(0),
        }
        e.u64(self.step);
        e.u64(self.rng.seed);
        e.u64(self.rng.stream);
        e.u128(self.rng.word_pos);
        Ok(e.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, "checkpoint");
        let magic = d
            .take(8)
            .map_err(|_| Error::Format("file too short to be a checkpoint".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = d.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let dtype = d.u8()?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {dtype}-byte floats, {} requested",
                T::NAME
            )));
        }
        let config: TrainConfig = serde_json::from_slice(d.blob()?)
            .map_err(|err| Error::Corrupt(format!("checkpoint config: {err}")))?;
        let mut net = Network::<T>::build(config.network.clone())
            .map_err(|err| Error::Corrupt(format!("checkpoint config does not build: {err}")))?;
        let count = d.u32()? as usize;
        let mut named = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = d.u16()? as usize;
            let name = std::str::from_utf8(d.take(len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = d.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(d.u64()? as usize);
            }
            let n: usize = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| {
                Error::Corrupt(format!("tensor {name} has an overflowing shape"))
            })?;
            let raw = d.take(n.checked_mul(T::DTYPE as usize).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
            let t = Tensor::new(&shape, T::from_le_slice(raw))
                .map_err(|err| Error::Corrupt(format!("tensor {name}: {err}")))?;
            named.push((name, t));
        }
        net.load_named_params(named)?;
        let optim = match d.u8()? {
            0 => None,
            1 => {
                let step = d.u64()?;
                let mut cache = Vec::new();
                for p in net.params() {
                    let raw = d.take(p.len() * T::DTYPE as usize)?;
                    cache.push(Tensor::new(p.shape(), T::from_le_slice(raw))?);
                }
                Some(OptimState { cache, step })
            }
            f => return Err(Error::Corrupt(format!("bad optimizer flag {f}"))),
        };
        let step = d.u64()?;
        let rng = RngState {
            seed: d.u64()?,
            stream: d.u64()?,
            word_pos: d.u128()?,
        };
        d.finish()?;
        Ok(Self {
            config,
            net,
            optim,
            step,
            rng,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, checkpoint: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
