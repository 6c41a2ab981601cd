//! Little-endian checkpoint files.
//!
//! ```text
//! "MNAD" | version u32 | config: u32 length + TOML bytes
//! | epoch u64 | step u64
//! | params table | buffers table | bank table
//! | adam: beta1 f64, beta2 f64, eps f64, step u64, first table, second table
//! | rng: seed [u8; 32], stream u64, word_pos u128
//! ```
//!
//! A table is `u32 count` followed by entries of `u32 name length, name,
//! u8 dtype, u32 rank, u64 dims..., raw data`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Config, TrainState};
use crate::error::{CheckpointError, Error, Result};
use crate::memory::MemoryBank;
use crate::model::ModelParams;
use crate::optim::{Moments, OptimizerState};
use crate::rng::RngState;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MNAD";
pub const VERSION: u32 = 1;

const BANK_ENTRY: &str = "items";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn table<'a, T: Scalar>(&mut self, entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<T>)>) {
        self.u32(entries.len() as u32);
        for (name, t) in entries {
            self.bytes(name.as_bytes());
            self.u8(T::DTYPE.code());
            self.u32(t.rank() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for &v in t.data() {
                v.write_le(&mut self.0);
            }
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.data.len() - self.pos;
        if n > remaining {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            }
            .into());
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        CheckpointError::Corrupt {
            offset: self.pos,
            reason: reason.into(),
        }
        .into()
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let start = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| {
            CheckpointError::Corrupt {
                offset: start,
                reason: "string is not UTF-8".into(),
            }
            .into()
        })
    }
    fn table<T: Scalar>(&mut self) -> Result<BTreeMap<String, Tensor<T>>> {
        let count = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name = self.string()?;
            let code = self.u8()?;
            let dtype = DType::from_code(code).ok_or_else(|| self.corrupt(format!("unknown dtype code {code}")))?;
            if dtype != T::DTYPE {
                return Err(self.corrupt(format!("tensor `{name}` has dtype {dtype:?}, expected {:?}", T::DTYPE)));
            }
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(self.corrupt(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| self.corrupt("tensor too large"))?;
            let bytes = self.take(n.checked_mul(dtype.size()).ok_or_else(|| self.corrupt("tensor too large"))?)?;
            let data: Vec<T> = bytes.chunks_exact(dtype.size()).map(T::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| self.corrupt(format!("tensor `{name}`: {e}")))?;
            if out.insert(name.clone(), t).is_some() {
                return Err(self.corrupt(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(out)
    }
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(state.config.to_toml().as_bytes());
    w.u64(state.epoch);
    w.u64(state.step);
    w.table(entries(&state.params.params));
    w.table(entries(&state.params.buffers));
    w.table([(BANK_ENTRY, state.bank.items())].into_iter());
    let opt = &state.optimizer;
    w.f64(opt.beta1);
    w.f64(opt.beta2);
    w.f64(opt.eps);
    w.u64(opt.step);
    w.table(opt.moments.iter().map(|(k, m)| (k.as_str(), &m.first)).collect::<Vec<_>>().into_iter());
    w.table(opt.moments.iter().map(|(k, m)| (k.as_str(), &m.second)).collect::<Vec<_>>().into_iter());
    w.0.extend_from_slice(&state.rng.seed);
    w.u64(state.rng.stream);
    w.0.extend_from_slice(&state.rng.word_pos.to_le_bytes());
    w.0
}

fn entries(m: &BTreeMap<String, Tensor<f32>>) -> impl ExactSizeIterator<Item = (&str, &Tensor<f32>)> {
    m.iter().map(|(k, v)| (k.as_str(), v))
}

pub fn from_bytes(data: &[u8]) -> Result<TrainState> {
    let mut r = Reader { data, pos: 0 };
    let magic = r.take(4.min(data.len()))?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() }.into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let config_at = r.pos;
    let text = r.string()?;
    let config = Config::from_toml(&text).map_err(|e| CheckpointError::Corrupt {
        offset: config_at,
        reason: format!("config echo: {e}"),
    })?;
    let epoch = r.u64()?;
    let step = r.u64()?;
    let params = r.table()?;
    let buffers = r.table()?;
    let mut bank = r.table::<f32>()?;
    let items = bank.remove(BANK_ENTRY).ok_or_else(|| r.corrupt("memory bank entry missing"))?;
    let bank = MemoryBank::from_unit_items(items).map_err(|e| r.corrupt(format!("memory bank: {e}")))?;
    let (beta1, beta2, eps, opt_step) = (r.f64()?, r.f64()?, r.f64()?, r.u64()?);
    let first = r.table::<f32>()?;
    let mut second = r.table::<f32>()?;
    if first.keys().ne(second.keys()) {
        return Err(r.corrupt("optimizer moment tables disagree"));
    }
    let moments = first
        .into_iter()
        .map(|(k, f)| {
            let s = second.remove(&k).expect("same keys");
            (k, Moments { first: f, second: s })
        })
        .collect();
    let seed = r.array::<32>()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    if r.pos != data.len() {
        return Err(r.corrupt(format!("{} trailing bytes", data.len() - r.pos)));
    }
    Ok(TrainState {
        config,
        params: ModelParams { params, buffers },
        bank,
        optimizer: OptimizerState {
            beta1,
            beta2,
            eps,
            step: opt_step,
            moments,
        },
        rng: RngState { seed, stream, word_pos },
        epoch,
        step,
    })
}

/// Writes through a temporary file and renames, so an interrupted save
/// never replaces a good checkpoint with a partial one.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(state)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&data)
}
