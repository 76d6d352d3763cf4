//! `EFVW` checkpoint files: parameters plus the optimizer state needed to
//! resume training.
//!
//! Layout (integers and floats little-endian):
//! `"EFVW"`, version byte, `u32` completed epochs, `u32` parameter count, then
//! per parameter `u32` name length, UTF-8 name, `u32` rank, `rank × u32` dims
//! and the values as `f32`. The optimizer section follows: kind byte
//! (0 Adam, 1 SGD), its hyperparameters as `f64` (beta1, beta2, eps or
//! momentum), `u64` step, `u8` number of moment sets, and each set as one
//! `f32` array per parameter with the parameter's length.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{write_atomic, ByteReader};
use crate::model::{EfvConfig, EfvModel, Mode};
use crate::nn::ParamStore;
use crate::training::{ModelState, Optimizer, OptimizerConfig};

pub const MAGIC: &[u8; 4] = b"EFVW";
pub const VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let store = &state.params;
    let moments = state.optimizer.moments();
    let mut out = Vec::with_capacity(64 + store.numel() * 4 * (1 + moments.0.len().min(1) + moments.1.len().min(1)));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, state.epochs_done);
    put_u32(&mut out, store.len());
    for (_, p) in store.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape.len());
        for &d in &p.shape {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, &p.value);
    }
    let hyper: &[f64] = match state.optimizer.config {
        OptimizerConfig::Adam { beta1, beta2, eps } => {
            out.push(0);
            &[beta1, beta2, eps]
        }
        OptimizerConfig::Sgd { momentum } => {
            out.push(1);
            &[momentum]
        }
    };
    for h in hyper {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out.extend_from_slice(&state.optimizer.step.to_le_bytes());
    let sets: Vec<&[Vec<f32>]> = [moments.0, moments.1].into_iter().filter(|m| !m.is_empty()).collect();
    out.push(sets.len() as u8);
    for set in sets {
        for m in set {
            put_f32s(&mut out, m);
        }
    }
    out
}

/// A parameter as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Decoded file contents, before they are matched against a model.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredCheckpoint {
    pub epochs_done: usize,
    pub params: Vec<StoredParam>,
    pub optimizer: OptimizerConfig,
    pub step: u64,
    /// Moment sets, each one array per parameter.
    pub moments: Vec<Vec<Vec<f32>>>,
}

fn f32s(r: &mut ByteReader, n: usize) -> Result<Vec<f32>> {
    r.ensure(n.saturating_mul(4))?;
    (0..n).map(|_| r.f32()).collect()
}

fn f64v(r: &mut ByteReader) -> Result<f64> {
    Ok(f64::from_bits(r.u64()?))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<StoredCheckpoint> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::FormatMismatch("missing EFVW magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::FormatMismatch(format!("unsupported checkpoint version {version}")));
    }
    let epochs_done = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::FormatMismatch(format!("parameter name at byte {} is not UTF-8", r.offset())))?
            .to_string();
        let rank = r.u32()? as usize;
        r.ensure(rank.saturating_mul(4))?;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::FormatMismatch(format!("parameter `{name}` shape overflows")))?;
        let values = f32s(&mut r, n)?;
        params.push(StoredParam { name, shape, values });
    }
    let optimizer = match r.u8()? {
        0 => OptimizerConfig::Adam {
            beta1: f64v(&mut r)?,
            beta2: f64v(&mut r)?,
            eps: f64v(&mut r)?,
        },
        1 => OptimizerConfig::Sgd { momentum: f64v(&mut r)? },
        k => return Err(Error::FormatMismatch(format!("unknown optimizer kind {k}"))),
    };
    let step = r.u64()?;
    let sets = r.u8()? as usize;
    let mut moments = Vec::with_capacity(sets);
    for _ in 0..sets {
        moments.push(params.iter().map(|p| f32s(&mut r, p.values.len())).collect::<Result<Vec<_>>>()?);
    }
    if !r.is_empty() {
        return Err(Error::FormatMismatch(format!("{} trailing bytes", bytes.len() - r.offset())));
    }
    Ok(StoredCheckpoint {
        epochs_done,
        params,
        optimizer,
        step,
        moments,
    })
}

/// Replaces every parameter of `store` with the stored one of the same name.
/// Returns the store index of each stored parameter.
pub fn restore_params(store: &mut ParamStore<f32>, stored: Vec<StoredParam>) -> Result<Vec<usize>> {
    if stored.len() != store.len() {
        return Err(Error::FormatMismatch(format!(
            "checkpoint has {} parameters, model has {}",
            stored.len(),
            store.len()
        )));
    }
    let mut updates = Vec::with_capacity(stored.len());
    for s in stored {
        let id = store
            .id(&s.name)
            .ok_or_else(|| Error::FormatMismatch(format!("unknown parameter `{}`", s.name)))?;
        let expected = &store.get(id).shape;
        if *expected != s.shape {
            return Err(Error::ShapeMismatch {
                name: s.name,
                expected: expected.clone(),
                found: s.shape,
            });
        }
        updates.push((id, s.values));
    }
    let order = updates.iter().map(|(id, _)| id.0).collect();
    for (id, values) in updates {
        store.set(id, values)?;
    }
    Ok(order)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state))
}

/// Rebuilds the model for `config` and `mode` and fills parameters, optimizer
/// state and epoch counter from `bytes`.
pub fn load_checkpoint_bytes(bytes: &[u8], config: &EfvConfig, mode: Mode) -> Result<ModelState> {
    let stored = decode_checkpoint(bytes)?;
    let (model, mut params) = EfvModel::new::<f32>(config.clone(), mode)?;
    let order = restore_params(&mut params, stored.params)?;
    let reorder = |set: Vec<Vec<f32>>| {
        let mut out = vec![Vec::new(); set.len()];
        for (slot, m) in order.iter().zip(set) {
            out[*slot] = m;
        }
        out
    };
    let mut sets = stored.moments.into_iter().map(reorder);
    let first = sets.next().unwrap_or_default();
    let second = sets.next().unwrap_or_default();
    let optimizer = Optimizer::from_saved(stored.optimizer, stored.step, first, second, &params)?;
    Ok(ModelState {
        model,
        params,
        optimizer,
        epochs_done: stored.epochs_done,
    })
}

pub fn load_checkpoint(path: &Path, config: &EfvConfig, mode: Mode) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes, config, mode)
}
