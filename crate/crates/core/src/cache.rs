//! `EFVC` preprocessed-sample cache.
//!
//! A cache file is a concatenation of self-delimiting little-endian records:
//!
//! ```text
//! "EFVC" | version u8 | label i32 (-1 = none) | event_count u64
//! frames: T u32 | C u32 | H u32 | W u32 | T*C*H*W f32
//! voxels: n_x u32 | n_y u32 | n_t u32 | count u32 | dim u32
//!         count * (x i32 | y i32 | t i32 | events u32 | dim f32)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{write_atomic, ByteReader};
use crate::representations::{FrameStack, Sample, Voxel, VoxelSet, FEATURE_DIM};

pub const CACHE_MAGIC: &[u8; 4] = b"EFVC";
pub const CACHE_VERSION: u8 = 1;

pub fn encode_sample(sample: &Sample, out: &mut Vec<u8>) {
    out.extend_from_slice(CACHE_MAGIC);
    out.push(CACHE_VERSION);
    let label = sample.label.map(|l| l as i32).unwrap_or(-1);
    out.extend_from_slice(&label.to_le_bytes());
    out.extend_from_slice(&sample.event_count.to_le_bytes());
    let f = &sample.frames;
    for dim in f.shape() {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &f.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for g in sample.voxels.grid {
        out.extend_from_slice(&g.to_le_bytes());
    }
    out.extend_from_slice(&(sample.voxels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    for v in &sample.voxels.voxels {
        for c in v.coords() {
            out.extend_from_slice(&(c as i32).to_le_bytes());
        }
        out.extend_from_slice(&v.count.to_le_bytes());
        for x in v.features {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub fn encode_cache(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in samples {
        encode_sample(s, &mut out);
    }
    out
}

fn decode_sample(r: &mut ByteReader<'_>) -> Result<Sample> {
    let magic = r.take(4)?;
    if magic != CACHE_MAGIC {
        return Err(Error::FormatMismatch(format!(
            "bad cache magic {magic:?} at offset {}",
            r.offset() - 4
        )));
    }
    let version = r.u8()?;
    if version != CACHE_VERSION {
        return Err(Error::FormatMismatch(format!("unsupported cache version {version}")));
    }
    let label = match r.i32()? {
        -1 => None,
        l if l >= 0 => Some(l as usize),
        l => return Err(Error::FormatMismatch(format!("invalid label {l}"))),
    };
    let event_count = r.u64()?;
    let (t, c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if c != 2 {
        return Err(Error::FormatMismatch(format!("frame stack must have 2 channels, found {c}")));
    }
    let n = t
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::FormatMismatch("frame shape overflows".into()))?;
    r.ensure(n.saturating_mul(4))?;
    let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let grid = [r.u32()?, r.u32()?, r.u32()?];
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim != FEATURE_DIM {
        return Err(Error::FormatMismatch(format!("voxel feature width {dim}, expected {FEATURE_DIM}")));
    }
    r.ensure(count.saturating_mul(16 + 4 * FEATURE_DIM))?;
    let mut voxels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut coords = [0u32; 3];
        for c in &mut coords {
            let v = r.i32()?;
            *c = u32::try_from(v).map_err(|_| Error::FormatMismatch(format!("negative voxel coordinate {v}")))?;
        }
        let events = r.u32()?;
        let mut features = [0.0f32; FEATURE_DIM];
        for f in &mut features {
            *f = r.f32()?;
        }
        voxels.push(Voxel {
            x: coords[0],
            y: coords[1],
            t: coords[2],
            count: events,
            features,
        });
    }
    Ok(Sample {
        frames: FrameStack {
            frames: t,
            height: h,
            width: w,
            data,
        },
        voxels: VoxelSet { voxels, grid },
        label,
        event_count,
    })
}

/// Decodes every record. Fails on any trailing partial record.
pub fn decode_cache(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut r = ByteReader::new(bytes);
    let mut out = Vec::new();
    while !r.is_empty() {
        out.push(decode_sample(&mut r)?);
    }
    Ok(out)
}

pub fn write_cache_file(path: &Path, samples: &[Sample]) -> Result<()> {
    write_atomic(path, &encode_cache(samples))
}

pub fn read_cache_file(path: &Path) -> Result<Vec<Sample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes)
}
