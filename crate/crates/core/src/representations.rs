//! Frame stacks and voxel sets built from a single event stream.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::event_io::{normalize_timestamps, EventStream};

/// Per-voxel descriptor width.
pub const FEATURE_DIM: usize = 4;

/// `T` two-channel event images, stored as `[T, 2, H, W]`.
///
/// Channel 0 holds ON counts, channel 1 OFF counts, each frame scaled by its
/// own maximum so values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FrameStack {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * 2 * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, 2, self.height, self.width]
    }

    pub fn get(&self, frame: usize, channel: usize, y: usize, x: usize) -> f32 {
        self.data[((frame * 2 + channel) * self.height + y) * self.width + x]
    }
}

/// `⌊offset / span · bins⌋`: the bin of an event `offset` microseconds after
/// the first one, where `span = t_max - t_min + 1`. Exact when `bins` is a
/// whole number.
pub fn time_bin(offset: u64, span: u64, bins: f64) -> u64 {
    if bins.fract() == 0.0 && bins < 9.0e15 {
        (offset as u128 * bins as u128 / span as u128) as u64
    } else {
        (offset as f64 * bins / span as f64).floor() as u64
    }
}

/// `(t - t_min, t_max - t_min + 1)` for every event, in stream order.
fn offsets(stream: &EventStream) -> Result<(Vec<u64>, u64)> {
    let first = stream.events().first().ok_or(Error::EmptyStream)?.t;
    let last = stream.events().last().ok_or(Error::EmptyStream)?.t;
    Ok((stream.events().iter().map(|e| e.t - first).collect(), last - first + 1))
}

/// Un-normalized per-slice, per-polarity pixel counts in `[T, 2, H, W]` order.
///
/// Pixels are rescaled into the `out_h x out_w` grid by integer division when
/// the output size differs from the sensor size.
pub fn frame_counts(stream: &EventStream, frames: usize, out_h: usize, out_w: usize) -> Result<Vec<u32>> {
    if frames == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidConfig(format!(
            "frame stack dimensions must be positive, got T={frames} {out_h}x{out_w}"
        )));
    }
    let norm = normalize_timestamps(stream, 1.0)?;
    let (offs, span) = offsets(stream)?;
    let sw = stream.sensor_width() as u64;
    let sh = stream.sensor_height() as u64;
    let mut counts = vec![0u32; frames * 2 * out_h * out_w];
    for (e, &off) in norm.events.iter().zip(&offs) {
        let slice = (time_bin(off, span, frames as f64) as usize).min(frames - 1);
        let px = (e.x as u64 * out_w as u64 / sw) as usize;
        let py = (e.y as u64 * out_h as u64 / sh) as usize;
        let channel = if e.polarity.is_on() { 0 } else { 1 };
        counts[((slice * 2 + channel) * out_h + py) * out_w + px] += 1;
    }
    Ok(counts)
}

/// Accumulates events into `frames` equal slices of normalized time.
pub fn stack_frames(stream: &EventStream, frames: usize, out_h: usize, out_w: usize) -> Result<FrameStack> {
    let counts = frame_counts(stream, frames, out_h, out_w)?;
    let per_frame = 2 * out_h * out_w;
    let mut data = vec![0.0f32; counts.len()];
    for (dst, src) in data.chunks_mut(per_frame).zip(counts.chunks(per_frame)) {
        let max = src.iter().copied().max().unwrap_or(0);
        if max == 0 {
            continue;
        }
        let max = max as f64;
        for (d, &c) in dst.iter_mut().zip(src) {
            *d = (c as f64 / max) as f32;
        }
    }
    Ok(FrameStack {
        frames,
        height: out_h,
        width: out_w,
        data,
    })
}

/// Voxel extent in pixels (`h`, `w`) and normalized time units (`t`).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellSize {
    pub h: f64,
    pub w: f64,
    pub t: f64,
}

impl CellSize {
    pub fn new(h: f64, w: f64, t: f64) -> Self {
        Self { h, w, t }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.h) && ok(self.w) && ok(self.t)) || self.h < 1.0 || self.w < 1.0 {
            return Err(Error::InvalidCell {
                h: self.h,
                w: self.w,
                t: self.t,
            });
        }
        Ok(())
    }
}

impl Default for CellSize {
    fn default() -> Self {
        Self::new(4.0, 4.0, 4.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voxel {
    pub x: u32,
    pub y: u32,
    pub t: u32,
    pub count: u32,
    /// `[on_ratio, off_ratio, mean_time, polarity_balance]`.
    pub features: [f32; FEATURE_DIM],
}

impl Voxel {
    pub fn coords(&self) -> [u32; 3] {
        [self.x, self.y, self.t]
    }

    fn cell_order(&self, other: &Self) -> Ordering {
        (self.t, self.y, self.x).cmp(&(other.t, other.y, other.x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSet {
    pub voxels: Vec<Voxel>,
    /// Grid extent `(n_x, n_y, n_t)`.
    pub grid: [u32; 3],
}

impl VoxelSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn total_events(&self) -> u64 {
        self.voxels.iter().map(|v| v.count as u64).sum()
    }
}

#[derive(Default)]
struct CellAcc {
    on: u32,
    off: u32,
    unit_sum: f64,
}

/// Bins events into cells and builds every non-empty voxel, sorted by `(t, y, x)`.
pub fn voxelize(stream: &EventStream, cell: CellSize, t_span: f64) -> Result<VoxelSet> {
    cell.validate()?;
    let norm = normalize_timestamps(stream, t_span)?;
    let (offs, span) = offsets(stream)?;
    let bins = t_span / cell.t;
    let grid = [
        (stream.sensor_width() as f64 / cell.w).ceil() as u32,
        (stream.sensor_height() as f64 / cell.h).ceil() as u32,
        bins.ceil().max(1.0) as u32,
    ];
    let mut cells: BTreeMap<(u32, u32, u32), CellAcc> = BTreeMap::new();
    for (e, &off) in norm.events.iter().zip(&offs) {
        let cx = (e.x as f64 / cell.w).floor() as u32;
        let cy = (e.y as f64 / cell.h).floor() as u32;
        let ct = time_bin(off, span, bins).min(grid[2] as u64 - 1) as u32;
        let acc = cells.entry((ct, cy, cx)).or_default();
        if e.polarity.is_on() {
            acc.on += 1;
        } else {
            acc.off += 1;
        }
        acc.unit_sum += e.unit;
    }
    let max_count = cells.values().map(|a| a.on + a.off).max().unwrap_or(1);
    let log_max = (1.0 + max_count as f64).ln();
    let voxels = cells
        .into_iter()
        .map(|((t, y, x), acc)| {
            let count = acc.on + acc.off;
            let on = acc.on as f64;
            let off = acc.off as f64;
            let features = [
                ((1.0 + on).ln() / log_max) as f32,
                ((1.0 + off).ln() / log_max) as f32,
                (acc.unit_sum / count as f64) as f32,
                ((on - off) / (on + off)) as f32,
            ];
            Voxel {
                x,
                y,
                t,
                count,
                features,
            }
        })
        .collect();
    Ok(VoxelSet { voxels, grid })
}

/// Ranking used by top-K selection: larger counts first, then ascending `(t, y, x)`.
pub fn selection_order(a: &Voxel, b: &Voxel) -> Ordering {
    b.count.cmp(&a.count).then_with(|| a.cell_order(b))
}

/// Keeps the `k` voxels holding the most events. The result is in `(t, y, x)` order.
pub fn select_top_k(vs: &VoxelSet, k: usize) -> VoxelSet {
    if vs.len() <= k {
        return vs.clone();
    }
    let mut voxels = vs.voxels.clone();
    if k == 0 {
        voxels.clear();
    } else {
        voxels.select_nth_unstable_by(k - 1, selection_order);
        voxels.truncate(k);
    }
    voxels.sort_by(Voxel::cell_order);
    VoxelSet {
        voxels,
        grid: vs.grid,
    }
}

/// Settings that turn one event stream into a model-ready sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub frames: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub cell: CellSize,
    pub t_span: f64,
    pub top_k: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            frame_height: 34,
            frame_width: 34,
            cell: CellSize::default(),
            t_span: 32.0,
            top_k: 512,
        }
    }
}

/// Preprocessed form of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frames: FrameStack,
    pub voxels: VoxelSet,
    pub label: Option<usize>,
    /// Number of events in the source stream.
    pub event_count: u64,
}

pub fn prepare_sample(stream: &EventStream, cfg: &PreprocessConfig) -> Result<Sample> {
    if cfg.top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    let frames = stack_frames(stream, cfg.frames, cfg.frame_height, cfg.frame_width)?;
    let all = voxelize(stream, cfg.cell, cfg.t_span)?;
    Ok(Sample {
        frames,
        voxels: select_top_k(&all, cfg.top_k),
        label: stream.label,
        event_count: stream.len() as u64,
    })
}
