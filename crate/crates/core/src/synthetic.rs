//! Seeded synthetic event datasets.
//!
//! [`saccade_digits`] imitates N-MNIST: a digit glyph is moved along three
//! saccades and every pixel whose binary intensity flips emits an ON or OFF
//! event. [`fusion_dataset`] has four classes whose identity is split between
//! stripe orientation (resolvable in frames, invisible to voxel features) and
//! whether the per-slice event density rises or falls over the recording
//! (resolvable in voxel counts, removed by per-frame normalization).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::event_io::{EventRecord, EventStream, Polarity, NMNIST_SENSOR_SIZE};

/// 5×7 digit bitmaps, one string per row.
pub const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

pub const DIGIT_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaccadeConfig {
    pub sensor: u32,
    /// Duration of each of the three saccades, microseconds.
    pub saccade_us: u64,
    pub step_us: u64,
    /// Corner displacement of the triangular saccade path, pixels.
    pub amplitude: f64,
    /// Horizontal and vertical glyph cell size ranges, pixels.
    pub scale_x: (f64, f64),
    pub scale_y: (f64, f64),
    pub max_shear: f64,
    /// Maximum centre offset, pixels.
    pub jitter: f64,
    /// Probability of dropping each lit glyph cell.
    pub dropout: f64,
    /// Uniform background events per recording.
    pub noise_events: usize,
}

impl Default for SaccadeConfig {
    fn default() -> Self {
        Self {
            sensor: NMNIST_SENSOR_SIZE,
            saccade_us: 100_000,
            step_us: 2_000,
            amplitude: 4.0,
            scale_x: (2.8, 3.8),
            scale_y: (2.6, 3.4),
            max_shear: 0.2,
            jitter: 2.5,
            dropout: 0.06,
            noise_events: 80,
        }
    }
}

struct Glyph {
    cells: [[bool; 5]; 7],
    origin: (f64, f64),
    scale: (f64, f64),
    shear: f64,
}

impl Glyph {
    fn lit(&self, x: f64, y: f64) -> bool {
        let gy = (y - self.origin.1) / self.scale.1;
        let gx = (x - self.origin.0 - self.shear * (y - self.origin.1)) / self.scale.0;
        if gx < 0.0 || gy < 0.0 {
            return false;
        }
        let (cx, cy) = (gx as usize, gy as usize);
        cx < 5 && cy < 7 && self.cells[cy][cx]
    }
}

fn saccade_offset(cfg: &SaccadeConfig, t: u64) -> (f64, f64) {
    let a = cfg.amplitude;
    let corners = [(0.0, 0.0), (a / 2.0, a), (a, 0.0), (0.0, 0.0)];
    let leg = ((t / cfg.saccade_us) as usize).min(2);
    let frac = (t - leg as u64 * cfg.saccade_us) as f64 / cfg.saccade_us as f64;
    let (p, q) = (corners[leg], corners[leg + 1]);
    (p.0 + (q.0 - p.0) * frac.min(1.0), p.1 + (q.1 - p.1) * frac.min(1.0))
}

/// One recording of `digit` (0–9).
pub fn saccade_digit(digit: usize, cfg: &SaccadeConfig, rng: &mut impl Rng) -> Result<EventStream> {
    let mut cells = [[false; 5]; 7];
    for (row, bits) in cells.iter_mut().zip(GLYPHS[digit % DIGIT_CLASSES]) {
        for (c, b) in row.iter_mut().zip(bits.bytes()) {
            *c = b == b'1' && !rng.random_bool(cfg.dropout);
        }
    }
    let scale = (
        rng.random_range(cfg.scale_x.0..=cfg.scale_x.1),
        rng.random_range(cfg.scale_y.0..=cfg.scale_y.1),
    );
    let shear = rng.random_range(-cfg.max_shear..=cfg.max_shear);
    let size = cfg.sensor as f64;
    let centre = (
        size / 2.0 - cfg.amplitude / 2.0 + rng.random_range(-cfg.jitter..=cfg.jitter),
        size / 2.0 - cfg.amplitude / 2.0 + rng.random_range(-cfg.jitter..=cfg.jitter),
    );
    let mut glyph = Glyph {
        cells,
        origin: (centre.0 - 2.5 * scale.0, centre.1 - 3.5 * scale.1),
        scale,
        shear,
    };
    let base = glyph.origin;

    let n = cfg.sensor as usize;
    let render = |g: &Glyph| -> Vec<bool> {
        (0..n * n)
            .map(|i| g.lit((i % n) as f64 + 0.5, (i / n) as f64 + 0.5))
            .collect()
    };
    let mut events = Vec::new();
    let mut prev = render(&glyph);
    let total = 3 * cfg.saccade_us;
    let mut t = cfg.step_us;
    while t <= total {
        let (dx, dy) = saccade_offset(cfg, t);
        glyph.origin = (base.0 + dx, base.1 + dy);
        let cur = render(&glyph);
        for (i, (&a, &b)) in prev.iter().zip(&cur).enumerate() {
            if a != b {
                let jitter = rng.random_range(0..cfg.step_us);
                events.push(EventRecord::new(
                    (i % n) as u32,
                    (i / n) as u32,
                    t - cfg.step_us + jitter,
                    Polarity::from_bit(b),
                ));
            }
        }
        prev = cur;
        t += cfg.step_us;
    }
    for _ in 0..cfg.noise_events {
        events.push(EventRecord::new(
            rng.random_range(0..cfg.sensor),
            rng.random_range(0..cfg.sensor),
            rng.random_range(0..total),
            Polarity::from_bit(rng.random()),
        ));
    }
    Ok(EventStream::new(events, cfg.sensor, cfg.sensor)?.with_label(digit))
}

/// Per-sample generator, independent of how many samples precede it.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `n` recordings with labels cycling through the ten digits.
pub fn saccade_digits(n: usize, seed: u64, cfg: &SaccadeConfig) -> Result<Vec<EventStream>> {
    (0..n)
        .map(|i| saccade_digit(i % DIGIT_CLASSES, cfg, &mut sample_rng(seed, i)))
        .collect()
}

pub const FUSION_CLASSES: usize = 4;

/// Two-factor recordings: stripe orientation inside each voxel cell, which
/// the voxel grid cannot resolve, and whether event density rises or falls
/// across the time slices, which per-frame normalization removes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub sensor: u32,
    /// Time slices; must equal both the frame count and the voxel time cells.
    pub slices: u64,
    pub slice_us: u64,
    /// Pixel size of the spatial voxel cell the stripes are aligned to.
    pub cell: u32,
    /// Range of the patch side, in cells.
    pub patch_cells: (u32, u32),
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            sensor: NMNIST_SENSOR_SIZE,
            slices: 8,
            slice_us: 1000,
            cell: 4,
            patch_cells: (3, 6),
        }
    }
}

/// Class `2 · vertical + rising`.
pub fn fusion_class(vertical: bool, rising: bool) -> usize {
    2 * vertical as usize + rising as usize
}

/// Events per polarity for each lit pixel in slice `s`.
pub fn fusion_rate(rising: bool, s: u64, slices: u64) -> u64 {
    if rising {
        s + 1
    } else {
        slices - s
    }
}

/// One recording of `class`.
///
/// Every lit pixel of a slice receives the same number of ON and OFF events,
/// so each normalized frame is the same whatever that number is. The patch
/// position and all event times are drawn in an order that does not depend on
/// the orientation.
pub fn fusion_sample(class: usize, cfg: &FusionConfig, rng: &mut impl Rng) -> Result<EventStream> {
    let vertical = class / 2 == 1;
    let rising = class % 2 == 1;
    let c = cfg.cell;
    // cell 0 holds the first anchor and is kept out of the patch
    let grid = cfg.sensor / c - 1;
    let side_w = rng.random_range(cfg.patch_cells.0..=cfg.patch_cells.1).min(grid);
    let side_h = rng.random_range(cfg.patch_cells.0..=cfg.patch_cells.1).min(grid);
    let x0 = 1 + rng.random_range(0..=grid - side_w);
    let y0 = 1 + rng.random_range(0..=grid - side_h);
    let span = cfg.slices * cfg.slice_us;
    let last = cfg.sensor - 1;
    let final_slice = cfg.slices - 1;

    let mut events = Vec::new();
    let mut burst = |x: u32, y: u32, s: u64, rng: &mut dyn rand::RngCore| {
        let base = s * cfg.slice_us;
        for _ in 0..fusion_rate(rising, s, cfg.slices) {
            for polarity in [Polarity::On, Polarity::Off] {
                events.push(EventRecord::new(x, y, base + rng.random_range(0..cfg.slice_us), polarity));
            }
        }
    };
    // anchors pin the normalized time range to the full span
    burst(0, 0, 0, rng);
    burst(last, last, final_slice, rng);
    // half of each cell's pixels: two rows (horizontal) or two columns (vertical)
    let lit = c * c / 2;
    for s in 0..cfg.slices {
        for cy in y0..y0 + side_h {
            for cx in x0..x0 + side_w {
                for k in 0..lit {
                    let (along, across) = (k % c, 2 * (k / c));
                    let (dx, dy) = if vertical { (across, along) } else { (along, across) };
                    burst(cx * c + dx, cy * c + dy, s, rng);
                }
            }
        }
    }
    // replace one event of each anchor burst with the exact endpoints
    let first_off = events.iter().position(|e| e.x == 0 && e.y == 0 && !e.polarity.is_on());
    let last_off = events.iter().rposition(|e| e.x == last && e.y == last && !e.polarity.is_on());
    if let (Some(i), Some(j)) = (first_off, last_off) {
        events[i].t = 0;
        events[j].t = span - 1;
    }
    Ok(EventStream::new(events, cfg.sensor, cfg.sensor)?.with_label(class))
}

/// `n` recordings with classes cycling through all four.
pub fn fusion_dataset(n: usize, seed: u64, cfg: &FusionConfig) -> Result<Vec<EventStream>> {
    (0..n)
        .map(|i| fusion_sample(i % FUSION_CLASSES, cfg, &mut sample_rng(seed, i)))
        .collect()
}
