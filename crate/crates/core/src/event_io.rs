//! Event stream parsing and serialization.
//!
//! Two on-disk encodings are supported:
//!
//! * the N-MNIST binary layout: 5-byte big-endian records, `x`, `y`, then a
//!   byte whose high bit is the polarity followed by a 23-bit microsecond
//!   timestamp spread over the remaining 23 bits;
//! * a portable CSV form with one `x,y,t,p` line per event, `p` in `{0, 1}`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Size of one N-MNIST binary record in bytes.
pub const NMNIST_RECORD_BYTES: usize = 5;

/// Largest timestamp representable in the 23-bit binary field.
pub const NMNIST_MAX_TIMESTAMP: u64 = (1 << 23) - 1;

/// Default N-MNIST sensor crop.
pub const NMNIST_SENSOR_SIZE: u32 = 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Off,
    On,
}

impl Polarity {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Polarity::On
        } else {
            Polarity::Off
        }
    }

    pub fn is_on(self) -> bool {
        self == Polarity::On
    }

    pub fn as_bit(self) -> u8 {
        self.is_on() as u8
    }
}

/// A single brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventRecord {
    pub x: u32,
    pub y: u32,
    /// Timestamp in microseconds.
    pub t: u64,
    pub polarity: Polarity,
}

impl EventRecord {
    pub fn new(x: u32, y: u32, t: u64, polarity: Polarity) -> Self {
        Self { x, y, t, polarity }
    }
}

/// Time-ordered events together with the sensor geometry they were recorded on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<EventRecord>,
    sensor_width: u32,
    sensor_height: u32,
    pub label: Option<usize>,
}

impl EventStream {
    /// Validates bounds and stably sorts by timestamp.
    pub fn new(mut events: Vec<EventRecord>, sensor_width: u32, sensor_height: u32) -> Result<Self> {
        if sensor_width == 0 || sensor_height == 0 {
            return Err(Error::InvalidConfig(format!(
                "sensor geometry must be positive, got {sensor_width}x{sensor_height}"
            )));
        }
        if let Some(e) = events
            .iter()
            .find(|e| e.x >= sensor_width || e.y >= sensor_height)
        {
            return Err(Error::OutOfBounds {
                x: e.x,
                y: e.y,
                width: sensor_width,
                height: sensor_height,
                location: None,
            });
        }
        if !events.windows(2).all(|w| w[0].t <= w[1].t) {
            events.sort_by_key(|e| e.t);
        }
        Ok(Self {
            events,
            sensor_width,
            sensor_height,
            label: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn sensor_width(&self) -> u32 {
        self.sensor_width
    }

    pub fn sensor_height(&self) -> u32 {
        self.sensor_height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// `t_max - t_min` in microseconds, zero for empty streams.
    pub fn duration(&self) -> u64 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0,
        }
    }
}

/// Decodes the N-MNIST binary layout.
pub fn parse_nmnist_bin(bytes: &[u8], sensor_width: u32, sensor_height: u32) -> Result<EventStream> {
    let trailing = bytes.len() % NMNIST_RECORD_BYTES;
    if trailing != 0 {
        return Err(Error::TruncatedRecord {
            len: bytes.len(),
            record: NMNIST_RECORD_BYTES,
            trailing,
            offset: bytes.len() - trailing,
        });
    }
    let mut events = Vec::with_capacity(bytes.len() / NMNIST_RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(NMNIST_RECORD_BYTES).enumerate() {
        let x = rec[0] as u32;
        let y = rec[1] as u32;
        if x >= sensor_width || y >= sensor_height {
            return Err(Error::OutOfBounds {
                x,
                y,
                width: sensor_width,
                height: sensor_height,
                location: Some(format!("byte offset {}", i * NMNIST_RECORD_BYTES)),
            });
        }
        let polarity = Polarity::from_bit(rec[2] & 0x80 != 0);
        let t = ((rec[2] as u64 & 0x7F) << 16) | ((rec[3] as u64) << 8) | rec[4] as u64;
        events.push(EventRecord { x, y, t, polarity });
    }
    EventStream::new(events, sensor_width, sensor_height)
}

/// Encodes a stream in the N-MNIST binary layout.
pub fn write_nmnist_bin(stream: &EventStream) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(stream.len() * NMNIST_RECORD_BYTES);
    for e in stream.events() {
        if e.x > 255 || e.y > 255 {
            return Err(Error::OutOfBounds {
                x: e.x,
                y: e.y,
                width: 256,
                height: 256,
                location: Some("binary coordinates are 8-bit".into()),
            });
        }
        if e.t > NMNIST_MAX_TIMESTAMP {
            return Err(Error::TimestampOverflow { t: e.t });
        }
        out.extend_from_slice(&[
            e.x as u8,
            e.y as u8,
            (e.polarity.as_bit() << 7) | ((e.t >> 16) as u8 & 0x7F),
            (e.t >> 8) as u8,
            e.t as u8,
        ]);
    }
    Ok(out)
}

fn looks_like_header(line: &str) -> bool {
    line.split(',')
        .next()
        .map(|f| f.trim().parse::<u64>().is_err())
        .unwrap_or(false)
}

/// Parses `x,y,t,p` lines. A non-numeric first line is treated as a header.
pub fn parse_event_csv(text: &str, sensor_width: u32, sensor_height: u32) -> Result<EventStream> {
    let mut events = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || (idx == 0 && looks_like_header(line)) {
            continue;
        }
        let malformed = |reason: String| Error::MalformedLine {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(malformed(format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<u64>()
                .map_err(|_| malformed(format!("invalid {what} `{s}`")))
        };
        let x = num(fields[0], "x")?;
        let y = num(fields[1], "y")?;
        let t = num(fields[2], "t")?;
        let polarity = match fields[3] {
            "0" => Polarity::Off,
            "1" => Polarity::On,
            other => return Err(malformed(format!("polarity must be 0 or 1, found `{other}`"))),
        };
        if x >= sensor_width as u64 || y >= sensor_height as u64 {
            return Err(Error::OutOfBounds {
                x: x.min(u32::MAX as u64) as u32,
                y: y.min(u32::MAX as u64) as u32,
                width: sensor_width,
                height: sensor_height,
                location: Some(format!("line {line_no}")),
            });
        }
        events.push(EventRecord {
            x: x as u32,
            y: y as u32,
            t,
            polarity,
        });
    }
    EventStream::new(events, sensor_width, sensor_height)
}

/// Canonical CSV: no header, one LF-terminated line per event in time order.
pub fn write_event_csv(stream: &EventStream) -> String {
    let mut out = String::with_capacity(stream.len() * 16);
    for e in stream.events() {
        let _ = writeln!(out, "{},{},{},{}", e.x, e.y, e.t, e.polarity.as_bit());
    }
    out
}

/// An event with its timestamp mapped into `[0, t_span)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedEvent {
    pub x: u32,
    pub y: u32,
    /// Fraction of the stream's time range, in `[0, 1)`.
    pub unit: f64,
    /// `unit * t_span`.
    pub time: f64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedStream {
    pub events: Vec<NormalizedEvent>,
    pub sensor_width: u32,
    pub sensor_height: u32,
    pub t_span: f64,
}

/// Maps each timestamp to `u * t_span` with `u = (t - t_min) / (t_max - t_min + 1)`.
pub fn normalize_timestamps(stream: &EventStream, t_span: f64) -> Result<NormalizedStream> {
    if !(t_span > 0.0) || !t_span.is_finite() {
        return Err(Error::InvalidConfig(format!("t_span must be positive, got {t_span}")));
    }
    let (first, last) = match (stream.events().first(), stream.events().last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return Err(Error::EmptyStream),
    };
    let denom = (last - first) as f64 + 1.0;
    let events = stream
        .events()
        .iter()
        .map(|e| {
            let unit = (e.t - first) as f64 / denom;
            NormalizedEvent {
                x: e.x,
                y: e.y,
                unit,
                time: unit * t_span,
                polarity: e.polarity,
            }
        })
        .collect();
    Ok(NormalizedStream {
        events,
        sensor_width: stream.sensor_width(),
        sensor_height: stream.sensor_height(),
        t_span,
    })
}
