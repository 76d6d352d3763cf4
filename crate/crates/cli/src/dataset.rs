//! Dataset directories on disk.
//!
//! A dataset is either a directory of class sub-directories named by their
//! numeric label (`0/`, `1/`, ...) holding recordings, or a flat directory of
//! unlabeled recordings. Files are visited in sorted path order.

use std::fs;
use std::path::{Path, PathBuf};

use efv_core::config::EventFormat;
use efv_core::event_io::{parse_event_csv, parse_nmnist_bin, write_event_csv, write_nmnist_bin, EventStream};
use efv_core::io_util::write_atomic;
use efv_core::{Error, Result};

use crate::{CliResult, Failure};

pub fn extension(format: EventFormat) -> &'static str {
    match format {
        EventFormat::Nmnist => "bin",
        EventFormat::Csv => "csv",
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    Ok(paths)
}

fn recordings(dir: &Path, format: EventFormat) -> Result<Vec<PathBuf>> {
    let ext = extension(format);
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect())
}

/// Every recording path with its label, in deterministic order.
pub fn list(dir: &Path, format: EventFormat) -> Result<Vec<(PathBuf, Option<usize>)>> {
    let mut out = Vec::new();
    let mut classes: Vec<(usize, PathBuf)> = read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| {
            let label = p.file_name()?.to_str()?.parse::<usize>().ok()?;
            Some((label, p))
        })
        .collect();
    classes.sort();
    for (label, class_dir) in classes {
        out.extend(recordings(&class_dir, format)?.into_iter().map(|p| (p, Some(label))));
    }
    out.extend(recordings(dir, format)?.into_iter().map(|p| (p, None)));
    Ok(out)
}

pub fn read_recording(path: &Path, format: EventFormat, width: u32, height: u32) -> CliResult<EventStream> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = match format {
        EventFormat::Nmnist => parse_nmnist_bin(&bytes, width, height),
        EventFormat::Csv => match std::str::from_utf8(&bytes) {
            Ok(text) => parse_event_csv(text, width, height),
            Err(e) => Err(Error::MalformedLine {
                line: 0,
                reason: format!("not UTF-8: {e}"),
            }),
        },
    };
    parsed.map_err(|e| Failure::at(path, e))
}

pub fn encode_recording(stream: &EventStream, format: EventFormat) -> Result<Vec<u8>> {
    match format {
        EventFormat::Nmnist => write_nmnist_bin(stream),
        EventFormat::Csv => Ok(write_event_csv(stream).into_bytes()),
    }
}

/// Reads a whole dataset directory.
pub fn load(dir: &Path, format: EventFormat, width: u32, height: u32) -> CliResult<Vec<EventStream>> {
    list(dir, format)?
        .into_iter()
        .map(|(path, label)| {
            let s = read_recording(&path, format, width, height)?;
            Ok(match label {
                Some(l) => s.with_label(l),
                None => s,
            })
        })
        .collect()
}

/// Writes labeled streams as `dir/<label>/<index>.<ext>`.
pub fn save(dir: &Path, streams: &[EventStream], format: EventFormat) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(streams.len());
    for (i, s) in streams.iter().enumerate() {
        let sub = match s.label {
            Some(l) => dir.join(l.to_string()),
            None => dir.to_path_buf(),
        };
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let path = sub.join(format!("{i:05}.{}", extension(format)));
        write_atomic(&path, &encode_recording(s, format)?)?;
        written.push(path);
    }
    Ok(written)
}
