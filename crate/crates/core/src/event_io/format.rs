//! CSV (`t_us,x,y,p`) and EVS binary event files.
//!
//! EVS layout, all integers little-endian:
//!
//! ```text
//! offset 0   b"EVS0"
//!        4   u32 width
//!        8   u32 height
//!       12   u64 event count
//!       20   count x { u64 t_us, u16 x, u16 y, u8 p, u8 reserved }
//! ```
//!
//! The reserved byte is written as zero and ignored when reading.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::event_io::{Event, EventStream};

pub const CSV_HEADER: &str = "t_us,x,y,p";
const EVS_MAGIC: &[u8; 4] = b"EVS0";
const EVS_HEADER_LEN: usize = 20;
const EVS_RECORD_LEN: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Evs,
}

impl EventFormat {
    /// Guesses the format from a file extension (`.csv` or `.evs`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(EventFormat::Csv),
            "evs" => Some(EventFormat::Evs),
            _ => None,
        }
    }
}

/// A parsed stream plus whether it had to be re-sorted by time.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub stream: EventStream,
    pub resorted: bool,
}

fn finish(mut stream: EventStream) -> Loaded {
    let resorted = !stream.is_time_ordered();
    if resorted {
        stream.events.sort_by_key(|e| e.t);
    }
    Loaded { stream, resorted }
}

fn check_geometry(width: u32, height: u32) -> Result<()> {
    if width == 0 || height == 0 || width > 1 << 16 || height > 1 << 16 {
        return Err(Error::invalid(
            "read_events",
            format!("unsupported sensor geometry {width}x{height}"),
        ));
    }
    Ok(())
}

/// Parses CSV text for a `width` x `height` sensor.
pub fn parse_csv(text: &str, width: u32, height: u32) -> Result<Loaded> {
    check_geometry(width, height)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::parse(
                "line 1",
                format!("expected header `{CSV_HEADER}`, found `{}`", h.trim()),
            ))
        }
        None => return Err(Error::parse("line 1", "missing header")),
    }
    let mut stream = EventStream::new(width, height);
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let record = stream.events.len();
        let loc = || format!("line {} (record {record})", i + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                loc(),
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let num = |idx: usize, name: &str| -> Result<u64> {
            fields[idx].parse::<u64>().map_err(|_| {
                Error::parse(
                    loc(),
                    format!("{name} `{}` is not a non-negative integer", fields[idx]),
                )
            })
        };
        let (t, x, y, p) = (num(0, "t_us")?, num(1, "x")?, num(2, "y")?, num(3, "p")?);
        if x >= width as u64 || y >= height as u64 {
            return Err(Error::parse(
                loc(),
                format!("coordinate ({x}, {y}) outside {width}x{height} sensor"),
            ));
        }
        if p > 1 {
            return Err(Error::parse(loc(), format!("polarity {p} is not 0 or 1")));
        }
        stream.events.push(Event {
            t,
            x: x as u16,
            y: y as u16,
            p: p as u8,
        });
    }
    Ok(finish(stream))
}

/// Parses an EVS buffer.
pub fn parse_evs(bytes: &[u8]) -> Result<Loaded> {
    if bytes.len() < EVS_HEADER_LEN {
        return Err(Error::parse(
            format!("byte {}", bytes.len()),
            "truncated header",
        ));
    }
    if &bytes[..4] != EVS_MAGIC {
        return Err(Error::parse("byte 0", "bad magic, expected EVS0"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let width = u32_at(4);
    let height = u32_at(8);
    check_geometry(width, height).map_err(|e| Error::parse("byte 4", e.to_string()))?;
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body = &bytes[EVS_HEADER_LEN..];
    let expected = (count as u128) * EVS_RECORD_LEN as u128;
    if expected != body.len() as u128 {
        return Err(Error::parse(
            "byte 12",
            format!(
                "header declares {count} events ({expected} bytes) but {} bytes follow",
                body.len()
            ),
        ));
    }
    let mut stream = EventStream::new(width, height);
    stream.events.reserve(body.len() / EVS_RECORD_LEN);
    for (i, rec) in body.chunks_exact(EVS_RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes"));
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = rec[12];
        let loc = || format!("byte {} (record {i})", EVS_HEADER_LEN + i * EVS_RECORD_LEN);
        if x as u32 >= width || y as u32 >= height {
            return Err(Error::parse(
                loc(),
                format!("coordinate ({x}, {y}) outside {width}x{height} sensor"),
            ));
        }
        if p > 1 {
            return Err(Error::parse(loc(), format!("polarity {p} is not 0 or 1")));
        }
        stream.events.push(Event { t, x, y, p });
    }
    Ok(finish(stream))
}

/// Reads a file. CSV carries no geometry, so `geometry` is required for it;
/// for EVS a given geometry must agree with the header.
pub fn read_events(
    path: &Path,
    format: EventFormat,
    geometry: Option<(u32, u32)>,
) -> Result<Loaded> {
    match format {
        EventFormat::Csv => {
            let (w, h) = geometry.ok_or_else(|| {
                Error::invalid("read_events", "CSV input needs a sensor geometry")
            })?;
            parse_csv(&fs::read_to_string(path)?, w, h)
        }
        EventFormat::Evs => {
            let loaded = parse_evs(&fs::read(path)?)?;
            if let Some((w, h)) = geometry {
                if (w, h) != (loaded.stream.width, loaded.stream.height) {
                    return Err(Error::invalid(
                        "read_events",
                        format!(
                            "file geometry {}x{} differs from configured {w}x{h}",
                            loaded.stream.width, loaded.stream.height
                        ),
                    ));
                }
            }
            Ok(loaded)
        }
    }
}

pub fn write_csv<W: Write>(stream: &EventStream, mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for e in &stream.events {
        writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p)?;
    }
    Ok(())
}

pub fn write_evs<W: Write>(stream: &EventStream, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(EVS_HEADER_LEN + stream.len() * EVS_RECORD_LEN);
    buf.extend_from_slice(EVS_MAGIC);
    buf.extend_from_slice(&stream.width.to_le_bytes());
    buf.extend_from_slice(&stream.height.to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.p);
        buf.push(0);
    }
    out.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_is_empty() {
        let l = parse_csv("t_us,x,y,p\n", 8, 8).unwrap();
        assert!(l.stream.is_empty());
        assert!(!l.resorted);
    }

    #[test]
    fn single_line_maps_fields() {
        let l = parse_csv("t_us,x,y,p\n1000,3,2,1\n", 8, 8).unwrap();
        assert_eq!(
            l.stream.events,
            vec![Event {
                t: 1000,
                x: 3,
                y: 2,
                p: 1
            }]
        );
    }

    #[test]
    fn out_of_range_names_record() {
        let err = parse_csv("t_us,x,y,p\n0,1,1,0\n5,8,0,1\n", 8, 8).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("record 1") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn unsorted_input_is_stably_sorted() {
        let l = parse_csv("t_us,x,y,p\n20,0,0,1\n10,1,0,1\n20,2,0,0\n", 4, 4).unwrap();
        assert!(l.resorted);
        let xs: Vec<u16> = l.stream.events.iter().map(|e| e.x).collect();
        assert_eq!(xs, vec![1, 0, 2]);
    }

    #[test]
    fn evs_ignores_reserved_and_checks_length() {
        let s = EventStream {
            width: 4,
            height: 3,
            events: vec![Event {
                t: 7,
                x: 3,
                y: 2,
                p: 1,
            }],
        };
        let mut buf = Vec::new();
        write_evs(&s, &mut buf).unwrap();
        assert_eq!(buf.len(), 34);
        buf[33] = 0xAB;
        assert_eq!(parse_evs(&buf).unwrap().stream, s);
        buf.push(0);
        assert!(parse_evs(&buf).is_err());
    }

    #[test]
    fn evs_rejects_bad_magic() {
        let err = parse_evs(b"EVS1\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
