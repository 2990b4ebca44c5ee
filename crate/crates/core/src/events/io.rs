//! `EVT1` event files and label CSV files.
//!
//! EVT1 is little-endian: the magic `EVT1`, `u32` width, `u32` height,
//! `u64` record count, then 16-byte records of `u64` t_us, `u16` x, `u16` y,
//! `i8` polarity and three zero bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Event, EventStream, LabelSample, LabelTrack, Polarity};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EVT1";
const HEADER_LEN: usize = 20;
const RECORD_LEN: usize = 16;

pub fn load_events(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_events(&bytes)
}

pub fn read_events(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "EVT1 header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("missing EVT1 magic".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    let expected = (count as u128) * RECORD_LEN as u128;
    if body.len() as u128 != expected {
        return Err(Error::Format(format!(
            "header declares {count} records ({expected} bytes) but body has {} bytes",
            body.len()
        )));
    }
    let mut events = Vec::with_capacity(count as usize);
    for (index, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let polarity = Polarity::from_i8(rec[12] as i8).ok_or_else(|| Error::Validation {
            index,
            reason: format!("polarity {} is not +1 or -1", rec[12] as i8),
        })?;
        if rec[13..16] != [0, 0, 0] {
            return Err(Error::Format(format!("record {index}: reserved bytes not zero")));
        }
        events.push(Event { t, x, y, polarity });
    }
    EventStream::new(width, height, events)
}

pub fn write_events<W: Write>(mut w: W, stream: &EventStream) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&stream.width().to_le_bytes())?;
    w.write_all(&stream.height().to_le_bytes())?;
    w.write_all(&(stream.len() as u64).to_le_bytes())?;
    let mut rec = [0u8; RECORD_LEN];
    for e in stream.events() {
        rec[0..8].copy_from_slice(&e.t.to_le_bytes());
        rec[8..10].copy_from_slice(&e.x.to_le_bytes());
        rec[10..12].copy_from_slice(&e.y.to_le_bytes());
        rec[12] = e.polarity.as_i8() as u8;
        w.write_all(&rec)?;
    }
    w.flush()
}

pub fn save_events(path: impl AsRef<Path>, stream: &EventStream) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_events(BufWriter::new(f), stream).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: impl AsRef<Path>, rate_hz: f64) -> Result<LabelTrack> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_labels(BufReader::new(f), rate_hz)
}

/// Parses `t_us,x,y,close` CSV. Columns may appear in any order.
pub fn read_labels<R: BufRead>(r: R, rate_hz: f64) -> Result<LabelTrack> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::Format(format!("unreadable label header: {e}")))?,
        None => return Err(Error::Format("empty label file".into())),
    };
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Format(format!("label file is missing column '{name}'")))
    };
    let (it, ix, iy, ic) = (find("t_us")?, find("x")?, find("y")?, find("close")?);

    let mut samples = Vec::new();
    for (index, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Format(format!("unreadable label row {index}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!(
                "label row {index} has {} fields, header has {}",
                fields.len(),
                cols.len()
            )));
        }
        let bad = |what: &str| Error::Format(format!("label row {index}: cannot parse {what}"));
        let t: u64 = fields[it].parse().map_err(|_| bad("t_us"))?;
        let x: f64 = fields[ix].parse().map_err(|_| bad("x"))?;
        let y: f64 = fields[iy].parse().map_err(|_| bad("y"))?;
        let close = match fields[ic] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Validation {
                    index,
                    reason: format!("close must be 0 or 1, got '{other}'"),
                })
            }
        };
        samples.push(LabelSample { t, x, y, close });
    }
    LabelTrack::new(rate_hz, samples)
}

pub fn write_labels<W: Write>(mut w: W, track: &LabelTrack) -> std::io::Result<()> {
    writeln!(w, "t_us,x,y,close")?;
    for s in track.samples() {
        writeln!(w, "{},{},{},{}", s.t, s.x, s.y, s.close as u8)?;
    }
    w.flush()
}

pub fn save_labels(path: impl AsRef<Path>, track: &LabelTrack) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_labels(BufWriter::new(f), track).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn evt_bytes(width: u32, height: u32, records: &[(u64, u16, u16, i8)]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"EVT1");
        b.extend_from_slice(&width.to_le_bytes());
        b.extend_from_slice(&height.to_le_bytes());
        b.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for &(t, x, y, p) in records {
            b.extend_from_slice(&t.to_le_bytes());
            b.extend_from_slice(&x.to_le_bytes());
            b.extend_from_slice(&y.to_le_bytes());
            b.push(p as u8);
            b.extend_from_slice(&[0, 0, 0]);
        }
        b
    }

    #[test]
    fn empty_file_loads_with_dimensions() {
        let s = read_events(&evt_bytes(640, 480, &[])).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.width(), 640);
        assert_eq!(s.height(), 480);
    }

    #[test]
    fn two_records_in_order() {
        let s = read_events(&evt_bytes(640, 480, &[(10, 3, 2, 1), (20, 3, 2, -1)])).unwrap();
        assert_eq!(
            s.events(),
            &[
                Event::new(10, 3, 2, Polarity::Positive),
                Event::new(20, 3, 2, Polarity::Negative)
            ]
        );
    }

    #[test]
    fn out_of_range_x_names_record() {
        let err = read_events(&evt_bytes(640, 480, &[(10, 3, 2, 1), (20, 700, 2, 1)])).unwrap_err();
        match err {
            Error::Validation { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decreasing_timestamps_rejected() {
        let err = read_events(&evt_bytes(64, 48, &[(30, 1, 1, 1), (20, 1, 1, 1)])).unwrap_err();
        assert!(matches!(err, Error::Validation { index: 1, .. }));
    }

    #[test]
    fn malformed_header_is_format_error() {
        assert!(matches!(read_events(b"EVT1\0\0"), Err(Error::Format(_))));
        let mut b = evt_bytes(64, 48, &[(1, 1, 1, 1)]);
        b[0] = b'X';
        assert!(matches!(read_events(&b), Err(Error::Format(_))));
        let b = evt_bytes(64, 48, &[(1, 1, 1, 1)]);
        assert!(matches!(read_events(&b[..b.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn bad_polarity_rejected() {
        let err = read_events(&evt_bytes(64, 48, &[(1, 1, 1, 0)])).unwrap_err();
        assert!(matches!(err, Error::Validation { index: 0, .. }));
    }

    #[test]
    fn labels_at_exact_spacing() {
        let csv = "t_us,x,y,close\n0,1.5,2,0\n10000,2,3,0\n20000,3,4,1\n";
        let track = read_labels(csv.as_bytes(), 100.0).unwrap();
        assert_eq!(track.len(), 3);
        assert!(track.samples()[2].close);
    }

    #[test]
    fn labels_with_wrong_spacing_rejected() {
        let csv = "t_us,x,y,close\n0,1,1,0\n9000,1,1,0\n";
        assert!(matches!(
            read_labels(csv.as_bytes(), 100.0),
            Err(Error::Validation { index: 1, .. })
        ));
    }

    #[test]
    fn close_must_be_binary() {
        let csv = "t_us,x,y,close\n0,1,1,2\n";
        assert!(matches!(
            read_labels(csv.as_bytes(), 100.0),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn missing_column_is_format_error() {
        let csv = "t_us,x,close\n0,1,0\n";
        assert!(matches!(read_labels(csv.as_bytes(), 100.0), Err(Error::Format(_))));
    }

    #[test]
    fn labels_round_trip() {
        let csv = "t_us,x,y,close\n0,1.25,2,0\n10000,2.5,3.125,1\n";
        let track = read_labels(csv.as_bytes(), 100.0).unwrap();
        let mut out = Vec::new();
        write_labels(&mut out, &track).unwrap();
        assert_eq!(read_labels(out.as_slice(), 100.0).unwrap(), track);
    }
}
