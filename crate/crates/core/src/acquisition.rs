//! Wire framing, stream synchronization, and the on-disk log format.
//!
//! Tactile readings travel as 8-byte frames addressed by an 11-bit id that
//! encodes the bus/slot position of the sensor (20 sensors split across
//! 5 buses of 4). The tactile and reference force streams run on separate
//! clocks; `merge_streams` pairs each tactile sample with the nearest
//! reference sample in time. Merged records persist as versioned CSV logs.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Widest pairing window accepted by default: half the 10 ms sample period.
pub const DEFAULT_MAX_SKEW_US: i64 = 5000;

/// First line of every log file.
pub const LOG_VERSION_LINE: &str = "#tcal-log v1";

/// Column header line of every log file.
pub const LOG_COLUMNS: &str = "t_us,taxel,cx,cy,cz,fx,fy,fz,skew_us,clamp";

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("taxel id {0} is not assigned to a bus")]
    UnknownTaxel(u8),
    #[error("frame id {0:#05x} does not map to a known sensor")]
    UnknownFrameId(u16),
    #[error("payload must be exactly 8 bytes, got {0}")]
    MalformedPayload(usize),
    #[error("{stream} stream is not sorted by time at index {index}")]
    UnsortedInput { stream: &'static str, index: usize },
    #[error("log schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("log parse error at line {line}: {msg}")]
    ParseRow { line: usize, msg: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
}

/// One quantized 3-axis reading from a single taxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawTaxelSample {
    /// Microseconds since the stream epoch.
    pub t_us: u64,
    pub taxel_id: u8,
    pub counts: [i16; 3],
    /// True when the forward model clamped the magnet displacement.
    pub clamp_flag: bool,
}

/// One 3-axis force reading from the reference sensor, in newtons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub t_us: u64,
    pub force_n: [f64; 3],
}

/// A tactile sample paired with its nearest-in-time reference force.
///
/// `skew_us` is the reference timestamp minus the tactile timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncedRecord {
    pub t_us: u64,
    pub taxel_id: u8,
    pub counts: [i16; 3],
    pub force_n: [f64; 3],
    pub skew_us: i64,
    pub clamp_flag: bool,
}

/// Assignment of the 20 taxels to 5 buses of 4 sensor slots each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusTopology {
    bus_count: u8,
    sensors_per_bus: u8,
    /// Indexed by taxel id.
    assignment: Vec<(u8, u8)>,
}

impl Default for BusTopology {
    /// Row-major default: taxel t sits on bus t/4, slot t%4.
    fn default() -> Self {
        let assignment = (0..20u8).map(|t| (t / 4, t % 4)).collect();
        Self {
            bus_count: 5,
            sensors_per_bus: 4,
            assignment,
        }
    }
}

impl BusTopology {
    /// Builds a topology from an explicit taxel -> (bus, slot) table.
    /// The table must be a bijection onto {0..bus_count} x {0..sensors_per_bus}.
    pub fn new(
        bus_count: u8,
        sensors_per_bus: u8,
        assignment: Vec<(u8, u8)>,
    ) -> Result<Self, AcquisitionError> {
        let n = bus_count as usize * sensors_per_bus as usize;
        if n != 20 {
            return Err(AcquisitionError::InvalidTopology(format!(
                "bus_count x sensors_per_bus must be 20, got {n}"
            )));
        }
        if assignment.len() != n {
            return Err(AcquisitionError::InvalidTopology(format!(
                "expected {n} assignments, got {}",
                assignment.len()
            )));
        }
        let mut used = vec![false; n];
        for &(bus, slot) in &assignment {
            if bus >= bus_count || slot >= sensors_per_bus {
                return Err(AcquisitionError::InvalidTopology(format!(
                    "slot ({bus}, {slot}) out of range"
                )));
            }
            let idx = bus as usize * sensors_per_bus as usize + slot as usize;
            if used[idx] {
                return Err(AcquisitionError::InvalidTopology(format!(
                    "slot ({bus}, {slot}) assigned twice"
                )));
            }
            used[idx] = true;
        }
        Ok(Self {
            bus_count,
            sensors_per_bus,
            assignment,
        })
    }

    pub fn bus_count(&self) -> u8 {
        self.bus_count
    }

    pub fn sensors_per_bus(&self) -> u8 {
        self.sensors_per_bus
    }

    pub fn slot_of(&self, taxel_id: u8) -> Option<(u8, u8)> {
        self.assignment.get(taxel_id as usize).copied()
    }

    pub fn taxel_at(&self, bus: u8, slot: u8) -> Option<u8> {
        self.assignment
            .iter()
            .position(|&s| s == (bus, slot))
            .map(|i| i as u8)
    }
}

/// One on-the-wire message: 11-bit id plus an 8-byte payload.
///
/// id layout: bus in bits 5.., slot in bits 2..4, channel group in bits 0..2.
/// Group bit 0 carries the clamp flag; group bit 1 is reserved (zero).
/// Payload: counts x/y/z as little-endian i16, then the low 16 bits of the
/// sample timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireFrame {
    pub frame_id: u16,
    pub payload: [u8; 8],
}

impl WireFrame {
    /// Wraps a raw id/payload pair, rejecting payloads that are not 8 bytes
    /// and ids wider than 11 bits.
    pub fn from_bytes(frame_id: u16, payload: &[u8]) -> Result<Self, AcquisitionError> {
        if payload.len() != 8 {
            return Err(AcquisitionError::MalformedPayload(payload.len()));
        }
        if frame_id >= 2048 {
            return Err(AcquisitionError::UnknownFrameId(frame_id));
        }
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(payload);
        Ok(Self {
            frame_id,
            payload: bytes,
        })
    }
}

/// Packs a sample into a wire frame using the topology's (bus, slot) for the
/// sample's taxel. The timestamp is truncated to its low 16 bits.
pub fn encode_frame(
    s: &RawTaxelSample,
    topo: &BusTopology,
) -> Result<WireFrame, AcquisitionError> {
    let (bus, slot) = topo
        .slot_of(s.taxel_id)
        .ok_or(AcquisitionError::UnknownTaxel(s.taxel_id))?;
    let group = s.clamp_flag as u16;
    let frame_id = ((bus as u16) << 5) | ((slot as u16) << 2) | group;
    let mut payload = [0u8; 8];
    payload[0..2].copy_from_slice(&s.counts[0].to_le_bytes());
    payload[2..4].copy_from_slice(&s.counts[1].to_le_bytes());
    payload[4..6].copy_from_slice(&s.counts[2].to_le_bytes());
    payload[6..8].copy_from_slice(&((s.t_us & 0xFFFF) as u16).to_le_bytes());
    Ok(WireFrame { frame_id, payload })
}

/// Inverse of `encode_frame`. The recovered timestamp is the truncated
/// 16-bit value carried by the frame.
pub fn decode_frame(
    f: &WireFrame,
    topo: &BusTopology,
) -> Result<RawTaxelSample, AcquisitionError> {
    if f.frame_id >= 2048 {
        return Err(AcquisitionError::UnknownFrameId(f.frame_id));
    }
    let group = f.frame_id & 0b11;
    let slot = (f.frame_id >> 2) & 0b11;
    let reserved = (f.frame_id >> 4) & 0b1;
    let bus = f.frame_id >> 5;
    // Group bit 1 and id bit 4 are reserved and must be zero.
    if group & 0b10 != 0 || reserved != 0 {
        return Err(AcquisitionError::UnknownFrameId(f.frame_id));
    }
    let taxel_id = topo
        .taxel_at(bus as u8, slot as u8)
        .ok_or(AcquisitionError::UnknownFrameId(f.frame_id))?;
    let c = |i: usize| i16::from_le_bytes([f.payload[2 * i], f.payload[2 * i + 1]]);
    let t_us = u16::from_le_bytes([f.payload[6], f.payload[7]]) as u64;
    Ok(RawTaxelSample {
        t_us,
        taxel_id,
        counts: [c(0), c(1), c(2)],
        clamp_flag: group & 0b1 != 0,
    })
}

/// Pairs every tactile sample with the reference sample of minimum |dt|,
/// dropping pairs farther apart than `max_skew_us`. Both inputs must be
/// sorted by time; ties on |dt| go to the earlier reference sample. A
/// reference sample may serve any number of tactile samples. Output order
/// follows the tactile stream.
pub fn merge_streams(
    tactile: &[RawTaxelSample],
    reference: &[ReferenceSample],
    max_skew_us: i64,
) -> Result<Vec<SyncedRecord>, AcquisitionError> {
    for (i, w) in tactile.windows(2).enumerate() {
        if w[1].t_us < w[0].t_us {
            return Err(AcquisitionError::UnsortedInput {
                stream: "tactile",
                index: i + 1,
            });
        }
    }
    for (i, w) in reference.windows(2).enumerate() {
        if w[1].t_us < w[0].t_us {
            return Err(AcquisitionError::UnsortedInput {
                stream: "reference",
                index: i + 1,
            });
        }
    }
    let mut out = Vec::new();
    if reference.is_empty() {
        return Ok(out);
    }
    let dist = |j: usize, t: u64| reference[j].t_us.abs_diff(t);
    let mut j = 0usize;
    for s in tactile {
        // Both streams are sorted, so the best index never moves backward.
        while j + 1 < reference.len() && dist(j + 1, s.t_us) < dist(j, s.t_us) {
            j += 1;
        }
        let skew_us = reference[j].t_us as i64 - s.t_us as i64;
        if skew_us.abs() <= max_skew_us {
            out.push(SyncedRecord {
                t_us: s.t_us,
                taxel_id: s.taxel_id,
                counts: s.counts,
                force_n: reference[j].force_n,
                skew_us,
                clamp_flag: s.clamp_flag,
            });
        }
    }
    Ok(out)
}

/// Serializes records as a versioned CSV log. Forces must be finite; they
/// print in shortest round-trip form so write/read/write is byte-stable.
pub fn write_log_to<W: Write>(records: &[SyncedRecord], mut w: W) -> Result<(), AcquisitionError> {
    let mut text = String::new();
    text.push_str(LOG_VERSION_LINE);
    text.push('\n');
    text.push_str(LOG_COLUMNS);
    text.push('\n');
    for r in records {
        if r.force_n.iter().any(|f| !f.is_finite()) {
            return Err(AcquisitionError::InvalidRecord(format!(
                "non-finite force {:?} at t={}",
                r.force_n, r.t_us
            )));
        }
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t_us,
            r.taxel_id,
            r.counts[0],
            r.counts[1],
            r.counts[2],
            r.force_n[0],
            r.force_n[1],
            r.force_n[2],
            r.skew_us,
            r.clamp_flag as u8
        )
        .expect("write to string cannot fail");
    }
    w.write_all(text.as_bytes())?;
    Ok(())
}

pub fn write_log(records: &[SyncedRecord], path: &Path) -> Result<(), AcquisitionError> {
    let file = fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_log_to(records, &mut buf)?;
    buf.flush()?;
    Ok(())
}

/// Parses a log produced by `write_log`; inverse of serialization for every
/// field.
pub fn read_log_from<R: Read>(r: R) -> Result<Vec<SyncedRecord>, AcquisitionError> {
    let mut lines = BufReader::new(r).lines();
    let version = lines
        .next()
        .transpose()?
        .ok_or_else(|| AcquisitionError::SchemaMismatch("empty file, expected version line".into()))?;
    if version != LOG_VERSION_LINE {
        return Err(AcquisitionError::SchemaMismatch(format!(
            "expected version line {LOG_VERSION_LINE:?}, found {version:?}"
        )));
    }
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| AcquisitionError::SchemaMismatch("missing column header".into()))?;
    if header != LOG_COLUMNS {
        return Err(AcquisitionError::SchemaMismatch(format!(
            "expected columns {LOG_COLUMNS:?}, found {header:?}"
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 3;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(AcquisitionError::ParseRow {
                line: lineno,
                msg: format!("expected 10 fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str, v: &str| AcquisitionError::ParseRow {
            line: lineno,
            msg: format!("bad {what}: {v:?}"),
        };
        let t_us = fields[0].parse().map_err(|_| parse_err("t_us", fields[0]))?;
        let taxel_id = fields[1].parse().map_err(|_| parse_err("taxel", fields[1]))?;
        let mut counts = [0i16; 3];
        for a in 0..3 {
            counts[a] = fields[2 + a]
                .parse()
                .map_err(|_| parse_err("counts", fields[2 + a]))?;
        }
        let mut force_n = [0f64; 3];
        for a in 0..3 {
            force_n[a] = fields[5 + a]
                .parse()
                .map_err(|_| parse_err("force", fields[5 + a]))?;
        }
        let skew_us = fields[8].parse().map_err(|_| parse_err("skew_us", fields[8]))?;
        let clamp_flag = match fields[9] {
            "0" => false,
            "1" => true,
            v => return Err(parse_err("clamp", v)),
        };
        out.push(SyncedRecord {
            t_us,
            taxel_id,
            counts,
            force_n,
            skew_us,
            clamp_flag,
        });
    }
    Ok(out)
}

pub fn read_log(path: &Path) -> Result<Vec<SyncedRecord>, AcquisitionError> {
    read_log_from(fs::File::open(path)?)
}
