use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::SecureAggError;

pub const HEADER_BYTES: usize = 12;

/// One network message: a little-endian header (round u32, block u16,
/// origin u16, len u32) followed by `len` little-endian f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub round: u32,
    pub block: u16,
    pub origin: u16,
    pub values: Vec<f64>,
}

impl Frame {
    pub fn new(round: u32, block: u16, origin: u16, values: Vec<f64>) -> Self {
        Self { round, block, origin, values }
    }

    /// Size on the wire.
    pub fn byte_len(&self) -> usize {
        HEADER_BYTES + 8 * self.values.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.block.to_le_bytes());
        out.extend_from_slice(&self.origin.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes one frame from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), SecureAggError> {
        if bytes.len() < HEADER_BYTES {
            return Err(SecureAggError::Decode("truncated header".into()));
        }
        let round = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
        let block = u16::from_le_bytes(bytes[4..6].try_into().expect("2 bytes"));
        let origin = u16::from_le_bytes(bytes[6..8].try_into().expect("2 bytes"));
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let end = HEADER_BYTES + 8 * len;
        if bytes.len() < end {
            return Err(SecureAggError::Decode(format!("payload needs {end} bytes, have {}", bytes.len())));
        }
        let values = bytes[HEADER_BYTES..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((Self { round, block, origin, values }, end))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceKind {
    /// Masked block sent to its aggregator.
    Masked = 0,
    /// Averaged block broadcast by its aggregator.
    Broadcast = 1,
}

/// A delivered message as recorded in the trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub kind: TraceKind,
    pub dest: u16,
    pub frame: Frame,
}

/// Writes records as `kind u8, dest u16 (LE), frame` back to back.
pub fn write_trace(mut w: impl Write, records: &[TraceRecord]) -> Result<(), SecureAggError> {
    for r in records {
        w.write_all(&[r.kind as u8])?;
        w.write_all(&r.dest.to_le_bytes())?;
        w.write_all(&r.frame.encode())?;
    }
    Ok(())
}

pub fn read_trace(mut r: impl Read) -> Result<Vec<TraceRecord>, SecureAggError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes.len() - pos < 3 {
            return Err(SecureAggError::Decode("truncated trace record".into()));
        }
        let kind = match bytes[pos] {
            0 => TraceKind::Masked,
            1 => TraceKind::Broadcast,
            k => return Err(SecureAggError::Decode(format!("unknown record kind {k}"))),
        };
        let dest = u16::from_le_bytes([bytes[pos + 1], bytes[pos + 2]]);
        let (frame, used) = Frame::decode(&bytes[pos + 3..])?;
        out.push(TraceRecord { kind, dest, frame });
        pos += 3 + used;
    }
    Ok(out)
}
