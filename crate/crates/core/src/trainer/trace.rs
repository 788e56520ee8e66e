//! Per-iteration parameter-delta trace.
//!
//! Layout (little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 8     | magic `CYNKTRCE`                        |
//! | 4     | format version (u32)                    |
//! | 16    | d_in, hidden, d_emb, classes (u32 each) |
//! | 8     | EMA ratio m (f64)                       |
//! | 8     | declared iteration count (u64)          |
//! | 32    | config hash                             |
//!
//! followed by one record per iteration:
//!
//! | bytes | field                                          |
//! |-------|------------------------------------------------|
//! | 8     | iteration k, 1-based (u64)                     |
//! | 8     | digest of θ^m before the EMA step (u64)        |
//! | 8·n   | Δθ_k^f (f64)                                   |
//! | 8·n   | Δθ_k^m (f64)                                   |
//! | 8     | digest of the preceding record bytes (u64)     |

use std::io::{Read, Write};

use crate::encoder::LayerShape;
use crate::error::{Error, Result};
use crate::numeric::{digest_bytes, Vec64};

pub const TRACE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CYNKTRCE";
const HEADER_LEN: usize = 8 + 4 + 16 + 8 + 8 + 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceHeader {
    pub shape: LayerShape,
    pub m: f64,
    pub iterations: u64,
    pub config_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: u64,
    pub pre_ema_m_digest: u64,
    pub delta_f: Vec64,
    pub delta_m: Vec64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl TraceHeader {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        let s = self.shape;
        for dim in [s.d_in, s.hidden, s.d_emb, s.classes] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.m.to_le_bytes());
        out.extend_from_slice(&self.iterations.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out
    }
}

fn encode_record(rec: &TraceRecord) -> Vec<u8> {
    let n = rec.delta_f.len();
    let mut out = Vec::with_capacity(8 * (3 + 2 * n));
    out.extend_from_slice(&rec.k.to_le_bytes());
    out.extend_from_slice(&rec.pre_ema_m_digest.to_le_bytes());
    for v in rec.delta_f.iter().chain(&rec.delta_m) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let check = digest_bytes(&out);
    out.extend_from_slice(&check.to_le_bytes());
    out
}

/// Streams a trace to any writer.
pub struct TraceWriter<W: Write> {
    out: W,
    n_params: usize,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: &TraceHeader) -> std::io::Result<Self> {
        out.write_all(&header.encode())?;
        Ok(Self {
            out,
            n_params: header.shape.param_count(),
        })
    }

    pub fn append(&mut self, rec: &TraceRecord) -> std::io::Result<()> {
        if rec.delta_f.len() != self.n_params || rec.delta_m.len() != self.n_params {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "trace record does not match the declared layout",
            ));
        }
        self.out.write_all(&encode_record(rec))
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_trace<W: Write>(out: W, trace: &Trace) -> std::io::Result<()> {
    let mut w = TraceWriter::new(out, &trace.header)?;
    for r in &trace.records {
        w.append(r)?;
    }
    w.finish().map(|_| ())
}

/// Reads and validates a trace. A record whose checksum does not match its
/// contents is reported with its iteration index.
pub fn read_trace<R: Read>(mut input: R) -> Result<Trace> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::format("trace", e.to_string()))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::format("trace", "missing header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(8) as u32;
    if version != TRACE_VERSION {
        return Err(Error::format("trace", format!("unsupported version {version}")));
    }
    let shape = LayerShape {
        d_in: u32_at(12),
        hidden: u32_at(16),
        d_emb: u32_at(20),
        classes: u32_at(24),
    };
    shape
        .validate()
        .map_err(|e| Error::format("trace", format!("bad layout descriptor: {e}")))?;
    let m = f64::from_le_bytes(bytes[28..36].try_into().unwrap());
    let iterations = u64_at(36);
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(&bytes[44..76]);
    let header = TraceHeader {
        shape,
        m,
        iterations,
        config_hash,
    };

    let n = shape.param_count();
    let rec_len = 8 * (3 + 2 * n);
    let body = &bytes[HEADER_LEN..];
    if body.len() % rec_len != 0 {
        let whole = body.len() / rec_len;
        return Err(Error::format(
            "trace",
            format!("truncated record after iteration {whole}"),
        ));
    }
    let mut records = Vec::with_capacity(body.len() / rec_len);
    for chunk in body.chunks_exact(rec_len) {
        let k = u64::from_le_bytes(chunk[..8].try_into().unwrap());
        let stored = u64::from_le_bytes(chunk[rec_len - 8..].try_into().unwrap());
        if digest_bytes(&chunk[..rec_len - 8]) != stored {
            let position = records.len() + 1;
            return Err(Error::format(
                "trace",
                format!("record checksum mismatch at iteration {position} (stored index {k})"),
            ));
        }
        let floats = |from: usize| -> Vec64 {
            chunk[from..from + 8 * n]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        };
        records.push(TraceRecord {
            k,
            pre_ema_m_digest: u64::from_le_bytes(chunk[8..16].try_into().unwrap()),
            delta_f: floats(16),
            delta_m: floats(16 + 8 * n),
        });
    }
    Ok(Trace { header, records })
}
