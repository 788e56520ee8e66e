//! Model checkpoint file.
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 8     | magic `CYNKCKPT`                        |
//! | 4     | format version (u32)                    |
//! | 16    | d_in, hidden, d_emb, classes (u32 each) |
//! | 32    | config hash (SHA-256, zero if unknown)  |
//! | 8     | parameter count (u64)                   |
//! | 8·n   | parameters (f64)                        |

use std::io::{Read, Write};

use super::{LayerShape, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CYNKCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config_hash: [u8; 32],
}

pub fn write_checkpoint<W: Write>(mut out: W, params: &ModelParams, config_hash: &[u8; 32]) -> std::io::Result<()> {
    let s = params.shape();
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for dim in [s.d_in, s.hidden, s.d_emb, s.classes] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    out.write_all(config_hash)?;
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.len() * 8);
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let header_len = 8 + 4 + 16 + 32 + 8;
    if bytes.len() < header_len || &bytes[..8] != MAGIC {
        return Err(Error::format("checkpoint", "missing header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let shape = LayerShape {
        d_in: u32_at(12) as usize,
        hidden: u32_at(16) as usize,
        d_emb: u32_at(20) as usize,
        classes: u32_at(24) as usize,
    };
    shape
        .validate()
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(&bytes[28..60]);
    let count = u64::from_le_bytes(bytes[60..68].try_into().unwrap()) as usize;
    if count != shape.param_count() {
        return Err(Error::format(
            "checkpoint",
            format!("header declares {count} parameters but shape implies {}", shape.param_count()),
        ));
    }
    let body = &bytes[header_len..];
    if body.len() != count * 8 {
        return Err(Error::format(
            "checkpoint",
            format!("expected {} payload bytes, found {}", count * 8, body.len()),
        ));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Checkpoint {
        params: ModelParams::from_values(shape, values)?,
        config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;

    #[test]
    fn round_trip_and_validation() {
        let shape = LayerShape::default();
        let params = ModelParams::init_uniform(shape, &mut RngStream::new(2, 2));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params, &[7u8; 32]).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.config_hash, [7u8; 32]);

        let truncated = &buf[..buf.len() - 8];
        assert!(read_checkpoint(truncated).is_err());
        let mut wrong = buf.clone();
        wrong[60] ^= 1;
        assert!(read_checkpoint(wrong.as_slice()).is_err());
    }
}
