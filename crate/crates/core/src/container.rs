//! Binary container used for tapes and canary sets.
//!
//! ```text
//! offset  size  field
//! 0       8     magic
//! 8       4     header length H (u32, little-endian)
//! 12      H     header, UTF-8 JSON
//! 12+H    ...   payload, little-endian arrays (layout defined by the header)
//! ```

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{AuditError, Result};

pub const TAPE_MAGIC: [u8; 8] = *b"CATAPE\0\x01";
pub const CANARY_MAGIC: [u8; 8] = *b"CACNRY\0\x01";

pub fn write_container<W: Write, H: Serialize>(mut w: W, magic: [u8; 8], header: &H, payload: &[u8]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let len = u32::try_from(header.len()).map_err(|_| AuditError::Config("header too large".into()))?;
    w.write_all(&magic)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(payload)?;
    Ok(())
}

pub fn read_container<R: Read, H: DeserializeOwned>(
    mut r: R,
    magic: [u8; 8],
    what: &'static str,
) -> Result<(H, Payload)> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|e| malformed(what, 0, e.to_string()))?;
    if head[..8] != magic {
        return Err(malformed(what, 0, "bad magic".into()));
    }
    let len = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)
        .map_err(|e| malformed(what, 12, e.to_string()))?;
    let header: H = serde_json::from_slice(&header).map_err(|e| malformed(what, 12, e.to_string()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    Ok((
        header,
        Payload {
            bytes,
            pos: 0,
            base: 12 + len as u64,
            what,
        },
    ))
}

fn malformed(what: &'static str, offset: u64, reason: String) -> AuditError {
    AuditError::Malformed { what, offset, reason }
}

/// Sequential little-endian reader over a container payload.
pub struct Payload {
    bytes: Vec<u8>,
    pos: usize,
    base: u64,
    what: &'static str,
}

impl Payload {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(malformed(
                self.what,
                self.base + self.pos as u64,
                format!("truncated: need {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(malformed(
                self.what,
                self.base + self.pos as u64,
                "trailing bytes".into(),
            ));
        }
        Ok(())
    }
}
