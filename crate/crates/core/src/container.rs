//! Binary container shared by model and residualizer files: an 8-byte
//! magic, a little-endian u64 header length, a JSON header and a raw
//! little-endian f32 payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[f32]) -> Result<Vec<u8>> {
    let json =
        serde_json::to_vec(header).map_err(|e| Error::Format(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(H, Vec<f32>)> {
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(Error::Format("header extends past end of file".into()));
    }
    let header: H =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &body[len..];
    if payload.len() % 4 != 0 {
        return Err(Error::Format(
            "payload is not a whole number of f32 values".into(),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub fn write<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    header: &H,
    payload: &[f32],
) -> Result<()> {
    let bytes = encode(magic, header, payload)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}
