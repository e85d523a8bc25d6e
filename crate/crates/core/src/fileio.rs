//! Shared container format: one line of JSON, a `\n`, then a payload of
//! little-endian IEEE-754 doubles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{EllaError, Result};

pub fn write_container<H: Serialize, W: Write>(mut out: W, header: &H, payload: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    out.write_all(&json)?;
    out.write_all(b"\n")?;
    for v in payload {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_container<H: DeserializeOwned, R: Read>(mut input: R) -> Result<(H, Vec<f64>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| EllaError::Format("missing header terminator".into()))?;
    let header: H = serde_json::from_slice(&bytes[..nl])?;
    let body = &bytes[nl + 1..];
    if body.len() % 8 != 0 {
        return Err(EllaError::Format(format!(
            "payload length {} is not a multiple of 8",
            body.len()
        )));
    }
    let payload = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn save<H: Serialize>(path: impl AsRef<Path>, header: &H, payload: &[f64]) -> Result<()> {
    let file = File::create(path)?;
    write_container(BufWriter::new(file), header, payload)
}

pub fn load<H: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(H, Vec<f64>)> {
    read_container(BufReader::new(File::open(path)?))
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn check_format(found: &str, expected: &str, version: u32, supported: u32) -> Result<()> {
    if found != expected {
        return Err(EllaError::Format(format!("expected a {expected} file, found {found}")));
    }
    if version != supported {
        return Err(EllaError::Format(format!(
            "{expected} version {version} unsupported (expected {supported})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let payload = [1.0, -0.0, f64::MIN_POSITIVE, 1e300, std::f64::consts::PI];
        let mut buf = Vec::new();
        write_container(&mut buf, &serde_json::json!({"a": 1}), &payload).unwrap();
        let (h, back): (serde_json::Value, Vec<f64>) = read_container(&buf[..]).unwrap();
        assert_eq!(h["a"], 1);
        let bits: Vec<u64> = back.iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = payload.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut buf = Vec::new();
        write_container(&mut buf, &serde_json::json!({}), &[1.0]).unwrap();
        buf.pop();
        let res: Result<(serde_json::Value, Vec<f64>)> = read_container(&buf[..]);
        assert!(matches!(res, Err(EllaError::Format(_))));
    }
}
