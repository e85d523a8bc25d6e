//! Checkpoint files: JSON header (architecture, parameter count, format
//! version, free-form metadata) followed by the parameter vector as
//! little-endian doubles in the documented flattening order.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::arch::ArchDescriptor;
use super::engine::FlatParams;
use crate::error::{EllaError, Result};
use crate::fileio;

pub const CHECKPOINT_FORMAT: &str = "ella-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub arch: ArchDescriptor,
    pub num_params: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &FlatParams, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        arch: (**params.arch()).clone(),
        num_params: params.len(),
        meta,
    };
    fileio::save(path, &header, params.values())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(FlatParams, serde_json::Value)> {
    let (header, values): (CheckpointHeader, Vec<f64>) = fileio::load(path)?;
    fileio::check_format(&header.format, CHECKPOINT_FORMAT, header.version, CHECKPOINT_VERSION)?;
    if header.num_params != header.arch.num_params() || values.len() != header.num_params {
        return Err(EllaError::Format(format!(
            "checkpoint declares {} parameters, architecture has {}, payload has {}",
            header.num_params,
            header.arch.num_params(),
            values.len()
        )));
    }
    Ok((FlatParams::new(Arc::new(header.arch), values)?, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::arch::Activation;

    #[test]
    fn checkpoint_roundtrip() {
        let arch = Arc::new(ArchDescriptor::mlp(&[2, 4, 3], Activation::Relu).unwrap());
        let params = FlatParams::init(arch, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, serde_json::json!({"seed": 9})).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(meta["seed"], 9);

        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, params.len() * 8);
        let first = f64::from_le_bytes(bytes[nl + 1..nl + 9].try_into().unwrap());
        assert_eq!(first, params.values()[0]);
    }
}
