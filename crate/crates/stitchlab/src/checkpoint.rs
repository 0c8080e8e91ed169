//! Network checkpoints: a raw little-endian `f32` blob plus a JSON sidecar
//! holding the architecture and a digest of the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stitchlab_core::{NetConfig, TappedNetwork};

use crate::config::hex;
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: NetConfig,
    pub values: usize,
    pub sha256: String,
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> CliResult<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(CliError::Other(format!("blob length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn sidecar(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

/// Writes `<path>` (the blob) and `<path>.json`; returns both paths.
pub fn save_network(net: &mut TappedNetwork, path: &Path) -> CliResult<[PathBuf; 2]> {
    let bytes = encode_f32(&net.export_state());
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        config: net.config.clone(),
        values: bytes.len() / 4,
        sha256: hex(&Sha256::digest(&bytes)),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| CliError::io(path, e))?;
    let side = sidecar(path);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&side, json).map_err(|e| CliError::io(&side, e))?;
    Ok([path.to_path_buf(), side])
}

pub fn load_network(path: &Path) -> CliResult<TappedNetwork> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| CliError::io(&side, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", side.display())))?;
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let digest = hex(&Sha256::digest(&bytes));
    if digest != meta.sha256 {
        return Err(CliError::Other(format!("{}: checksum mismatch", path.display())));
    }
    // The build seed is irrelevant: every value is overwritten.
    let mut net = TappedNetwork::build(&meta.config, 0)?;
    net.import_state(&decode_f32(&bytes)?)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use stitchlab_core::ArchId;

    #[test]
    fn network_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetConfig::new(ArchId::SmallResidual, 10).with_width(0.0625).with_resolution(8);
        let mut net = TappedNetwork::build(&cfg, 5).unwrap();
        let path = dir.path().join("net.bin");
        save_network(&mut net, &path).unwrap();
        let mut back = load_network(&path).unwrap();
        assert_eq!(back.export_state(), net.export_state());
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetConfig::new(ArchId::PlainConv, 10).with_width(0.0625).with_resolution(8);
        let mut net = TappedNetwork::build(&cfg, 5).unwrap();
        let path = dir.path().join("net.bin");
        save_network(&mut net, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(load_network(&path).is_err());
    }
}
