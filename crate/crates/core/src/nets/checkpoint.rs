use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mlp::{Activation, MlpParams};

/// JSON sidecar of a checkpoint. Parameters live next to it in
/// `<name>.bin` as little-endian `f64`, in [`MlpParams::to_flat`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub num_params: usize,
    pub optimizer_step: u64,
    pub lr: f64,
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.bin")), dir.join(format!("{name}.json")))
}

pub fn save_checkpoint(dir: &Path, name: &str, params: &MlpParams, optimizer_step: u64, lr: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (bin, json) = paths(dir, name);
    let bytes: Vec<u8> = params.to_flat().iter().flat_map(|v| v.to_le_bytes()).collect();
    let meta = CheckpointMeta {
        widths: params.widths().to_vec(),
        activation: params.activation(),
        num_params: params.num_params(),
        optimizer_step,
        lr,
    };
    write_atomic(&bin, &bytes)?;
    write_atomic(&json, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, name: &str) -> Result<(MlpParams, CheckpointMeta)> {
    let (bin, json) = paths(dir, name);
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(json)?)?;
    let bytes = fs::read(bin)?;
    if bytes.len() != 8 * meta.num_params {
        return Err(Error::shape(format!(
            "checkpoint holds {} bytes, expected {}",
            bytes.len(),
            8 * meta.num_params
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((MlpParams::from_flat(&meta.widths, &flat)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = MlpParams::init(&[5, 16, 3], &mut stream(11, Stream::Init)).unwrap();
        save_checkpoint(dir.path(), "g", &p, 42, 0.035).unwrap();
        let (q, meta) = load_checkpoint(dir.path(), "g").unwrap();
        assert_eq!(p, q);
        assert_eq!(meta.optimizer_step, 42);
        assert_eq!(meta.lr, 0.035);
        assert!(!dir.path().join("g.bin.tmp").exists());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = MlpParams::init(&[2, 4, 1], &mut stream(12, Stream::Init)).unwrap();
        save_checkpoint(dir.path(), "f", &p, 0, 0.01).unwrap();
        fs::write(dir.path().join("f.bin"), [0u8; 12]).unwrap();
        assert!(load_checkpoint(dir.path(), "f").is_err());
    }
}
