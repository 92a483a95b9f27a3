//! Checkpoint format: JSON manifest + little-endian f64 binary blob.
//!
//! The manifest lists every partition entry with its shape and byte offset
//! into the blob. Round trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, Parameters};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this entry's first value inside the blob.
    pub offset: u64,
    /// Number of f64 values.
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub mode: String,
    pub seed: u64,
    pub partitions: Vec<PartitionRecord>,
}

/// Writes `checkpoint.json` and `checkpoint.bin` under `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &Parameters,
    cfg: &ModelConfig,
    mode: &str,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut partitions = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for entry in params.entries() {
        partitions.push(PartitionRecord {
            name: entry.name.to_string(),
            shape: entry.shape.clone(),
            offset: blob.len() as u64,
            len: entry.data.len(),
        });
        for &v in entry.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        model: cfg.clone(),
        mode: mode.to_string(),
        seed,
        partitions,
    };
    let mut f = fs::File::create(dir.join("checkpoint.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    fs::write(dir.join("checkpoint.bin"), blob)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`], validating names,
/// shapes, and offsets against the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(Parameters, CheckpointManifest)> {
    let json_path = dir.join("checkpoint.json");
    if !json_path.exists() {
        return Err(Error::MissingCheckpoint(json_path));
    }
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    manifest.model.validate()?;
    let blob = fs::read(dir.join("checkpoint.bin"))?;

    let mut params = Parameters::zeros(&manifest.model);
    let entries = params.entries_mut();
    if entries.len() != manifest.partitions.len() {
        return Err(Error::InvalidCheckpoint(format!(
            "expected {} partitions, manifest lists {}",
            entries.len(),
            manifest.partitions.len()
        )));
    }
    for (dst, rec) in entries.into_iter().zip(&manifest.partitions) {
        if dst.name != rec.name {
            return Err(Error::InvalidCheckpoint(format!(
                "partition {:?} where {:?} was expected",
                rec.name, dst.name
            )));
        }
        if dst.data.len() != rec.len {
            return Err(Error::InvalidCheckpoint(format!(
                "partition {:?}: expected {} values, manifest lists {}",
                rec.name,
                dst.data.len(),
                rec.len
            )));
        }
        let start = rec.offset as usize;
        let end = start + rec.len * 8;
        if end > blob.len() {
            return Err(Error::InvalidCheckpoint(format!(
                "partition {:?} overruns blob ({} > {})",
                rec.name,
                end,
                blob.len()
            )));
        }
        for (k, v) in dst.data.iter_mut().enumerate() {
            let o = start + k * 8;
            *v = f64::from_le_bytes(blob[o..o + 8].try_into().unwrap());
        }
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::default();
        let params = Parameters::init(&cfg, RngStream::new(21, 0));
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &cfg, "baseline", 21).unwrap();
        let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(manifest.mode, "baseline");
        assert_eq!(manifest.seed, 21);
        assert_eq!(manifest.partitions.len(), 15);
    }

    #[test]
    fn saving_twice_yields_identical_bytes() {
        let cfg = ModelConfig::default();
        let params = Parameters::init(&cfg, RngStream::new(22, 0));
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_checkpoint(d1.path(), &params, &cfg, "aul", 1).unwrap();
        save_checkpoint(d2.path(), &params, &cfg, "aul", 1).unwrap();
        assert_eq!(
            std::fs::read(d1.path().join("checkpoint.bin")).unwrap(),
            std::fs::read(d2.path().join("checkpoint.bin")).unwrap()
        );
        assert_eq!(
            std::fs::read(d1.path().join("checkpoint.json")).unwrap(),
            std::fs::read(d2.path().join("checkpoint.json")).unwrap()
        );
    }

    #[test]
    fn missing_checkpoint_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::MissingCheckpoint(p)) => {
                assert!(p.ends_with("checkpoint.json"));
            }
            other => panic!("expected MissingCheckpoint, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let cfg = ModelConfig::default();
        let params = Parameters::init(&cfg, RngStream::new(23, 0));
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &cfg, "baseline", 0).unwrap();
        let bin = dir.path().join("checkpoint.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
