//! Checkpoint container: a JSON header followed by named f32 parameter
//! groups, all little-endian.
//!
//! Layout: 8 magic bytes, u32 header length, header JSON, u32 group count,
//! then per group [u16 name length, name bytes, u32 element count, f32
//! values]. Groups are written in ascending name order so identical state
//! always produces an identical file. Shapes are not stored — element counts
//! are validated against the model configuration named by the header digest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::trainer::StageKind;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSLCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where a resumed run picks up: the next stage/epoch to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulePosition {
    pub stage: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Digest of the (model config, schedule) pair the parameters belong to.
    pub config_digest: String,
    pub position: SchedulePosition,
    /// Gumbel-noise stream position.
    pub rng: RngState,
    pub supervised_stages_completed: usize,
    pub last_stage_kind: Option<StageKind>,
    /// Optimizer step count (bias-correction clock).
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Model parameters plus optimizer moments (`optim.m.*` / `optim.v.*`).
    pub groups: BTreeMap<String, Vec<f32>>,
}

/// Hex SHA-256 of a value's canonical JSON form.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let header = serde_json::to_vec(&checkpoint.header)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(checkpoint.groups.len() as u32).to_le_bytes())?;
    for (name, values) in &checkpoint.groups {
        if name.len() > u16::MAX as usize {
            return Err(Error::Parameter(format!(
                "group name `{}…` is too long to serialize",
                &name[..32]
            )));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(values.len() as u32).to_le_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let display = path.display().to_string();
    let format_err = |reason: &str| Error::Format {
        path: display.clone(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut cursor = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cursor + n > data.len() {
            return Err(format_err(&format!("truncated while reading {what}")));
        }
        let slice = &data[cursor..cursor + n];
        cursor += n;
        Ok(slice)
    };

    if take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(format_err("wrong magic bytes"));
    }
    let header_len = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
    let header_bytes = take(header_len, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| format_err(&format!("bad header JSON: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint version {} but this build reads version {}",
            header.version, CHECKPOINT_VERSION
        )));
    }
    let group_count = u32::from_le_bytes(take(4, "group count")?.try_into().unwrap()) as usize;
    let mut groups = BTreeMap::new();
    for _ in 0..group_count {
        let name_len =
            u16::from_le_bytes(take(2, "group name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len, "group name")?)
            .map_err(|_| format_err("group name is not UTF-8"))?
            .to_string();
        let count = u32::from_le_bytes(take(4, "element count")?.try_into().unwrap()) as usize;
        let bytes = take(count * 4, "group values")?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if groups.insert(name.clone(), values).is_some() {
            return Err(format_err(&format!("duplicate group `{name}`")));
        }
    }
    if cursor != data.len() {
        return Err(format_err(&format!(
            "{} trailing bytes after the last group",
            data.len() - cursor
        )));
    }
    Ok(Checkpoint { header, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn sample_checkpoint() -> Checkpoint {
        let rng = SeededRng::from_seed_u64(3);
        let mut groups = BTreeMap::new();
        groups.insert("mapper.w1".to_string(), vec![0.5f32, -1.25, 3.0e-7]);
        groups.insert("optim.m.mapper.w1".to_string(), vec![0.0f32, 0.125, -2.0]);
        groups.insert("mapper.b1".to_string(), vec![1.0f32; 4]);
        Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                config_digest: "abc123".into(),
                position: SchedulePosition { stage: 1, epoch: 0 },
                rng: rng.state(),
                supervised_stages_completed: 1,
                last_stage_kind: Some(StageKind::Supervised),
                adam_step: 40,
            },
            groups,
        }
    }

    #[test]
    fn round_trip_is_exact_and_rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);

        let first = std::fs::read(&path).unwrap();
        write_checkpoint(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn f32_payloads_survive_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bits.ckpt");
        let mut ckpt = sample_checkpoint();
        let tricky = vec![f32::MIN_POSITIVE, -0.0, 1.0e-45, 3.4e38, 1.0 / 3.0];
        ckpt.groups.insert("edge".into(), tricky.clone());
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        let stored = &back.groups["edge"];
        for (a, b) in tricky.iter().zip(stored) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let ckpt = sample_checkpoint();
        write_checkpoint(&path, &ckpt).unwrap();
        let good = std::fs::read(&path).unwrap();

        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::Format { reason, .. }) if reason.contains("magic")
        ));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::Format { reason, .. }) if reason.contains("truncated")
        ));

        let mut padded = good.clone();
        padded.extend_from_slice(&[0, 0]);
        std::fs::write(&path, &padded).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::Format { reason, .. }) if reason.contains("trailing")
        ));
    }

    #[test]
    fn future_versions_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("future.ckpt");
        let mut ckpt = sample_checkpoint();
        ckpt.header.version = CHECKPOINT_VERSION + 1;
        write_checkpoint(&path, &ckpt).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn digest_tracks_value_identity() {
        #[derive(Serialize)]
        struct Cfg {
            lr: f64,
            epochs: usize,
        }
        let a = config_digest(&Cfg { lr: 0.01, epochs: 10 });
        let b = config_digest(&Cfg { lr: 0.01, epochs: 10 });
        let c = config_digest(&Cfg { lr: 0.02, epochs: 10 });
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }
}
