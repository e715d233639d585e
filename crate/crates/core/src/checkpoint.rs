//! Binary checkpoints: a magic tag, a JSON header, then little-endian f32
//! blobs in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use aroid_nn::ConvNetSpec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AROIDCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `target`, `affinity`, `train_state`, `policy_log`, ...
    pub kind: String,
    pub fingerprint: String,
    pub epoch: usize,
    pub arch: Option<ConvNetSpec>,
    pub policy_arch: Option<ConvNetSpec>,
    pub space_signature: Option<Vec<usize>>,
    pub blobs: Vec<(String, usize)>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blobs: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn new(kind: &str, fingerprint: &str, epoch: usize) -> Self {
        Self {
            header: CheckpointHeader {
                kind: kind.into(),
                fingerprint: fingerprint.into(),
                epoch,
                arch: None,
                policy_arch: None,
                space_signature: None,
                blobs: Vec::new(),
                extra: serde_json::Value::Null,
            },
            blobs: Vec::new(),
        }
    }

    pub fn push_blob(&mut self, name: &str, data: Vec<f32>) {
        self.header.blobs.push((name.into(), data.len()));
        self.blobs.push(data);
    }

    pub fn blob(&self, name: &str) -> Option<&[f32]> {
        self.header
            .blobs
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| self.blobs[i].as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let total: usize = self.blobs.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.blobs {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| err("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| err(format!("bad header: {e}")))?;
        let mut offset = 16 + hlen;
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for (name, len) in &header.blobs {
            let raw = bytes
                .get(offset..offset + 4 * len)
                .ok_or_else(|| err(format!("blob {name:?} truncated at byte {offset}")))?;
            blobs.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
            offset += 4 * len;
        }
        if offset != bytes.len() {
            return Err(err(format!("{} trailing bytes after last blob", bytes.len() - offset)));
        }
        Ok(Self { header, blobs })
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("expected a {kind} checkpoint, found {}", self.header.kind),
            });
        }
        Ok(())
    }
}

/// Per-epoch policy snapshots recorded during a run, replayable later.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpointLog {
    pub fingerprint: String,
    pub space_signature: Vec<usize>,
    pub policy_arch: ConvNetSpec,
    /// `(epoch, flat params)` with strictly increasing epochs. The snapshot
    /// for epoch `e` holds the parameters at the end of epoch `e`.
    pub snapshots: Vec<(usize, Vec<f32>)>,
}

impl PolicyCheckpointLog {
    pub fn new(fingerprint: &str, space_signature: Vec<usize>, policy_arch: ConvNetSpec) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            space_signature,
            policy_arch,
            snapshots: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, params: Vec<f32>) -> Result<()> {
        if let Some((last, _)) = self.snapshots.last() {
            if epoch <= *last {
                return Err(Error::Training(format!(
                    "policy snapshot for epoch {epoch} follows epoch {last}"
                )));
            }
        }
        self.snapshots.push((epoch, params));
        Ok(())
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.snapshots.iter().map(|(e, _)| *e).collect()
    }

    pub fn snapshot(&self, epoch: usize) -> Result<&[f32]> {
        self.snapshots
            .iter()
            .find(|(e, _)| *e == epoch)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| {
                Error::Config(format!(
                    "policy log has no snapshot for epoch {epoch}; available epochs: {:?}",
                    self.epochs()
                ))
            })
    }

    /// Drops snapshots after `epoch`, used when resuming mid-run.
    pub fn truncate_after(&mut self, epoch: usize) {
        self.snapshots.retain(|(e, _)| *e <= epoch);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("policy_log", &self.fingerprint, self.snapshots.last().map_or(0, |s| s.0));
        ck.header.policy_arch = Some(self.policy_arch.clone());
        ck.header.space_signature = Some(self.space_signature.clone());
        for (e, p) in &self.snapshots {
            ck.push_blob(&format!("epoch_{e}"), p.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        ck.expect_kind("policy_log", path)?;
        let err = |msg: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: msg.into(),
        };
        let mut log = Self::new(
            &ck.header.fingerprint,
            ck.header.space_signature.clone().ok_or_else(|| err("missing space signature"))?,
            ck.header.policy_arch.clone().ok_or_else(|| err("missing policy architecture"))?,
        );
        for ((name, _), blob) in ck.header.blobs.iter().zip(&ck.blobs) {
            let epoch = name
                .strip_prefix("epoch_")
                .and_then(|e| e.parse().ok())
                .ok_or_else(|| err(&format!("unexpected blob {name:?}")))?;
            log.push(epoch, blob.clone()).map_err(|e| err(&e.to_string()))?;
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aroid_nn::Readout;

    fn arch() -> ConvNetSpec {
        ConvNetSpec {
            in_channels: 3,
            height: 8,
            width: 8,
            widths: vec![2],
            readout: Readout::GlobalAvgPool,
            outputs: None,
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut ck = Checkpoint::new("target", "abc", 3);
        ck.header.arch = Some(arch());
        ck.push_blob("params", vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25]);
        ck.push_blob("velocity", vec![]);
        let p = Path::new("x.ck");
        let back = Checkpoint::from_bytes(&ck.to_bytes(), p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.blob("params").unwrap()[0], 1.5);
        assert!(back.blob("nope").is_none());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2], p).is_err());
        assert!(Checkpoint::from_bytes(b"garbage garbage garbage", p).is_err());
        assert!(back.expect_kind("affinity", p).is_err());
    }

    #[test]
    fn policy_log_roundtrip_and_ordering() {
        let mut log = PolicyCheckpointLog::new("f", vec![2, 16, 108, 11], arch());
        log.push(0, vec![0.0; 4]).unwrap();
        log.push(1, vec![1.0; 4]).unwrap();
        assert!(log.push(1, vec![2.0; 4]).is_err());
        let p = Path::new("log.ck");
        let back = PolicyCheckpointLog::from_checkpoint(&log.to_checkpoint(), p).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.snapshot(1).unwrap(), &[1.0; 4]);
        let err = back.snapshot(5).unwrap_err().to_string();
        assert!(err.contains("[0, 1]"), "{err}");
    }
}
