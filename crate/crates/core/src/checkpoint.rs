//! Named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CATXCKPT"  u32 format_version
//! u32 manifest_len  manifest JSON
//! u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 ndim, u64 dims[ndim],
//!             f32 values[product(dims)] row-major
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CatxError, Result};
use crate::vit::{ModelConfig, Vit};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CATXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl CheckpointManifest {
    pub fn new(config: &ModelConfig, seed: u64, epoch: usize, metrics: BTreeMap<String, f64>) -> Self {
        CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            config: config.clone(),
            config_hash: config.config_hash(),
            seed,
            epoch,
            metrics,
        }
    }
}

pub fn save(path: &Path, model: &Vit<f32>, manifest: &CheckpointManifest) -> Result<()> {
    if manifest.config != *model.config() {
        return Err(CatxError::Checkpoint("manifest config differs from the model's".into()));
    }
    let mut buf = Vec::with_capacity(model.num_parameters() * 4 + 4096);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(manifest)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let entries = model.params().entries();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for p in entries {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    // write-then-rename so a crash never leaves a truncated archive behind
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CatxError::Checkpoint("archive truncated".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads only the manifest record.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let mut f = std::fs::File::open(path).map_err(|source| CatxError::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head)
        .map_err(|_| CatxError::Checkpoint(format!("{} is truncated", path.display())))?;
    let mut cur = Cursor { bytes: &head, at: 0 };
    check_header(&mut cur, path)?;
    let len = cur.u32()? as usize;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json)
        .map_err(|_| CatxError::Checkpoint(format!("{} is truncated", path.display())))?;
    Ok(serde_json::from_slice(&json)?)
}

fn check_header(cur: &mut Cursor<'_>, path: &Path) -> Result<()> {
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(CatxError::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CatxError::Migration {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(())
}

/// Loads a model. With `expected` given, the archive's config hash must
/// match it.
pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<(Vit<f32>, CheckpointManifest)> {
    let bytes = std::fs::read(path).map_err(|source| CatxError::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };
    check_header(&mut cur, path)?;
    let len = cur.u32()? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(cur.take(len)?)?;
    if manifest.config_hash != manifest.config.config_hash() {
        return Err(CatxError::Checkpoint("manifest config hash is stale".into()));
    }
    if let Some(cfg) = expected {
        if cfg.config_hash() != manifest.config_hash {
            return Err(CatxError::Checkpoint(format!(
                "{} was trained with a different model config",
                path.display()
            )));
        }
    }
    let count = cur.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(nlen)?.to_vec())
            .map_err(|_| CatxError::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((name, shape, values));
    }
    if cur.at != bytes.len() {
        return Err(CatxError::Checkpoint("trailing bytes after last tensor".into()));
    }
    let mut model = Vit::new(manifest.config.clone(), 0)?;
    model.load_values(named)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetName;
    use crate::vit::HeadKind;

    fn small() -> ModelConfig {
        ModelConfig::for_dataset(DatasetName::Mnist, HeadKind::Both, 16, 1)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        let model = Vit::<f32>::new(small(), 42).unwrap();
        let mut metrics = BTreeMap::new();
        metrics.insert("val_loss".to_string(), 0.25);
        let manifest = CheckpointManifest::new(&small(), 42, 3, metrics);
        save(&path, &model, &manifest).unwrap();
        let (back, m) = load(&path, Some(&small())).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(back.params(), model.params());
        assert_eq!(read_manifest(&path).unwrap(), manifest);
    }

    #[test]
    fn rejects_mismatched_config() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        let model = Vit::<f32>::new(small(), 1).unwrap();
        save(&path, &model, &CheckpointManifest::new(&small(), 1, 0, BTreeMap::new())).unwrap();
        let mut other = small();
        other.depth = 2;
        assert!(matches!(load(&path, Some(&other)), Err(CatxError::Checkpoint(_))));
    }

    #[test]
    fn rejects_garbage_and_old_versions() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&path, None), Err(CatxError::Checkpoint(_))));
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path, None), Err(CatxError::Migration { found: 0, .. })));
    }
}
