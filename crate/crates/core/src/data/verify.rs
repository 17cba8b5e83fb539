//! Structural checks and checksums for raw dataset files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{dataset_dir, find_file, read_cifar_batch, read_idx_images, read_idx_labels, DatasetName};
use crate::error::{CatxError, Result};

/// Name of the checksum list kept next to the raw files, in `sha256sum` format.
pub const CHECKSUM_FILE: &str = "SHA256SUMS";

#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedFile {
    pub path: PathBuf,
    pub sha256: String,
    pub records: usize,
    /// `Some(true)` when a recorded checksum matched, `None` when none was recorded.
    pub checksum_ok: Option<bool>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| CatxError::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn read_checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(CHECKSUM_FILE);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(source) => return Err(CatxError::Ingestion { path, source }),
    };
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (hash, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| CatxError::format(&path, format!("malformed line '{line}'")))?;
        out.insert(name.trim().trim_start_matches('*').to_string(), hash.to_string());
    }
    Ok(out)
}

/// Raw files a dataset needs, with the record count each must hold.
pub fn expected_files(name: DatasetName) -> Vec<(String, usize)> {
    match name {
        DatasetName::Mnist | DatasetName::Fmnist => vec![
            ("train-images-idx3-ubyte".into(), 60_000),
            ("train-labels-idx1-ubyte".into(), 60_000),
            ("t10k-images-idx3-ubyte".into(), 10_000),
            ("t10k-labels-idx1-ubyte".into(), 10_000),
        ],
        DatasetName::Cifar => (1..=5)
            .map(|i| (format!("data_batch_{i}.bin"), 10_000))
            .chain(std::iter::once(("test_batch.bin".to_string(), 10_000)))
            .collect(),
    }
}

/// Parses every raw file of a dataset, checks the combined record counts and
/// compares against `SHA256SUMS` when present.
///
/// IDX counts are checked per split pair (train + test) rather than per
/// file, so re-partitioned copies with the standard 70,000 total pass.
pub fn verify_dataset(root: &Path, name: DatasetName) -> Result<Vec<VerifiedFile>> {
    let dir = dataset_dir(root, name);
    let sums = read_checksums(&dir)?;
    let mut out = Vec::new();
    let mut total = 0;
    for (stem, _) in expected_files(name) {
        let path = if name == DatasetName::Cifar {
            dir.join(&stem)
        } else {
            find_file(&dir, &stem)
        };
        let records = if stem.contains("images") {
            let imgs = read_idx_images(&path)?;
            if (imgs.rows, imgs.cols) != (28, 28) {
                return Err(CatxError::format(
                    &path,
                    format!("{}x{} images, expected 28x28", imgs.rows, imgs.cols),
                ));
            }
            imgs.count
        } else if stem.contains("labels") {
            let labels = read_idx_labels(&path)?;
            if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
                return Err(CatxError::format(&path, format!("label {bad} outside 0..10")));
            }
            labels.len()
        } else {
            read_cifar_batch(&path)?.len()
        };
        total += records;
        let sha256 = sha256_file(&path)?;
        let file_name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let checksum_ok = sums.get(&file_name).map(|h| h.eq_ignore_ascii_case(&sha256));
        out.push(VerifiedFile {
            path,
            sha256,
            records,
            checksum_ok,
        });
    }
    let expected: usize = expected_files(name).iter().map(|(_, n)| n).sum();
    if total != expected {
        return Err(CatxError::format(
            &dir,
            format!("{total} records in total, expected {expected}"),
        ));
    }
    if name != DatasetName::Cifar {
        for pair in out.chunks(2) {
            if pair[0].records != pair[1].records {
                return Err(CatxError::format(
                    &pair[1].path,
                    format!("{} labels for {} images", pair[1].records, pair[0].records),
                ));
            }
        }
    }
    Ok(out)
}

/// Writes `SHA256SUMS` for the given files.
pub fn write_checksums(dir: &Path, files: &[VerifiedFile]) -> Result<()> {
    let mut text = String::new();
    for f in files {
        let name = f
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        text.push_str(&format!("{}  {name}\n", f.sha256));
    }
    std::fs::write(dir.join(CHECKSUM_FILE), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::write_idx;

    fn fake(root: &Path) {
        let dir = root.join("mnist");
        let train: Vec<u8> = (0..60_000).map(|i| (i % 10) as u8).collect();
        write_idx(&dir, "train", &train, 28);
        write_idx(&dir, "t10k", &train[..10_000], 28);
    }

    #[test]
    fn counts_and_checksums() {
        let tmp = tempfile::tempdir().unwrap();
        fake(tmp.path());
        let files = verify_dataset(tmp.path(), DatasetName::Mnist).unwrap();
        assert_eq!(files.len(), 4);
        assert!(files.iter().all(|f| f.checksum_ok.is_none()));
        let dir = tmp.path().join("mnist");
        write_checksums(&dir, &files).unwrap();
        let again = verify_dataset(tmp.path(), DatasetName::Mnist).unwrap();
        assert!(again.iter().all(|f| f.checksum_ok == Some(true)));

        let labels = dir.join("t10k-labels-idx1-ubyte");
        let mut bytes = std::fs::read(&labels).unwrap();
        bytes[8] = 9;
        std::fs::write(&labels, bytes).unwrap();
        let tampered = verify_dataset(tmp.path(), DatasetName::Mnist).unwrap();
        assert_eq!(tampered[3].checksum_ok, Some(false));
    }

    #[test]
    fn short_files_fail() {
        let tmp = tempfile::tempdir().unwrap();
        write_idx(&tmp.path().join("mnist"), "train", &[1, 2, 3], 28);
        write_idx(&tmp.path().join("mnist"), "t10k", &[1], 28);
        assert!(verify_dataset(tmp.path(), DatasetName::Mnist).is_err());
    }
}
