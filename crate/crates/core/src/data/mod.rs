//! Dataset ingestion: raw IDX / CIFAR-10 binaries filtered down to a binary
//! class pair, normalized, split and patchified.

mod batch;
mod cifar;
mod idx;
mod patch;
mod verify;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CatxError, Result};

pub use batch::{batches, Batches};
pub use cifar::{read_cifar_batch, CIFAR_RECORD_LEN};
pub use idx::{read_idx_images, read_idx_labels, IdxImages, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use patch::{black_patch, patchify, patchify_pixels, unpatchify, PatchSequence};
pub use verify::{expected_files, sha256_file, verify_dataset, write_checksums, VerifiedFile, CHECKSUM_FILE};

/// Environment variable consulted for the dataset root when no flag is given.
pub const DATA_ROOT_ENV: &str = "CATX_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Fmnist,
    Cifar,
}

impl DatasetName {
    pub const ALL: [DatasetName; 3] = [DatasetName::Mnist, DatasetName::Fmnist, DatasetName::Cifar];

    pub fn channels(self) -> usize {
        match self {
            DatasetName::Mnist | DatasetName::Fmnist => 1,
            DatasetName::Cifar => 3,
        }
    }

    pub fn image_side(self) -> usize {
        match self {
            DatasetName::Mnist | DatasetName::Fmnist => 28,
            DatasetName::Cifar => 32,
        }
    }

    pub fn num_source_classes(self) -> u8 {
        10
    }

    /// Digits 3/8, t-shirt/sneaker, bird/truck.
    pub fn default_class_pair(self) -> (u8, u8) {
        match self {
            DatasetName::Mnist => (3, 8),
            DatasetName::Fmnist => (0, 7),
            DatasetName::Cifar => (2, 9),
        }
    }

    pub fn default_normalization(self) -> Vec<(f32, f32)> {
        match self {
            DatasetName::Mnist | DatasetName::Fmnist => vec![(0.5, 0.5)],
            DatasetName::Cifar => vec![(0.4914, 0.2470), (0.4822, 0.2435), (0.4465, 0.2616)],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Fmnist => "fmnist",
            DatasetName::Cifar => "cifar",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = CatxError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "fmnist" | "fashion-mnist" | "fashion_mnist" => Ok(DatasetName::Fmnist),
            "cifar" | "cifar10" | "cifar-10" => Ok(DatasetName::Cifar),
            other => Err(CatxError::config(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub class_pair: (u8, u8),
    pub val_fraction: f64,
    /// Per-channel `(mean, std)` applied after scaling to [0, 1].
    pub normalization: Vec<(f32, f32)>,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(name: DatasetName) -> Self {
        DatasetSpec {
            name,
            class_pair: name.default_class_pair(),
            val_fraction: 0.2,
            normalization: name.default_normalization(),
            seed: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.class_pair;
        let n = self.name.num_source_classes();
        if a == b {
            return Err(CatxError::config(format!("class pair ({a},{b}) must be distinct")));
        }
        if a >= n || b >= n {
            return Err(CatxError::config(format!(
                "class pair ({a},{b}) outside 0..{n} for {}",
                self.name
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CatxError::config(format!(
                "val_fraction {} must lie in (0, 1)",
                self.val_fraction
            )));
        }
        if self.normalization.len() != self.name.channels() {
            return Err(CatxError::config(format!(
                "{} needs {} normalization pairs, got {}",
                self.name,
                self.name.channels(),
                self.normalization.len()
            )));
        }
        if self.normalization.iter().any(|&(_, s)| s.is_nan() || s <= 0.0) {
            return Err(CatxError::config("normalization std must be positive"));
        }
        Ok(())
    }

    /// Remaps a source label onto {0, 1}, or `None` when it is outside the pair.
    pub fn remap(&self, source_label: u8) -> Option<usize> {
        if source_label == self.class_pair.0 {
            Some(0)
        } else if source_label == self.class_pair.1 {
            Some(1)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInstance {
    /// Channel-planar pixels, normalized.
    pub pixels: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub label: usize,
    pub source_label: u8,
    pub split: Split,
    /// Position in the originating raw file; stable across filtering and shuffling.
    pub index: usize,
}

/// Resolves the dataset root: explicit flag, then `CATX_DATA_ROOT`, then `./data`.
pub fn resolve_data_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Directory holding the raw files of one dataset under `root`.
pub fn dataset_dir(root: &Path, name: DatasetName) -> PathBuf {
    let dir = root.join(name.as_str());
    if name == DatasetName::Cifar {
        let nested = dir.join("cifar-10-batches-bin");
        if nested.is_dir() {
            return nested;
        }
    }
    dir
}

/// A raw (unnormalized) labeled image straight out of the source files.
struct RawImage {
    pixels: Vec<u8>,
    source_label: u8,
    index: usize,
}

/// Loads, filters, normalizes and splits one dataset.
///
/// Filtering happens before the validation split so the validation pool has
/// the same class balance as the filtered training pool.
pub fn load_dataset(spec: &DatasetSpec, root: &Path) -> Result<Vec<ImageInstance>> {
    spec.validate()?;
    let dir = dataset_dir(root, spec.name);
    let (train_raw, test_raw) = match spec.name {
        DatasetName::Mnist | DatasetName::Fmnist => (read_idx_pair(&dir, "train")?, read_idx_pair(&dir, "t10k")?),
        DatasetName::Cifar => {
            let mut train = Vec::new();
            for i in 1..=5 {
                let path = dir.join(format!("data_batch_{i}.bin"));
                let offset = train.len();
                train.extend(cifar_raw(&path, offset)?);
            }
            (train, cifar_raw(&dir.join("test_batch.bin"), 0)?)
        }
    };

    let side = spec.name.image_side();
    let channels = spec.name.channels();
    let make = |raw: RawImage, label: usize, split: Split| ImageInstance {
        pixels: normalize(&raw.pixels, &spec.normalization, side * side),
        channels,
        height: side,
        width: side,
        label,
        source_label: raw.source_label,
        split,
        index: raw.index,
    };

    let train: Vec<(RawImage, usize)> = train_raw
        .into_iter()
        .filter_map(|r| spec.remap(r.source_label).map(|l| (r, l)))
        .collect();
    let val_flags = split_flags(train.len(), spec.val_fraction, spec.seed);

    let mut out = Vec::with_capacity(train.len());
    for ((raw, label), is_val) in train.into_iter().zip(val_flags) {
        let split = if is_val { Split::Val } else { Split::Train };
        out.push(make(raw, label, split));
    }
    for raw in test_raw {
        if let Some(label) = spec.remap(raw.source_label) {
            out.push(make(raw, label, Split::Test));
        }
    }
    Ok(out)
}

/// Marks `round(n * fraction)` of `n` positions as validation via a seeded shuffle.
pub fn split_flags(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let n_val = (n as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut flags = vec![false; n];
    for &i in &order[..n_val] {
        flags[i] = true;
    }
    flags
}

pub fn of_split(instances: &[ImageInstance], split: Split) -> Vec<ImageInstance> {
    instances.iter().filter(|x| x.split == split).cloned().collect()
}

fn normalize(pixels: &[u8], norm: &[(f32, f32)], plane: usize) -> Vec<f32> {
    pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (mean, std) = norm[i / plane];
            (p as f32 / 255.0 - mean) / std
        })
        .collect()
}

fn read_idx_pair(dir: &Path, prefix: &str) -> Result<Vec<RawImage>> {
    let images = read_idx_images(&find_file(dir, &format!("{prefix}-images-idx3-ubyte")))?;
    let labels_path = find_file(dir, &format!("{prefix}-labels-idx1-ubyte"));
    let labels = read_idx_labels(&labels_path)?;
    if labels.len() != images.count {
        return Err(CatxError::format(
            labels_path,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    let plane = images.rows * images.cols;
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, source_label)| RawImage {
            pixels: images.pixels[i * plane..(i + 1) * plane].to_vec(),
            source_label,
            index: i,
        })
        .collect())
}

/// Prefers the plain file, falls back to a `.gz` sibling.
fn find_file(dir: &Path, stem: &str) -> PathBuf {
    let plain = dir.join(stem);
    if plain.exists() {
        return plain;
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        plain
    }
}

fn cifar_raw(path: &Path, index_offset: usize) -> Result<Vec<RawImage>> {
    Ok(read_cifar_batch(path)?
        .into_iter()
        .enumerate()
        .map(|(i, (source_label, pixels))| RawImage {
            pixels,
            source_label,
            index: index_offset + i,
        })
        .collect())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|source| CatxError::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "gz") {
        use std::io::Read;
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|source| CatxError::Ingestion {
                path: path.to_path_buf(),
                source,
            })?;
        return Ok(out);
    }
    Ok(bytes)
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::path::Path;

    /// Writes a tiny IDX image/label pair with the given labels; image `i`
    /// has every pixel equal to `i % 256`.
    pub fn write_idx(dir: &Path, prefix: &str, labels: &[u8], side: usize) {
        std::fs::create_dir_all(dir).unwrap();
        let mut img = Vec::new();
        img.extend_from_slice(&2051u32.to_be_bytes());
        img.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        img.extend_from_slice(&(side as u32).to_be_bytes());
        img.extend_from_slice(&(side as u32).to_be_bytes());
        for i in 0..labels.len() {
            img.extend(std::iter::repeat_n((i % 256) as u8, side * side));
        }
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&2049u32.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::write_idx;
    use super::*;
    use proptest::prelude::*;

    fn fake_mnist(root: &Path, train: &[u8], test: &[u8]) {
        let dir = root.join("mnist");
        write_idx(&dir, "train", train, 28);
        write_idx(&dir, "t10k", test, 28);
    }

    #[test]
    fn filters_to_class_pair_and_remaps() {
        let tmp = tempfile::tempdir().unwrap();
        let train: Vec<u8> = (0..50).map(|i| (i % 10) as u8).collect();
        fake_mnist(tmp.path(), &train, &[3, 8, 1, 8]);
        let spec = DatasetSpec::new(DatasetName::Mnist);
        let all = load_dataset(&spec, tmp.path()).unwrap();
        assert_eq!(all.len(), 10 + 3);
        for x in &all {
            assert!(x.source_label == 3 || x.source_label == 8);
            assert_eq!(x.label, usize::from(x.source_label == 8));
            assert_eq!((x.channels, x.height, x.width), (1, 28, 28));
        }
        assert_eq!(of_split(&all, Split::Val).len(), 2);
        assert_eq!(of_split(&all, Split::Test).len(), 3);
    }

    #[test]
    fn normalization_maps_to_expected_range() {
        let tmp = tempfile::tempdir().unwrap();
        fake_mnist(tmp.path(), &[3], &[8]);
        let mut spec = DatasetSpec::new(DatasetName::Mnist);
        spec.val_fraction = 0.5;
        let all = load_dataset(&spec, tmp.path()).unwrap();
        // pixel value 0 -> (0 - 0.5) / 0.5
        assert!(all.iter().all(|x| x.pixels.iter().all(|&p| (p + 1.0).abs() < 1e-6)));
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let flags = split_flags(100, 0.2, 7);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 20);
        assert_eq!(flags.iter().filter(|&&f| !f).count(), 80);
        assert_eq!(flags, split_flags(100, 0.2, 7));
        assert_ne!(flags, split_flags(100, 0.2, 8));
    }

    #[test]
    fn missing_file_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        let err = load_dataset(&DatasetSpec::new(DatasetName::Mnist), tmp.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train-images-idx3-ubyte"), "{msg}");
    }

    #[test]
    fn spec_validation() {
        let mut s = DatasetSpec::new(DatasetName::Mnist);
        s.class_pair = (3, 3);
        assert!(s.validate().is_err());
        s.class_pair = (3, 10);
        assert!(s.validate().is_err());
        let mut s = DatasetSpec::new(DatasetName::Cifar);
        s.val_fraction = 1.0;
        assert!(s.validate().is_err());
        assert!(DatasetSpec::new(DatasetName::Fmnist).validate().is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn label_purity(labels in proptest::collection::vec(0u8..10, 1..60), a in 0u8..10, b in 0u8..10) {
            prop_assume!(a != b);
            let tmp = tempfile::tempdir().unwrap();
            fake_mnist(tmp.path(), &labels, &labels);
            let mut spec = DatasetSpec::new(DatasetName::Mnist);
            spec.class_pair = (a, b);
            let all = load_dataset(&spec, tmp.path()).unwrap();
            let expected = labels.iter().filter(|&&l| l == a || l == b).count() * 2;
            prop_assert_eq!(all.len(), expected);
            for x in &all {
                prop_assert!(x.source_label == a || x.source_label == b);
                prop_assert_eq!(x.label, usize::from(x.source_label == b));
            }
        }

        #[test]
        fn split_membership_is_deterministic(n in 1usize..300, seed in any::<u64>()) {
            prop_assert_eq!(split_flags(n, 0.2, seed), split_flags(n, 0.2, seed));
        }
    }
}
