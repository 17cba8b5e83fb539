use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use catx_core::data::{dataset_dir, verify_dataset, write_checksums, DatasetName};

fn default_mirror(name: DatasetName) -> &'static str {
    match name {
        DatasetName::Mnist => "https://ossci-datasets.s3.amazonaws.com/mnist/",
        DatasetName::Fmnist => "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
        DatasetName::Cifar => "https://www.cs.toronto.edu/~kriz/",
    }
}

fn download(url: &str) -> Result<Vec<u8>> {
    log::info!("downloading {url}");
    let mut body = Vec::new();
    ureq::get(url)
        .call()
        .with_context(|| format!("GET {url}"))?
        .into_reader()
        .read_to_end(&mut body)?;
    Ok(body)
}

/// Downloads the raw files into `<root>/<dataset>/`, then verifies them and
/// records their checksums. Files already present are kept.
pub fn fetch(root: &Path, name: DatasetName, mirror: Option<&str>) -> Result<PathBuf> {
    let base = mirror.unwrap_or_else(|| default_mirror(name));
    let base = base.trim_end_matches('/');
    let dir = root.join(name.as_str());
    std::fs::create_dir_all(&dir)?;
    match name {
        DatasetName::Mnist | DatasetName::Fmnist => {
            for stem in [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ] {
                if dir.join(stem).exists() || dir.join(format!("{stem}.gz")).exists() {
                    continue;
                }
                let bytes = download(&format!("{base}/{stem}.gz"))?;
                std::fs::write(dir.join(format!("{stem}.gz")), bytes)?;
            }
        }
        DatasetName::Cifar => {
            if !dataset_dir(root, name).join("test_batch.bin").exists() {
                let bytes = download(&format!("{base}/cifar-10-binary.tar.gz"))?;
                tar::Archive::new(flate2::read::GzDecoder::new(bytes.as_slice()))
                    .unpack(&dir)
                    .context("unpacking CIFAR archive")?;
            }
        }
    }
    let files = verify_dataset(root, name)?;
    write_checksums(&dataset_dir(root, name), &files)?;
    Ok(dataset_dir(root, name))
}
