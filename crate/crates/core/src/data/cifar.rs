use std::path::Path;

use crate::error::{CatxError, Result};

/// One label byte followed by 32x32 pixels for each of R, G, B.
pub const CIFAR_RECORD_LEN: usize = 3073;

/// Reads a CIFAR-10 binary batch into `(label, channel-planar pixels)` pairs.
pub fn read_cifar_batch(path: &Path) -> Result<Vec<(u8, Vec<u8>)>> {
    let bytes = super::read_file(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(CatxError::format(
            path,
            format!(
                "{} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records",
                bytes.len()
            ),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_LEN)
        .map(|rec| {
            if rec[0] > 9 {
                return Err(CatxError::format(path, format!("label byte {}", rec[0])));
            }
            Ok((rec[0], rec[1..].to_vec()))
        })
        .collect()
}
