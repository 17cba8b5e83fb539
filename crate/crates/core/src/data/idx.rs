use std::path::Path;

use crate::error::{CatxError, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CatxError::format(path, "truncated header"))
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = super::read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(CatxError::format(
            path,
            format!("image magic {magic} (expected {IDX_IMAGE_MAGIC})"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(CatxError::format(
            path,
            format!("{} pixel bytes for {count} images of {rows}x{cols}", body.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = super::read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(CatxError::format(
            path,
            format!("label magic {magic} (expected {IDX_LABEL_MAGIC})"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(CatxError::format(
            path,
            format!("{} label bytes, header says {count}", body.len()),
        ));
    }
    Ok(body.to_vec())
}
