use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetName;
use crate::error::{CatxError, Result};

/// Which output heads a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Class distribution from the cls token (black-box).
    Classifier,
    /// Patch distribution from the cls token (post-hoc selector).
    Selector,
    /// Class distribution from cls plus patch distribution from sel.
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub image_size: usize,
    pub num_patches: usize,
    pub num_classes: usize,
    pub head_kind: HeadKind,
    pub has_sel_token: bool,
}

impl ModelConfig {
    /// 4x4 patches over the dataset's images, 8 heads, `mlp_dim = 2 * dim`.
    pub fn for_dataset(name: DatasetName, head_kind: HeadKind, dim: usize, depth: usize) -> Self {
        let patch_size = 4;
        let side = name.image_side();
        ModelConfig {
            dim,
            depth,
            heads: 8,
            mlp_dim: 2 * dim,
            patch_size,
            channels: name.channels(),
            image_size: side,
            num_patches: (side / patch_size) * (side / patch_size),
            num_classes: 2,
            head_kind,
            has_sel_token: head_kind == HeadKind::Both,
        }
    }

    /// Width 512 with depth 6 / 4 / 8 for MNIST / FMNIST / CIFAR.
    pub fn reference(name: DatasetName, head_kind: HeadKind) -> Self {
        let depth = match name {
            DatasetName::Mnist => 6,
            DatasetName::Fmnist => 4,
            DatasetName::Cifar => 8,
        };
        Self::for_dataset(name, head_kind, 512, depth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(CatxError::config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_dim == 0 {
            return Err(CatxError::config("depth and mlp_dim must be positive"));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(CatxError::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        let side = self.image_size / self.patch_size;
        if self.num_patches != side * side {
            return Err(CatxError::config(format!(
                "num_patches {} does not match a {side}x{side} grid",
                self.num_patches
            )));
        }
        if self.num_classes < 2 {
            return Err(CatxError::config("need at least two classes"));
        }
        if self.has_sel_token != (self.head_kind == HeadKind::Both) {
            return Err(CatxError::config(
                "the sel token is present exactly when both heads are",
            ));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// cls, plus sel when present.
    pub fn special_tokens(&self) -> usize {
        1 + usize::from(self.has_sel_token)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches + self.special_tokens()
    }

    pub fn has_classifier(&self) -> bool {
        matches!(self.head_kind, HeadKind::Classifier | HeadKind::Both)
    }

    pub fn has_selector(&self) -> bool {
        matches!(self.head_kind, HeadKind::Selector | HeadKind::Both)
    }

    /// Token whose output embedding feeds the selection head.
    pub fn selector_token(&self) -> usize {
        usize::from(self.has_sel_token)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
