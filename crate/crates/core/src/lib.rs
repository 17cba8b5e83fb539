//! Vision transformers that explain themselves by selecting the image
//! patches their decision depends on, the post-hoc selector baseline, and
//! the post-hoc accuracy / average causal effect evaluation.

pub mod checkpoint;
pub mod data;
pub mod distribution;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod sampler;
pub mod scalar;
pub mod train;
pub mod vit;

pub use distribution::{ClassDistribution, SelectionDistribution};
pub use error::{CatxError, Result};
