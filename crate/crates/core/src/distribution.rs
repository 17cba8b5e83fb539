use serde::{Deserialize, Serialize};

use crate::error::{CatxError, Result};
use crate::scalar::{softmax, Scalar};

/// Softmax over the classes, with the logits that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution<T = f64> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

/// Softmax over the patches, with the logits that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDistribution<T = f64> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

fn from_logits<T: Scalar>(logits: Vec<T>) -> Result<(Vec<T>, Vec<T>)> {
    if logits.is_empty() {
        return Err(CatxError::shape("empty logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CatxError::Numeric("non-finite logits".into()));
    }
    let probs = softmax(&logits);
    Ok((logits, probs))
}

impl<T: Scalar> ClassDistribution<T> {
    pub fn from_logits(logits: Vec<T>) -> Result<Self> {
        let (logits, probs) = from_logits(logits)?;
        Ok(ClassDistribution { logits, probs })
    }

    /// A distribution given directly by probabilities; logits are their logs.
    pub fn from_probs(probs: Vec<T>) -> Self {
        ClassDistribution {
            logits: probs.iter().map(|p| p.ln()).collect(),
            probs,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

impl<T: Scalar> SelectionDistribution<T> {
    pub fn from_logits(logits: Vec<T>) -> Result<Self> {
        let (logits, probs) = from_logits(logits)?;
        Ok(SelectionDistribution { logits, probs })
    }

    pub fn num_patches(&self) -> usize {
        self.probs.len()
    }
}
