use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

/// Flat, ordered registry of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub(crate) fn register(&mut self, name: String, shape: Vec<usize>, value: Vec<T>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.entries.push(Param { name, shape, value });
        self.entries.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id].value
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads {
            values: self.entries.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    /// SHA-256 over names, shapes and the little-endian f32 image of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for &d in &p.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in &p.value {
                h.update(v.to_f32().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id]
    }

    pub fn zero(&mut self) {
        for g in &mut self.values {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.values {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}
