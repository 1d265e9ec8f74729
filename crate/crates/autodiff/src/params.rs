//! Ordered collections of named parameter tensors.

use sha2::{Digest, Sha256};

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Named tensors in insertion order. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(AutodiffError::InvalidTensor(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every tensor on `g`, as named parameters or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(n, t)| {
                if trainable {
                    g.param(n.clone(), t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// SHA-256 over names, shapes and values, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in &self.entries {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// SHA-256 of a sequence of tensors, hex encoded.
pub fn digest_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_changes_with_any_value() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::ones(&[2, 2])).unwrap();
        let before = a.digest();
        a.get_mut("w").unwrap().data_mut()[3] = 1.0 + f64::EPSILON;
        assert_ne!(before, a.digest());
        assert!(a.insert("w", Tensor::ones(&[1])).is_err());
    }
}
