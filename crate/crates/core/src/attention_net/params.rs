use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Named, ordered collection of parameter tensors.
///
/// Names are hierarchical (`generator/sab2/sam/round1/dir_left/recurrent`) and
/// iteration is in lexicographic name order. Gradient trees use the same
/// type and mirror the names exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients, keyed like the [`ParamTree`] they belong to.
pub type GradTree = ParamTree;

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> ParamTree {
        ParamTree {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Entries whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamTree {
        ParamTree {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
        }
    }

    /// Verify that `other` has exactly the same names and shapes.
    ///
    /// The error names the first offending tensor in name order.
    pub fn check_mirrors(&self, other: &ParamTree) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => {
                    return Err(Error::shape(
                        "param tree",
                        format!("missing tensor `{name}`"),
                    ))
                }
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::shape(
                        "param tree",
                        format!(
                            "tensor `{name}` has shape {:?}, expected {:?}",
                            o.shape(),
                            t.shape()
                        ),
                    ))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(Error::shape(
                "param tree",
                format!("unexpected tensor `{extra}`"),
            ));
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.values_mut().for_each(Tensor::round_to_f32);
    }

    /// Hash over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in &self.tensors {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// First tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }
}

impl FromIterator<(String, Tensor)> for ParamTree {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamTree {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Seeded parameter initializer.
///
/// Kernels are uniform in `±1/sqrt(fan_in)`, biases and norm shifts zero,
/// norm gains one and recurrent weights the identity. Drawn values are
/// rounded to `f32` so that checkpoints store them exactly.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    pub(crate) tree: ParamTree,
}

impl Initializer {
    pub(crate) fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            tree: ParamTree::new(),
        }
    }

    pub(crate) fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| {
            rng.random_range(-bound..bound) as f32 as f64
        });
        self.tree.insert(format!("{name}/weight"), w);
        self.tree
            .insert(format!("{name}/bias"), Tensor::zeros(&[c_out]));
    }

    pub(crate) fn norm(&mut self, name: &str, c: usize) {
        self.tree.insert(format!("{name}/gain"), Tensor::ones(&[c]));
        self.tree.insert(format!("{name}/shift"), Tensor::zeros(&[c]));
    }

    pub(crate) fn recurrent(&mut self, name: &str, c: usize) {
        self.tree.insert(format!("{name}/recurrent"), Tensor::eye(c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_check_names_offender() {
        let mut a = ParamTree::new();
        a.insert("a", Tensor::zeros(&[2]));
        a.insert("b", Tensor::zeros(&[3]));
        let mut b = a.clone();
        b.insert("b", Tensor::zeros(&[4]));
        let err = a.check_mirrors(&b).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
        assert!(a.check_mirrors(&a.zeros_like()).is_ok());
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut a = ParamTree::new();
        a.insert("w", Tensor::zeros(&[2]));
        let f0 = a.fingerprint();
        a.get_mut("w").unwrap().data_mut()[1] = 1e-30;
        assert_ne!(f0, a.fingerprint());
    }
}
