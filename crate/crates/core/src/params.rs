//! Named parameter storage.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weight,
    Bias,
}

/// Declared shape of one architecture parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: Role,
    /// Initialization variance gain: 2 for kernels feeding a ReLU, 1 otherwise.
    pub gain: f64,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, dims: [usize; 4]) -> Self {
        ParamSpec {
            name: name.into(),
            dims: dims.to_vec(),
            role: Role::Weight,
            gain: 2.0,
        }
    }

    /// Kernel whose output is not rectified (residual tails, gates, projections).
    pub fn linear(mut self) -> Self {
        self.gain = 1.0;
        self
    }

    pub fn bias(name: impl Into<String>, len: usize) -> Self {
        ParamSpec {
            name: name.into(),
            dims: vec![len],
            role: Role::Bias,
            gain: 0.0,
        }
    }

    /// Inputs feeding one output unit: `in_per_group * kh * kw` for kernels.
    pub fn fan_in(&self) -> usize {
        self.dims[1..].iter().product::<usize>().max(1)
    }
}

#[derive(Clone)]
pub struct Param<T> {
    pub tensor: Arc<Tensor<T>>,
    pub role: Role,
}

/// Ordered map from hierarchical parameter name to tensor.
///
/// Tensors are reference counted, so cloning a store is cheap and mutation
/// through [`ParamStore::tensor_mut`] copies on write.
#[derive(Clone)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|(k, p)| (k, p.tensor.dims())))
            .finish()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Scalar> PartialEq for ParamStore<T> {
    /// Bit-exact equality of names, order, roles, shapes and values.
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb
                    && a.role == b.role
                    && a.tensor.dims() == b.tensor.dims()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, role: Role) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Integrity {
                missing: Vec::new(),
                unexpected: vec![name],
                mismatched: Vec::new(),
            });
        }
        self.entries.insert(
            name,
            Param {
                tensor: Arc::new(tensor),
                role,
            },
        );
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor<T>, role: Role) {
        self.entries.insert(
            name.into(),
            Param {
                tensor: Arc::new(tensor),
                role,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::integrity_missing(vec![name.to_string()]))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn shared(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        Ok(Arc::clone(&self.get(name)?.tensor))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::integrity_missing(vec![name.to_string()]))?;
        Ok(Arc::make_mut(&mut p.tensor))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: Arc::new(p.tensor.cast()),
                            role: p.role,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    /// Copy every entry of `other` into `self`, overwriting same-named ones.
    pub fn extend_from(&mut self, other: &ParamStore<T>) {
        for (k, p) in &other.entries {
            self.entries.insert(k.clone(), p.clone());
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.entries.shift_remove(name)
    }

    /// Verify that this store holds exactly the declared parameters.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for s in specs {
            match self.entries.get(&s.name) {
                None => missing.push(s.name.clone()),
                Some(p) if p.tensor.dims() != s.dims.as_slice() => mismatched.push(format!(
                    "{} (expected {:?}, found {:?})",
                    s.name,
                    s.dims,
                    p.tensor.dims()
                )),
                Some(_) => {}
            }
        }
        let unexpected: Vec<String> = self
            .entries
            .keys()
            .filter(|k| !specs.iter().any(|s| &s.name == *k))
            .cloned()
            .collect();
        if missing.is_empty() && unexpected.is_empty() && mismatched.is_empty() {
            Ok(())
        } else {
            Err(Error::Integrity {
                missing,
                unexpected,
                mismatched,
            })
        }
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.tensor.dims() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Kaiming-normal weights (`std = sqrt(gain / fan_in)`) and zero biases.
pub fn kaiming_init<T: Scalar, R: Rng>(specs: &[ParamSpec], rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for s in specs {
        let tensor = match s.role {
            Role::Bias => Tensor::zeros(&s.dims),
            Role::Weight => {
                let std = (s.gain / s.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(&s.dims, |_| T::from_f64(normal.sample(rng)))
            }
        };
        store
            .insert(s.name.clone(), tensor, s.role)
            .expect("parameter specs carry unique names");
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight("a.weight", [4, 2, 3, 3]),
            ParamSpec::bias("a.bias", 4),
        ]
    }

    #[test]
    fn duplicate_insert_is_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("x", Tensor::zeros(&[1]), Role::Bias).unwrap();
        assert!(s.insert("x", Tensor::zeros(&[1]), Role::Bias).is_err());
    }

    #[test]
    fn check_against_lists_offenders() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s: ParamStore<f32> = kaiming_init(&specs(), &mut rng);
        assert!(s.check_against(&specs()).is_ok());
        s.remove("a.bias");
        s.set("stray", Tensor::zeros(&[2]), Role::Bias);
        let msg = s.check_against(&specs()).unwrap_err().to_string();
        assert!(msg.contains("a.bias") && msg.contains("stray"), "{msg}");
    }

    #[test]
    fn copy_on_write_leaves_snapshot_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s: ParamStore<f32> = kaiming_init(&specs(), &mut rng);
        let snapshot = s.clone();
        s.tensor_mut("a.bias").unwrap().data_mut()[0] = 1.0;
        assert_eq!(snapshot.tensor("a.bias").unwrap().data()[0], 0.0);
        assert_ne!(s, snapshot);
    }

    #[test]
    fn kaiming_scale_matches_fan_in() {
        let spec = vec![ParamSpec::weight("w", [256, 64, 3, 3])];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: ParamStore<f64> = kaiming_init(&spec, &mut rng);
        let d = s.tensor("w").unwrap().data();
        let var = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        let expected = 2.0 / (64.0 * 9.0);
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }
}
