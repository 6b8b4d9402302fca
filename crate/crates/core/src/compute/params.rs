use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Matrix;
use crate::error::{Error, Result};

/// Seeded generator used for all randomness in the crate.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a string tag (FNV-1a).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

/// Named parameter tensors. Names are unique and shapes never change once added.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.value(id))
    }

    /// Overwrite a parameter's values; the shape must match.
    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        self.set(id, value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        self.params[id.0].trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Add `N(0, std²)` noise to every trainable value.
    pub fn jitter(&mut self, seed: u64, std: f64) {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).expect("finite std");
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let mut rng = rng_from_seed(derive_seed(seed, &p.name));
            for v in p.value.as_mut_slice() {
                *v += normal.sample(&mut rng);
            }
        }
    }

    /// Copy every value from `other`, which must hold the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Shape(format!("parameter `{}` shape changed", p.name)));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, StoredParam> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    StoredParam {
                        shape: [p.value.rows(), p.value.cols()],
                        values: p.value.as_slice().to_vec(),
                        trainable: p.trainable,
                    },
                )
            })
            .collect()
    }

    /// Load values from a snapshot into an already-constructed store.
    pub fn restore(&mut self, snapshot: &BTreeMap<String, StoredParam>) -> Result<()> {
        for p in &mut self.params {
            let s = snapshot
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if s.shape != [p.value.rows(), p.value.cols()] || s.values.len() != p.value.len() {
                return Err(Error::Shape(format!(
                    "checkpoint parameter `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    s.shape,
                    p.value.shape()
                )));
            }
            p.value = Matrix::from_vec(s.shape[0], s.shape[1], s.values.clone());
            p.trainable = s.trainable;
        }
        Ok(())
    }

    /// SHA-256 over names and little-endian value bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut sorted: Vec<&Param> = self.params.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        for p in sorted {
            h.update(p.name.as_bytes());
            for v in p.value.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// One entry of a parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
    pub trainable: bool,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, g: Matrix) {
        match self.grads.get_mut(&name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(name, g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Matrix::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let k = max_norm / norm;
            for g in self.grads.values_mut() {
                g.scale_assign(k);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Matrix::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Matrix::zeros(1, 1), true).unwrap();
        assert!(matches!(s.add("w", Matrix::zeros(1, 1), true), Err(Error::Config(_))));
    }

    #[test]
    fn shape_is_immutable() {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::zeros(2, 3), true).unwrap();
        assert!(matches!(s.set(id, Matrix::zeros(3, 2)), Err(Error::Shape(_))));
        s.set(id, Matrix::filled(2, 3, 1.0)).unwrap();
        assert_eq!(s.value(id).sum(), 6.0);
    }

    #[test]
    fn snapshot_restore() {
        let mut s = ParamStore::new();
        s.add("a", Matrix::from_rows(&[vec![1.5, -2.0]]), true).unwrap();
        s.add("b", Matrix::filled(2, 2, 0.25), false).unwrap();
        let snap = s.snapshot();
        let mut t = s.clone();
        t.set_by_name("a", Matrix::zeros(1, 2)).unwrap();
        assert_ne!(s.checksum(), t.checksum());
        t.restore(&snap).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Gradients::new();
        g.insert("a".into(), Matrix::from_rows(&[vec![30.0, 40.0]]));
        let before = g.clip_global_norm(10.0);
        assert_eq!(before, 50.0);
        assert!((g.global_norm() - 10.0).abs() < 1e-12);
    }
}
