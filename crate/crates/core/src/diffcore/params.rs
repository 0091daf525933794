use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors keyed by layer path (`encoder.0.weight`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics if the name is already taken.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Weight matrix `out × fan_in` drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        out: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..out * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, Matrix::from_vec(out, fan_in, data))
    }

    pub fn add_bias(&mut self, name: impl Into<String>, out: usize) -> ParamId {
        self.add(name, Matrix::zeros(1, out))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// Flat view over every scalar, in registration order.
    pub fn flat_get(&self, mut k: usize) -> f64 {
        for v in &self.values {
            if k < v.len() {
                return v.data()[k];
            }
            k -= v.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn flat_set(&mut self, mut k: usize, value: f64) {
        for v in &mut self.values {
            if k < v.len() {
                v.data_mut()[k] = value;
                return;
            }
            k -= v.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn to_entries(&self) -> BTreeMap<String, ParamEntry> {
        self.iter()
            .map(|(name, m)| {
                (
                    name.to_owned(),
                    ParamEntry {
                        shape: [m.rows(), m.cols()],
                        data: m.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    /// Overwrites every tensor from `entries`. Names and shapes must match
    /// exactly; extra or missing keys are errors.
    pub fn load_entries(&mut self, entries: &BTreeMap<String, ParamEntry>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (name, entry) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
            let target = &mut self.values[id.0];
            let [rows, cols] = entry.shape;
            if (rows, cols) != target.shape() || entry.data.len() != rows * cols {
                return Err(Error::shape(
                    "load_entries",
                    format!("{:?}", target.shape()),
                    format!("{:?}", (rows, cols)),
                ));
            }
            *target = Matrix::from_vec(rows, cols, entry.data.clone());
        }
        Ok(())
    }
}

/// One serialized tensor: row-major values plus shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Checkpoint document: a caller-defined header and the flat parameter map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<H> {
    pub header: H,
    pub params: BTreeMap<String, ParamEntry>,
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    values: Vec<Matrix>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        self.values[id.0].add_assign(g);
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x *= c;
            }
        }
    }

    pub fn flat_get(&self, mut k: usize) -> f64 {
        for v in &self.values {
            if k < v.len() {
                return v.data()[k];
            }
            k -= v.len();
        }
        panic!("flat gradient index out of range");
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.values.iter().enumerate().map(|(i, m)| (ParamId(i), m))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_bounded_by_fan_in_and_biases_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add_weight("l.weight", 8, 16, &mut rng);
        let b = store.add_bias("l.bias", 8);
        assert!(store.get(w).data().iter().all(|v| v.abs() < 0.25));
        assert!(store.get(b).data().iter().all(|&v| v == 0.0));
        assert_eq!(store.total_count(), 8 * 16 + 8);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("a", Matrix::zeros(2, 2));
        let mut entries = store.to_entries();
        entries.get_mut("a").unwrap().shape = [1, 4];
        assert!(store.load_entries(&entries).is_err());
    }

    #[test]
    fn flat_indexing_spans_tensors() {
        let mut store = ParamStore::new();
        store.add("a", Matrix::zeros(1, 2));
        store.add("b", Matrix::zeros(2, 1));
        store.flat_set(3, 7.0);
        assert_eq!(store.get(ParamId(1)).get(1, 0), 7.0);
        assert_eq!(store.flat_get(3), 7.0);
    }
}
