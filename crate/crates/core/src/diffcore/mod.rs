//! Dense 2-D tensors, a reverse-mode differentiation tape, and an Adam
//! optimizer. Everything trains in f64; gradients come from a single
//! backward sweep over the tape, so two calls on the same graph produce
//! bitwise-identical results.

mod adam;
pub mod finite_difference;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use finite_difference::{finite_difference_gradient, max_relative_gradient_error};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor2;

use std::collections::BTreeMap;

use rand::Rng;

/// Errors raised by graph construction, backward sweeps, and updates.
#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
}

pub type DiffResult<T> = Result<T, DiffError>;

/// Elementwise activation applied after an affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Tanh,
}

/// Named model parameters. Backed by an ordered map so that iteration,
/// and therefore every update sweep, is deterministic. Shapes are fixed
/// once a parameter is inserted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor2>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a fresh parameter; rejects duplicate names so two model
    /// components can never silently share storage by accident.
    pub fn insert(&mut self, name: &str, value: Tensor2) -> DiffResult<()> {
        if self.entries.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> DiffResult<&Tensor2> {
        self.entries
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> DiffResult<&mut Tensor2> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
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

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Copies every entry whose name starts with `prefix` into a new set.
    pub fn subset_by_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamSet) -> DiffResult<()> {
        for (name, value) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(DiffError::DuplicateParam(name));
            }
            self.entries.insert(name, value);
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name. Parameters that do not appear in a
/// loss graph get an explicit zero tensor of the right shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradSet {
    entries: BTreeMap<String, Tensor2>,
}

impl GradSet {
    pub fn get(&self, name: &str) -> DiffResult<&Tensor2> {
        self.entries
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub(crate) fn insert(&mut self, name: String, value: Tensor2) {
        self.entries.insert(name, value);
    }
}

/// Uniform Glorot initialization: limit sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("xavier dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paramset_rejects_duplicates() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor2::zeros(2, 2)).unwrap();
        assert!(matches!(
            p.insert("w", Tensor2::zeros(2, 2)),
            Err(DiffError::DuplicateParam(_))
        ));
    }

    #[test]
    fn paramset_iterates_in_name_order() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor2::zeros(1, 1)).unwrap();
        p.insert("a", Tensor2::zeros(1, 1)).unwrap();
        p.insert("c", Tensor2::zeros(1, 1)).unwrap();
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }

    #[test]
    fn xavier_respects_limit_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = xavier_uniform(20, 30, &mut rng);
        let limit = (6.0 / 50.0_f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < limit));
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let w2 = xavier_uniform(20, 30, &mut rng2);
        assert_eq!(w.data(), w2.data());
    }
}
