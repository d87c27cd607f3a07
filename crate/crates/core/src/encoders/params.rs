use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tape, Tensor, Var};

/// Named parameter arrays in a fixed order. The order is the checkpoint
/// manifest order and the order of [`ParamStore::bind`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Registers every array on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }
}

/// He-normal initializer over a seeded stream.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn he<T: Real>(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let n = crate::tensor::numel(shape);
        Tensor::new(shape, (0..n).map(|_| T::c(dist.sample(&mut self.rng))).collect())
    }
}
