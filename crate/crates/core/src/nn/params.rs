use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};

/// One named array: trainable weights, or a buffer such as batch-norm
/// running statistics that is updated outside the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry<F> {
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

/// Named parameter collection. Iteration order is lexicographic by name,
/// which fixes checkpoint layout and optimizer traversal.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, Entry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.entries.insert(
            name.into(),
            Entry {
                tensor,
                trainable: true,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.entries.insert(
            name.into(),
            Entry {
                tensor,
                trainable: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    /// Panics on a missing name: every block registers its parameters at
    /// construction, so a miss is a wiring bug.
    pub fn expect(&self, name: &str) -> &Tensor<F> {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry<F>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total trainable scalars whose name starts with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, e)| e.trainable && k.starts_with(prefix))
            .map(|(_, e)| e.tensor.len())
            .sum()
    }

    /// Moves every entry of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore<F>) {
        self.entries.extend(other.entries);
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|e| e.tensor.is_finite())
    }
}

/// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_fan_in<F: Real, R: Rng + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

/// Registers a fully connected layer `name.w: [out, in]` and, optionally, `name.b: [out]`.
pub fn add_linear<F: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    name: &str,
    inputs: usize,
    outputs: usize,
    bias: bool,
) {
    store.insert_param(
        format!("{name}.w"),
        uniform_fan_in(rng, vec![outputs, inputs], inputs),
    );
    if bias {
        store.insert_param(format!("{name}.b"), uniform_fan_in(rng, vec![outputs], inputs));
    }
}

/// Registers a square convolution `name.w: [out, in, k, k]` and, optionally, `name.b: [out]`.
pub fn add_conv<F: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    name: &str,
    inputs: usize,
    outputs: usize,
    kernel: usize,
    bias: bool,
) {
    let fan_in = inputs * kernel * kernel;
    store.insert_param(
        format!("{name}.w"),
        uniform_fan_in(rng, vec![outputs, inputs, kernel, kernel], fan_in),
    );
    if bias {
        store.insert_param(format!("{name}.b"), uniform_fan_in(rng, vec![outputs], fan_in));
    }
}

/// Registers batch-norm affine parameters and running-statistics buffers.
pub fn add_batch_norm<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) {
    store.insert_param(format!("{name}.gamma"), Tensor::filled(vec![channels], F::one()));
    store.insert_param(format!("{name}.beta"), Tensor::zeros(vec![channels]));
    store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels]));
    store.insert_buffer(
        format!("{name}.running_var"),
        Tensor::filled(vec![channels], F::one()),
    );
}
