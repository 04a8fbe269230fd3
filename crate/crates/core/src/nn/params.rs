use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

impl Init {
    pub fn sample<T: Scalar>(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::He { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                normal(shape, std, rng)
            }
            Init::Normal { std } => normal(shape, std, rng),
        }
    }
}

fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Ordered, named collection of every tensor a model owns.
///
/// Layers hold [`ParamId`]s into the set; the set is what the optimizer
/// updates and what checkpoints serialize.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    entries: Vec<Entry<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Registers a new tensor drawn from `init`.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let value = init.sample(shape, &mut self.rng);
        self.push(name.into(), value)
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> ParamId {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Replaces every tensor with a same-named, same-shaped one.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for e in &mut self.entries {
            let t = lookup(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t;
        }
        Ok(())
    }

    /// Overwrites all values in order; shapes must match.
    pub fn set_all(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            if v.shape() != e.value.shape() {
                return Err(Error::dim("set_all", format!("{} shape {:?}", e.name, v.shape())));
            }
            e.value = v;
        }
        Ok(())
    }

    /// Same layout in another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            rng: self.rng.clone(),
        }
    }

    /// Records every tensor as a leaf on `tape`; frozen tensors become constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            tape,
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone(), e.trainable))
                .collect(),
        }
    }
}

/// Parameters of one [`ParamSet`] recorded on a tape.
pub struct Bound<'t, T> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Wraps vars recorded elsewhere, one per parameter in set order.
    pub fn from_vars(tape: &'t Tape<T>, vars: Vec<Var<'t, T>>) -> Self {
        Self { tape, vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Gradient per parameter, in set order.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
