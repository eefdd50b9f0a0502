//! Named parameter storage and deterministic initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use relumix_autograd::{Float, Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Index of a parameter inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pid(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Fan {
        fan_in: usize,
        gain: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

/// Collects parameter declarations while a model is being assembled.
#[derive(Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    prefix: Vec<String>,
    frozen: bool,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    /// Subsequent declarations are marked non-trainable while set.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Pid {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        debug_assert!(
            self.specs.iter().all(|s| s.name != full),
            "duplicate parameter {full}"
        );
        self.specs.push(ParamSpec {
            name: full,
            shape: shape.to_vec(),
            init,
            trainable: !self.frozen,
        });
        Pid(self.specs.len() - 1)
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// All arrays of a model, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    entries: Vec<Param<T>>,
}

impl<T: Float> Params<T> {
    /// Draws every parameter from its [`Init`] with a ChaCha8 stream.
    ///
    /// Frozen parameters draw from `frozen_seed`, everything else from `seed`, so the frozen
    /// arrays do not depend on the training seed.
    pub fn init(specs: &[ParamSpec], seed: u64, frozen_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(frozen_seed);
        let entries = specs
            .iter()
            .map(|s| {
                let rng = if s.trainable {
                    &mut rng
                } else {
                    &mut frozen_rng
                };
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Fan { fan_in, gain } => {
                        let std = gain / (fan_in.max(1) as f64).sqrt();
                        (0..n)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(rng);
                                // Round through f32 so f32 and f64 stores start from the same values.
                                T::lit((z * std) as f32 as f64)
                            })
                            .collect()
                    }
                };
                Param {
                    name: s.name.clone(),
                    tensor: Tensor::from_vec(&s.shape, data),
                    trainable: s.trainable,
                }
            })
            .collect();
        Self { entries }
    }

    pub fn from_entries(entries: Vec<Param<T>>) -> Self {
        Self { entries }
    }

    /// Checks names, shapes and trainable flags against a model's declarations.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.entries.len() != specs.len() {
            return Err(Error::data(
                None,
                format!(
                    "parameter count {} does not match model ({})",
                    self.entries.len(),
                    specs.len()
                ),
            ));
        }
        for (p, s) in self.entries.iter().zip(specs) {
            if p.name != s.name
                || p.tensor.shape() != s.shape.as_slice()
                || p.trainable != s.trainable
            {
                return Err(Error::data(
                    None,
                    format!(
                        "parameter `{}` {:?} does not match model `{}` {:?}",
                        p.name,
                        p.tensor.shape(),
                        s.name,
                        s.shape
                    ),
                ));
            }
            if !p.tensor.is_finite() {
                return Err(Error::Numerical(format!(
                    "parameter `{}` has non-finite values",
                    p.name
                )));
            }
        }
        Ok(())
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

    pub fn get(&self, pid: Pid) -> &Tensor<T> {
        &self.entries[pid.0].tensor
    }

    pub fn get_mut(&mut self, pid: Pid) -> &mut Tensor<T> {
        &mut self.entries[pid.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.iter_mut().find(|p| p.name == name)
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> Params<U> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Places every parameter on `graph`; only trainable ones track gradients.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                if p.trainable {
                    graph.param(p.tensor.clone())
                } else {
                    graph.constant(p.tensor.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`Params`] store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, pid: Pid) -> Var {
        self.vars[pid.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
