use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter was initialized; recorded in checkpoint manifests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
    Normal { std: f64 },
    Zeros,
    Constant(f64),
}

impl Init {
    /// Default weight init: uniform in `±sqrt(1/fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform { bound: (1.0 / fan_in as f64).sqrt() }
    }

    /// Learnable query init, N(0, 0.02^2).
    pub fn query() -> Self {
        Init::Normal { std: 0.02 }
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        match *self {
            Init::Uniform { bound } => Tensor::uniform(shape, bound, rng),
            Init::Normal { std } => Tensor::normal(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(c) => Tensor::full(shape, T::of(c)),
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::Uniform { bound } => write!(f, "uniform({bound})"),
            Init::Normal { std } => write!(f, "normal({std})"),
            Init::Zeros => write!(f, "zeros"),
            Init::Constant(c) => write!(f, "constant({c})"),
        }
    }
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("unrecognized init descriptor {s:?}"));
        if s == "zeros" {
            return Ok(Init::Zeros);
        }
        let (kind, rest) = s.split_once('(').ok_or_else(bad)?;
        let value: f64 = rest.strip_suffix(')').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        match kind {
            "uniform" => Ok(Init::Uniform { bound: value }),
            "normal" => Ok(Init::Normal { std: value }),
            "constant" => Ok(Init::Constant(value)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub init: Init,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<ParamId> {
        let tensor = init.sample(shape, rng);
        self.insert(Parameter { name: name.to_string(), tensor, init })
    }

    pub fn insert(&mut self, param: Parameter<T>) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::Config(format!("duplicate parameter name {}", param.name)));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), tensor: p.tensor.cast(), init: p.init })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
