//! Named parameter collections and small layer helpers shared by the models.

use rand::Rng;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Ordered, named list of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(self.position(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.param(t)).collect();
        Bound { names: &self.names, vars }
    }

    /// Registers every tensor as a constant; no gradient reaches them.
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.constant_ref(t)).collect();
        Bound { names: &self.names, vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::InvalidArgument("parameter sets differ in names".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::shape("assign", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            a.data_mut().copy_from_slice(b.data());
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound<'p> {
    names: &'p [String],
    vars: Vec<Var>,
}

impl<'p> Bound<'p> {
    /// Handles for vars created outside [`ParamSet::bind`], in `names` order.
    pub fn from_vars(names: &'p [String], vars: Vec<Var>) -> Self {
        assert_eq!(names.len(), vars.len());
        Self { names, vars }
    }

    /// Handle of a parameter. Panics on an unknown name, which is a
    /// programming error in the model that owns the set.
    pub fn var(&self, name: &str) -> Var {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of each parameter, `None` where no path reached it.
    pub fn grads<T: Scalar>(&self, grads: &mut Grads<T>) -> Vec<Option<Vec<T>>> {
        self.vars.iter().map(|v| grads.take(*v)).collect()
    }
}

/// Uniform init in `[-b, b]` with `b = gain * sqrt(3 / fan_in)`.
pub fn init_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let b = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::c(rng.random_range(-b..=b)))
}

/// Gain for leaky ReLU with [`LEAKY_SLOPE`].
pub fn leaky_gain() -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

/// Inserts `{prefix}.w` (`[k, n]`) and `{prefix}.b` (`[n]`, zero).
pub fn insert_linear<T: Scalar, R: Rng>(p: &mut ParamSet<T>, rng: &mut R, prefix: &str, k: usize, n: usize, gain: f64) {
    p.insert(format!("{prefix}.w"), init_uniform(rng, &[k, n], k, gain));
    p.insert(format!("{prefix}.b"), Tensor::zeros([n]));
}

/// Inserts `{prefix}.w` (`[cout, cin, k, k]`) and `{prefix}.b` (`[cout]`, zero).
pub fn insert_conv<T: Scalar, R: Rng>(
    p: &mut ParamSet<T>,
    rng: &mut R,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f64,
) {
    p.insert(format!("{prefix}.w"), init_uniform(rng, &[cout, cin, k, k], cin * k * k, gain));
    p.insert(format!("{prefix}.b"), Tensor::zeros([cout]));
}

pub fn linear<T: Scalar>(tape: &mut Tape<'_, T>, b: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
    tape.linear(x, b.var(&format!("{prefix}.w")), b.var(&format!("{prefix}.b")))
}

pub fn conv<T: Scalar>(tape: &mut Tape<'_, T>, b: &Bound<'_>, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    tape.conv2d(x, b.var(&format!("{prefix}.w")), Some(b.var(&format!("{prefix}.b"))), stride)
}

pub fn leaky<T: Scalar>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    tape.leaky_relu(x, T::c(LEAKY_SLOPE))
}
