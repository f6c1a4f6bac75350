//! Dense tensors, a reverse-mode tape, optimizers and a finite-difference
//! gradient checker.
//!
//! Trainable values live in a [`ParamStore`]. A [`Tape`] borrows the store,
//! records the forward computation and produces [`Gradients`] on
//! [`Tape::backward`], which are then folded back into the store with
//! [`ParamStore::accumulate`]. Splitting the two lets frozen-parameter
//! inference run on many threads at once, each with its own tape.

mod gradcheck;
mod optim;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheckConfig};
pub use optim::{OptimizerKind, OptimizerState};
pub(crate) use tape::{log_sum_exp_and_softmax, squared_distance};
pub use tape::{Tape, Var};

/// Floating-point element type usable in tensors. Training runs in `f32`;
/// gradient checks re-run the same graph in `f64`.
pub trait Real:
    Float + FromPrimitive + Default + Debug + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major dense tensor. `grad` is present exactly when the tensor
/// requires gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, data has {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Uniform(-bound, bound) weights with `bound = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        Self::new(shape, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![T::zero(); self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Converts the element type. Gradients are reset to zero.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect();
        let mut t = Tensor {
            shape: self.shape.clone(),
            data,
            grad: None,
        };
        t.set_requires_grad(self.requires_grad());
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of tensors, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    // rows of 2-D tensors that never receive gradient
    frozen_rows: Vec<(ParamId, usize)>,
    grads_populated: bool,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            frozen_rows: Vec::new(),
            grads_populated: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Marks one row of a 2-D tensor as frozen: [`accumulate`](Self::accumulate)
    /// discards its gradient, so optimizers leave it untouched.
    pub fn freeze_row(&mut self, id: ParamId, row: usize) -> Result<()> {
        let shape = self.tensors[id.0].shape();
        if shape.len() != 2 || row >= shape[0] {
            return Err(Error::shape("freeze_row", format!("row {row} of tensor {shape:?}")));
        }
        if !self.frozen_rows.contains(&(id, row)) {
            self.frozen_rows.push((id, row));
        }
        Ok(())
    }

    pub fn frozen_rows(&self) -> &[(ParamId, usize)] {
        &self.frozen_rows
    }

    /// Adds tape gradients into each tensor's `grad`. Tensors that do not
    /// require gradients ignore their contribution.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (i, g) in grads.per_param.iter().enumerate() {
            let (Some(g), Some(t)) = (g, self.tensors.get_mut(i)) else {
                continue;
            };
            if let Some(acc) = t.grad.as_mut() {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        for &(id, row) in &self.frozen_rows {
            let t = &mut self.tensors[id.0];
            let dim = t.shape[1];
            if let Some(acc) = t.grad.as_mut() {
                acc[row * dim..(row + 1) * dim].iter_mut().for_each(|x| *x = T::zero());
            }
        }
        self.grads_populated = true;
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
        self.grads_populated = false;
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            frozen_rows: self.frozen_rows.clone(),
            grads_populated: false,
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    per_param: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub(crate) fn with_len(n: usize) -> Self {
        Gradients {
            per_param: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.per_param.get(id.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn add(&mut self, id: ParamId, grad: &[T]) {
        match &mut self.per_param[id.0] {
            Some(acc) => {
                for (a, &x) in acc.iter_mut().zip(grad) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    /// Elementwise sum of gradients from several backward passes.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (i, g) in other.per_param.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }
}
