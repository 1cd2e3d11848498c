//! Dense fp64 tensors, a reverse-mode tape over a fixed op set, and a
//! central-difference gradient checker.

mod kernels;
mod tape;
mod tensor;

use std::collections::BTreeMap;

pub use tape::{Gradients, NormMode, Tape, Unary, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Named tensors in a stable (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Order-sensitive checksum over names and values.
    pub fn checksum(&self) -> f64 {
        let mut acc = 0.0;
        for (k, (name, t)) in self.tensors.iter().enumerate() {
            let salt = name.bytes().map(f64::from).sum::<f64>();
            for (i, v) in t.data().iter().enumerate() {
                acc += v * (1.0 + ((k * 31 + i) % 97) as f64 / 97.0) + salt * 1e-9;
            }
        }
        acc
    }
}

/// Registers every parameter of `params` on a fresh tape, evaluates `build`, and
/// differentiates its scalar result. Parameters the root does not reach get zero
/// gradients.
pub fn forward_backward<F>(params: &ParamStore, build: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(name, t)| (name.clone(), tape.param(name, t.clone())))
        .collect();
    let root = build(&mut tape, &vars)?;
    let loss = tape.value(root);
    if !loss.is_scalar() {
        return Err(Error::Shape(format!(
            "loss must be scalar, got {:?}",
            loss.shape()
        )));
    }
    let loss = loss.item();
    let mut grads = tape.backward(root)?;
    for (name, t) in params.iter() {
        grads
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(t.shape()));
    }
    Ok((loss, grads))
}

/// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)` over every
/// parameter entry, with numeric derivatives from central differences.
pub fn finite_difference_check<F>(params: &ParamStore, step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    let (_, analytic) = forward_backward(params, &build)?;
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: BTreeMap<String, Var> = p
            .iter()
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect();
        let root = build(&mut tape, &vars)?;
        let v = tape.value(root).item();
        if !v.is_finite() {
            return Err(Error::Numeric("objective returned a non-finite value".into()));
        }
        Ok(v)
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.numel();
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[&name].data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
