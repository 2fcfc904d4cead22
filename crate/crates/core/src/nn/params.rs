use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub frozen: bool,
}

/// Named trainable arrays with gradient slots.
///
/// Entries keep insertion order, which is also the checkpoint order.
/// `version` is bumped on every optimizer update or bulk load.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    pub version: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new(), version: 0 }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        value.ensure_finite(&name)?;
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad: None, frozen: false });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces a value, keeping its declared shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| invalid!("unknown parameter {name}"))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(shape_err!(
                "parameter {name} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            ));
        }
        value.ensure_finite(name)?;
        p.value = value;
        self.version += 1;
        Ok(())
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    /// Sets every parameter under `prefix` to zero.
    pub fn zero_values(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value.data_mut().fill(T::zero());
        }
        self.version += 1;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds per-parameter gradients (indexed by `ParamId`) into the gradient slots.
    pub fn accumulate(&mut self, grads: &[Option<Tensor<T>>]) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if g.shape() != p.value.shape() {
                return Err(shape_err!("gradient for {} has shape {:?}", p.name, g.shape()));
            }
            match &mut p.grad {
                Some(acc) => acc.add_assign(g)?,
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Scales every gradient slot, e.g. by `1 / batch`.
    pub fn scale_grads(&mut self, factor: T) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Copies every parameter of `other` whose name exists here.
    ///
    /// Returns the number of entries copied; shape mismatches are errors.
    pub fn load_matching<U: Scalar>(&mut self, other: &ParamStore<U>) -> Result<usize> {
        let mut n = 0;
        for p in &other.params {
            if self.id(&p.name).is_some() {
                self.set(&p.name, p.value.cast())?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Same entries in another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    frozen: p.frozen,
                })
                .collect(),
            index: self.index.clone(),
            version: self.version,
        }
    }
}

/// Zero-mean normal initializer scaled by fan-in (`std = gain * sqrt(2 / fan_in)`).
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("valid std");
    let data = (0..n).map(|_| T::from_f64_lossy(if std == 0.0 { 0.0 } else { dist.sample(rng) })).collect();
    Tensor::from_vec(shape, data).expect("initializer shape")
}
