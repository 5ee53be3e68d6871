//! Trainable parameters. Every tensor a model learns lives in a [`ParamStore`]
//! under a process-unique [`ParamId`]; two blocks share a kernel exactly when
//! they reference the same id.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor4};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    BnGamma,
    BnBeta,
    LinearWeight,
    LinearBias,
}

impl ParamKind {
    /// Weight decay applies to convolution and linear weights only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor4<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<ParamId, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor4<T>) -> ParamId {
        let id = ParamId::fresh();
        self.params.insert(id, Param { name: name.into(), kind, value });
        id
    }

    /// Stores a value under an id allocated elsewhere, replacing any previous entry.
    pub fn insert_at(&mut self, id: ParamId, name: impl Into<String>, kind: ParamKind, value: Tensor4<T>) {
        self.params.insert(id, Param { name: name.into(), kind, value });
    }

    pub fn get(&self, id: ParamId) -> Result<&Param<T>> {
        self.params
            .get(&id)
            .ok_or_else(|| Error::OutOfRange(format!("unknown parameter {id}")))
    }

    pub fn value(&self, id: ParamId) -> Result<&Tensor4<T>> {
        Ok(&self.get(id)?.value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> Result<&mut Tensor4<T>> {
        self.params
            .get_mut(&id)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::OutOfRange(format!("unknown parameter {id}")))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().find(|(_, p)| p.name == name).map(|(&id, _)| id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().map(|(&id, p)| (id, p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().map(|(&id, p)| (id, p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar count over all stored tensors; a shared tensor is stored once.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}

/// A convolution kernel of shape `(c_out, c_in, k, k)` with its stride and
/// optional per-output-channel bias.
#[derive(Clone, Debug)]
pub struct KernelParam<T> {
    pub id: ParamId,
    pub weight: Tensor4<T>,
    pub stride: usize,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> KernelParam<T> {
    pub fn new(weight: Tensor4<T>, stride: usize) -> Result<Self> {
        if weight.h != weight.w {
            return Err(Error::config(format!("non-square kernel {}x{}", weight.h, weight.w)));
        }
        ops::check_geometry(weight.h, stride)?;
        Ok(KernelParam { id: ParamId::fresh(), weight, stride, bias: None })
    }

    pub fn with_bias(mut self, bias: Vec<T>) -> Result<Self> {
        if bias.len() != self.c_out() {
            return Err(Error::shape(format!(
                "bias of length {} for {} output channels",
                bias.len(),
                self.c_out()
            )));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize) -> Result<Self> {
        Self::new(Tensor4::zeros([c_out, c_in, k, k]), stride)
    }

    /// Channel-wise identity: centre tap 1 on the diagonal.
    pub fn identity(channels: usize, k: usize) -> Result<Self> {
        let mut w = Tensor4::zeros([channels, channels, k, k]);
        for c in 0..channels {
            w.set(c, c, k / 2, k / 2, T::one());
        }
        Self::new(w, 1)
    }

    pub fn c_out(&self) -> usize {
        self.weight.n
    }

    pub fn c_in(&self) -> usize {
        self.weight.c
    }

    pub fn size(&self) -> usize {
        self.weight.h
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        ops::conv2d_forward(x, &self.weight, self.bias.as_deref(), self.stride)
    }

    /// Same kernel scaled by `alpha`, under a new id.
    pub fn scaled(&self, alpha: T) -> Self {
        KernelParam {
            id: ParamId::fresh(),
            weight: self.weight.scale(alpha),
            stride: self.stride,
            bias: self.bias.as_ref().map(|b| b.iter().map(|&v| v * alpha).collect()),
        }
    }

    /// The adjoint convolution: spatial flip plus channel transpose. Exact for
    /// stride 1 with zero padding.
    pub fn adjoint(&self) -> Result<Self> {
        if self.stride != 1 {
            return Err(Error::config("adjoint kernel needs stride 1"));
        }
        let k = self.size();
        let w = &self.weight;
        let t = Tensor4::from_fn([w.c, w.n, k, k], |ci, co, y, x| w.at(co, ci, k - 1 - y, k - 1 - x));
        Self::new(t, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique() {
        let a = ParamId::fresh();
        let b = ParamId::fresh();
        assert_ne!(a, b);
    }

    #[test]
    fn kernel_validation() {
        assert!(KernelParam::<f64>::zeros(2, 2, 5, 1).is_err());
        assert!(KernelParam::<f64>::zeros(2, 2, 3, 3).is_err());
        assert!(KernelParam::<f64>::zeros(2, 2, 1, 2).is_ok());
        assert!(KernelParam::<f64>::new(Tensor4::zeros([1, 1, 3, 1]), 1).is_err());
    }

    #[test]
    fn store_counts_each_tensor_once() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert("a", ParamKind::ConvWeight, Tensor4::zeros([2, 2, 3, 3]));
        s.insert("b", ParamKind::BnGamma, Tensor4::zeros([1, 2, 1, 1]));
        assert_eq!(s.num_elements(), 38);
        assert_eq!(s.find("a"), Some(a));
        assert!(s.get(a).unwrap().kind.decays());
    }
}
