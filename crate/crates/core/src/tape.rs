//! Reverse-mode differentiation over the operator set in [`crate::ops`].
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! [`Tape::backward`] walks it in reverse and returns a [`Gradients`] record
//! that maps each [`ParamId`] to the sum of the gradients from all of its use
//! sites, which is what makes shared kernels train as a single tensor.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, BatchStats};
use crate::param::{KernelParam, ParamId};
use crate::tensor::{Scalar, Tensor4};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, stride: usize },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    BnTrain { x: Var, gamma: Var, beta: Var, stats: BatchStats<T> },
    BnEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Subsample(Var),
    AvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor4<T> },
    Dot { x: Var, weights: Tensor4<T> },
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} is not on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor4<T>) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    pub fn kernel(&mut self, k: &KernelParam<T>) -> Var {
        self.param(k.id, &k.weight)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let y = ops::conv2d_forward(self.value(x), self.value(w), None, stride)?;
        Ok(self.push(y, Op::Conv { x, w, stride }))
    }

    /// Convolution with a standalone kernel, recorded against its id.
    pub fn apply_kernel(&mut self, x: Var, k: &KernelParam<T>) -> Result<Var> {
        if k.bias.is_some() {
            return Err(Error::config("tape convolutions are bias-free"));
        }
        let w = self.kernel(k);
        self.conv2d(x, w, k.stride)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Var {
        let y = self.value(x).scale(alpha);
        self.push(y, Op::Scale(x, alpha))
    }

    /// Training-mode batch normalization. `gamma` and `beta` are `(1, C, 1, 1)`.
    /// Returns the batch statistics so the caller can update running estimates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let stats = ops::batch_stats(self.value(x), eps)?;
        let y = ops::channel_affine(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            &stats.mean,
            &stats.inv_std,
        )?;
        let out = self.push(y, Op::BnTrain { x, gamma, beta, stats: stats.clone() });
        Ok((out, stats))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = ops::channel_affine(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            mean,
            &inv_std,
        )?;
        Ok(self.push(y, Op::BnEval { x, gamma, beta, mean: mean.to_vec(), inv_std }))
    }

    pub fn subsample(&mut self, x: Var) -> Var {
        let y = ops::subsample(self.value(x));
        self.push(y, Op::Subsample(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = ops::global_avg_pool(self.value(x));
        self.push(y, Op::AvgPool(x))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    /// Mean softmax cross-entropy, a `(1, 1, 1, 1)` scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let v = Tensor4::filled([1, 1, 1, 1], loss);
        Ok(self.push(v, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// `sum(x * weights)`, a `(1, 1, 1, 1)` scalar.
    pub fn dot(&mut self, x: Var, weights: Tensor4<T>) -> Result<Var> {
        let s = self.value(x).dot(&weights)?;
        Ok(self.push(Tensor4::filled([1, 1, 1, 1], s), Op::Dot { x, weights }))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                node.value.shape()
            )));
        }
        self.backward_with(loss, Tensor4::filled([1, 1, 1, 1], T::one()))
    }

    /// Backpropagates an explicit output gradient `seed` from `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor4<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        self.node(out)?.value.check_same(&seed, "backward seed")?;

        let mut grads: Vec<Option<Tensor4<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut params: BTreeMap<ParamId, Tensor4<T>> = BTreeMap::new();

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    match params.get_mut(id) {
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            params.insert(*id, g.clone());
                        }
                    }
                    grads[i] = Some(g);
                }
                Op::Conv { x, w, stride } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let dx = ops::conv2d_backward_input(&g, wv, xv.shape(), *stride)?;
                    let dw = ops::conv2d_backward_weight(&g, xv, wv.shape(), *stride)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(&g, self.value(*x))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone())?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-T::one()))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Scale(x, alpha) => {
                    accumulate(&mut grads, *x, g.scale(*alpha))?;
                }
                Op::BnTrain { x, gamma, beta, stats } => {
                    let gv = self.value(*gamma);
                    let (dx, dg, db) = ops::batchnorm_train_backward(&g, self.value(*x), gv.data(), stats);
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, Tensor4::from_vec(gv.shape(), dg)?)?;
                    accumulate(&mut grads, *beta, Tensor4::from_vec(gv.shape(), db)?)?;
                }
                Op::BnEval { x, gamma, beta, mean, inv_std } => {
                    let gv = self.value(*gamma);
                    let (dx, dg, db) =
                        ops::channel_affine_backward(&g, self.value(*x), gv.data(), mean, inv_std);
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, Tensor4::from_vec(gv.shape(), dg)?)?;
                    accumulate(&mut grads, *beta, Tensor4::from_vec(gv.shape(), db)?)?;
                }
                Op::Subsample(x) => {
                    let dx = ops::subsample_backward(&g, self.value(*x).shape());
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::AvgPool(x) => {
                    let dx = ops::global_avg_pool_backward(&g, self.value(*x).shape());
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(&g, self.value(*x), self.value(*w))?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let scale = g.data()[0];
                    let d = ops::softmax_cross_entropy_backward(probs, labels, scale);
                    accumulate(&mut grads, *logits, d)?;
                }
                Op::Dot { x, weights } => {
                    let scale = g.data()[0];
                    accumulate(&mut grads, *x, weights.scale(scale))?;
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor4<T>>], v: Var, g: Tensor4<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Result of one backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor4<T>>>,
    params: BTreeMap<ParamId, Tensor4<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Summed gradient for a parameter, over all of its use sites.
    pub fn param(&self, id: ParamId) -> Option<&Tensor4<T>> {
        self.params.get(&id)
    }

    /// Gradient with respect to an input or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor4<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor4<T>)> {
        self.params.iter().map(|(&id, g)| (id, g))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor4<T>> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_sum_passes_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::<f64>::random_uniform([2, 3, 4, 4], 0.1, 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let y = t.relu(xv);
        let l = t.dot(y, Tensor4::filled(x.shape(), 1.0)).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(xv).unwrap(), &Tensor4::filled(x.shape(), 1.0));
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let t = Tape::<f64>::new();
        assert!(matches!(t.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn shared_kernel_gradient_is_sum_over_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = KernelParam::new(Tensor4::<f64>::randn([2, 2, 3, 3], &mut rng), 1).unwrap();
        let x = Tensor4::<f64>::randn([1, 2, 5, 5], &mut rng);
        let wts = Tensor4::<f64>::randn([1, 2, 5, 5], &mut rng);

        // Shared: k applied twice in sequence.
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let h = t.apply_kernel(xv, &k).unwrap();
        let y = t.apply_kernel(h, &k).unwrap();
        let l = t.dot(y, wts.clone()).unwrap();
        let shared = t.backward(l).unwrap().param(k.id).unwrap().clone();

        // Independent copies initialized identically.
        let k1 = KernelParam::new(k.weight.clone(), 1).unwrap();
        let k2 = KernelParam::new(k.weight.clone(), 1).unwrap();
        let mut t = Tape::new();
        let xv = t.input(x);
        let h = t.apply_kernel(xv, &k1).unwrap();
        let y = t.apply_kernel(h, &k2).unwrap();
        let l = t.dot(y, wts).unwrap();
        let g = t.backward(l).unwrap();
        let sum = g.param(k1.id).unwrap().add(g.param(k2.id).unwrap()).unwrap();
        assert!(shared.max_abs_diff(&sum).unwrap() < 1e-12);
    }
}
