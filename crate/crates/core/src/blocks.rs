//! Residual and feature blocks recorded on a [`Tape`], the pooling blocks
//! between levels, and the kernel-sharing rules.
//!
//! Blocks hold only parameter ids. Values come from a [`ParamStore`] through
//! a [`Forward`] context, so two blocks share a kernel exactly when they hold
//! the same id, and the tape sums its gradient over every use.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, BatchStats, BnMode};
use crate::param::{ParamId, ParamStore};
use crate::scheme::SchemeForm;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockVariant {
    PreAct,
    Classic,
    /// Pre-activation blocks with one `A` per level.
    ModifiedPreAct,
    /// Classic blocks with one `A` per level.
    ModifiedClassic,
    FeatureBased,
}

impl BlockVariant {
    pub fn requires_level_a(self) -> bool {
        matches!(self, BlockVariant::ModifiedPreAct | BlockVariant::ModifiedClassic)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Share {
    /// A separate kernel for every block.
    PerLayer,
    /// One kernel for all blocks of a level.
    PerLevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SharingPolicy {
    pub a: Share,
    pub b: Share,
}

impl SharingPolicy {
    pub const NONE: SharingPolicy = SharingPolicy { a: Share::PerLayer, b: Share::PerLayer };

    pub fn new(a: Share, b: Share) -> Self {
        SharingPolicy { a, b }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolingVariant {
    /// `R∗₂x + A′∗σ(B₀∗₂σ(x))` with its own `A′`.
    PreActPool,
    /// `σ(R∗₂x + A′∗σ(B₀∗₂x))`.
    ClassicPool,
    /// `u′ = Π∗₂u`, `f′ = R∗₂(f − 𝓐(u)) + 𝓐′(u′)`.
    FBPool,
    /// As `PreActPool` with `A′` tied to the next level's `A`.
    AppendixPool,
}

/// Where batch normalization sits inside a feature-based operator form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeNorm {
    /// Before each activation only; the linear form `K` has none.
    BeforeActivation,
    /// After every convolution, ahead of any trailing activation.
    #[default]
    AfterConv,
}

/// A bias-free convolution kernel held by id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub id: ParamId,
    pub stride: usize,
}

/// Batch-normalization layer: affine parameter ids and the index of its
/// running statistics. Never shared between use sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub fn update(&mut self, stats: &BatchStats<T>) {
        ops::update_running(&mut self.mean, &mut self.var, T::of(BN_MOMENTUM), stats);
    }
}

/// One forward pass: the tape plus the parameter and statistics it reads.
pub struct Forward<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    running: &'a [RunningStats<T>],
    mode: BnMode,
    cache: HashMap<ParamId, Var>,
    /// Batch statistics gathered in train mode, by running-stats slot.
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, running: &'a [RunningStats<T>], mode: BnMode) -> Self {
        Forward { tape: Tape::new(), store, running, mode, cache: HashMap::new(), batch_stats: Vec::new() }
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn input(&mut self, x: Tensor4<T>) -> Var {
        self.tape.input(x)
    }

    /// The tape variable for a parameter, recorded once per pass.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.cache.get(&id) {
            return Ok(v);
        }
        let v = self.tape.param(id, self.store.value(id)?);
        self.cache.insert(id, v);
        Ok(v)
    }

    pub fn conv(&mut self, x: Var, c: &Conv) -> Result<Var> {
        let w = self.param(c.id)?;
        self.tape.conv2d(x, w, c.stride)
    }

    /// Batch normalization, or the identity when `bn` is `None`.
    pub fn bn(&mut self, x: Var, bn: Option<&BnLayer>) -> Result<Var> {
        let Some(bn) = bn else { return Ok(x) };
        let gamma = self.param(bn.gamma)?;
        let beta = self.param(bn.beta)?;
        let eps = T::of(BN_EPS);
        match self.mode {
            BnMode::Train => {
                let (y, stats) = self.tape.batchnorm_train(x, gamma, beta, eps)?;
                self.batch_stats.push((bn.slot, stats));
                Ok(y)
            }
            BnMode::Eval => {
                let rs = self
                    .running
                    .get(bn.slot)
                    .ok_or_else(|| Error::OutOfRange(format!("batch-norm slot {}", bn.slot)))?;
                self.tape.batchnorm_eval(x, gamma, beta, &rs.mean, &rs.var, eps)
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.tape.relu(x)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        self.tape.value(v)
    }
}

/// Pre-activation or classic basic block.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlock {
    pub a: Conv,
    pub b: Conv,
    pub bn1: Option<BnLayer>,
    pub bn2: Option<BnLayer>,
}

/// `r + A∗σ(BN₂(B∗σ(BN₁(r))))`
pub fn preact_block<T: Scalar>(fw: &mut Forward<'_, T>, r: Var, blk: &BasicBlock) -> Result<Var> {
    let h = fw.bn(r, blk.bn1.as_ref())?;
    let h = fw.relu(h);
    let h = fw.conv(h, &blk.b)?;
    let h = fw.bn(h, blk.bn2.as_ref())?;
    let h = fw.relu(h);
    let h = fw.conv(h, &blk.a)?;
    fw.tape.add(r, h)
}

/// `σ(r + BN₂(A∗σ(BN₁(B∗r))))`
pub fn classic_block<T: Scalar>(fw: &mut Forward<'_, T>, r: Var, blk: &BasicBlock) -> Result<Var> {
    let h = fw.conv(r, &blk.b)?;
    let h = fw.bn(h, blk.bn1.as_ref())?;
    let h = fw.relu(h);
    let h = fw.conv(h, &blk.a)?;
    let h = fw.bn(h, blk.bn2.as_ref())?;
    let s = fw.tape.add(r, h)?;
    Ok(fw.relu(s))
}

/// One of the four operator forms. `bn_in` normalizes ahead of a leading
/// activation; `bn_out` follows the convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeLayer {
    pub form: SchemeForm,
    pub conv: Conv,
    pub bn_in: Option<BnLayer>,
    pub bn_out: Option<BnLayer>,
}

pub fn scheme_layer<T: Scalar>(fw: &mut Forward<'_, T>, x: Var, s: &SchemeLayer) -> Result<Var> {
    let mut h = x;
    if s.form.act_before() {
        h = fw.bn(h, s.bn_in.as_ref())?;
        h = fw.relu(h);
    }
    h = fw.conv(h, &s.conv)?;
    h = fw.bn(h, s.bn_out.as_ref())?;
    if s.form.act_after() {
        h = fw.relu(h);
    }
    Ok(h)
}

/// One smoothing step of the feature iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStep {
    pub a: SchemeLayer,
    pub b: SchemeLayer,
}

/// `u + 𝓑(f − 𝓐(u))`
pub fn feature_block<T: Scalar>(fw: &mut Forward<'_, T>, u: Var, f: Var, st: &FeatureStep) -> Result<Var> {
    let au = scheme_layer(fw, u, &st.a)?;
    let r = fw.tape.sub(f, au)?;
    let c = scheme_layer(fw, r, &st.b)?;
    fw.tape.add(u, c)
}

#[derive(Clone, Debug, PartialEq)]
pub enum PoolBlock {
    /// Used for both `PreActPool` and `AppendixPool`; they differ only in
    /// whether `a` is tied to the next level.
    PreAct { r: Conv, b0: Conv, a: Conv, bn1: Option<BnLayer>, bn2: Option<BnLayer> },
    Classic { r: Conv, b0: Conv, a: Conv, bn_b: Option<BnLayer>, bn_a: Option<BnLayer>, bn_r: Option<BnLayer> },
    Feature { pi: Conv, r: Conv, a_prev: SchemeLayer, a_next: SchemeLayer },
}

/// Stream entering or leaving a pooling block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Residual(Var),
    Feature { u: Var, f: Var },
}

pub fn pool_block<T: Scalar>(fw: &mut Forward<'_, T>, x: Stream, blk: &PoolBlock) -> Result<Stream> {
    match (blk, x) {
        (PoolBlock::PreAct { r, b0, a, bn1, bn2 }, Stream::Residual(x)) => {
            let proj = fw.conv(x, r)?;
            let h = fw.bn(x, bn1.as_ref())?;
            let h = fw.relu(h);
            let h = fw.conv(h, b0)?;
            let h = fw.bn(h, bn2.as_ref())?;
            let h = fw.relu(h);
            let h = fw.conv(h, a)?;
            Ok(Stream::Residual(fw.tape.add(proj, h)?))
        }
        (PoolBlock::Classic { r, b0, a, bn_b, bn_a, bn_r }, Stream::Residual(x)) => {
            let proj = fw.conv(x, r)?;
            let proj = fw.bn(proj, bn_r.as_ref())?;
            let h = fw.conv(x, b0)?;
            let h = fw.bn(h, bn_b.as_ref())?;
            let h = fw.relu(h);
            let h = fw.conv(h, a)?;
            let h = fw.bn(h, bn_a.as_ref())?;
            let s = fw.tape.add(proj, h)?;
            Ok(Stream::Residual(fw.relu(s)))
        }
        (PoolBlock::Feature { pi, r, a_prev, a_next }, Stream::Feature { u, f }) => {
            let u_next = fw.conv(u, pi)?;
            let au = scheme_layer(fw, u, a_prev)?;
            let res = fw.tape.sub(f, au)?;
            let restricted = fw.conv(res, r)?;
            let a_new = scheme_layer(fw, u_next, a_next)?;
            let f_next = fw.tape.add(restricted, a_new)?;
            Ok(Stream::Feature { u: u_next, f: f_next })
        }
        _ => Err(Error::config("pooling block does not accept this stream")),
    }
}

/// Kernel ids of one level, as laid out by the sharing policy.
///
/// Slots run `1..=nu`. When the level opens with a pooling block, slot 1 uses
/// the pooling kernel `B₀`, which is never shared, and the `b` list covers
/// slots `2..=nu` only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelKernels {
    pub nu: usize,
    pub a: Vec<ParamId>,
    pub b: Vec<ParamId>,
    pub b0: Option<ParamId>,
}

impl LevelKernels {
    /// Allocates ids for one level. `fresh` is called once per distinct kernel.
    pub fn allocate(
        policy: SharingPolicy,
        nu: usize,
        opens_with_pool: bool,
        mut fresh: impl FnMut(KernelRole, usize) -> ParamId,
    ) -> Self {
        let a_count = match policy.a {
            Share::PerLevel => 1,
            Share::PerLayer => nu,
        };
        let b_slots = if opens_with_pool { nu - 1 } else { nu };
        let b_count = match policy.b {
            Share::PerLevel => b_slots.min(1),
            Share::PerLayer => b_slots,
        };
        let a = (0..a_count).map(|i| fresh(KernelRole::A, i)).collect();
        let b0 = opens_with_pool.then(|| fresh(KernelRole::B0, 0));
        let b = (0..b_count).map(|i| fresh(KernelRole::B, i)).collect();
        LevelKernels { nu, a, b, b0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelRole {
    A,
    B,
    B0,
}

/// The `(A, B)` kernel ids used at slot `i` (1-based) of a level.
pub fn resolve_sharing(policy: SharingPolicy, level: &LevelKernels, i: usize) -> Result<(ParamId, ParamId)> {
    if i == 0 || i > level.nu {
        return Err(Error::OutOfRange(format!("block {i} of a level with {} blocks", level.nu)));
    }
    let a = match policy.a {
        Share::PerLevel => level.a[0],
        Share::PerLayer => level.a[i - 1],
    };
    let b = match (level.b0, i) {
        (Some(b0), 1) => b0,
        (Some(_), _) => match policy.b {
            Share::PerLevel => level.b[0],
            Share::PerLayer => level.b[i - 2],
        },
        (None, _) => match policy.b {
            Share::PerLevel => level.b[0],
            Share::PerLayer => level.b[i - 1],
        },
    };
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamKind;
    use crate::scheme::{residual_step, Sign};
    use crate::param::KernelParam;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore<f64>,
        rng: ChaCha8Rng,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(5) }
        }

        fn conv(&mut self, co: usize, ci: usize, k: usize, stride: usize, scale: f64) -> Conv {
            let w = Tensor4::randn([co, ci, k, k], &mut self.rng).scale(scale);
            Conv { id: self.store.insert("w", ParamKind::ConvWeight, w), stride }
        }

        fn zero(&mut self, co: usize, ci: usize) -> Conv {
            Conv { id: self.store.insert("z", ParamKind::ConvWeight, Tensor4::zeros([co, ci, 3, 3])), stride: 1 }
        }

        fn run(&self, x: &Tensor4<f64>, f: impl FnOnce(&mut Forward<'_, f64>, Var) -> Result<Var>) -> Tensor4<f64> {
            let mut fw = Forward::new(&self.store, &[], BnMode::Eval);
            let v = fw.input(x.clone());
            let y = f(&mut fw, v).unwrap();
            fw.value(y).clone()
        }
    }

    #[test]
    fn preact_block_trivial_cases() {
        let mut fx = Fixture::new();
        let x = Tensor4::<f64>::randn([2, 3, 6, 6], &mut fx.rng);
        let blk = BasicBlock { a: fx.zero(3, 3), b: fx.conv(3, 3, 3, 1, 0.3), bn1: None, bn2: None };
        assert_eq!(fx.run(&x, |fw, v| preact_block(fw, v, &blk)), x);

        let neg = x.map(|v| -v.abs());
        let blk = BasicBlock { a: fx.conv(3, 3, 3, 1, 0.3), b: fx.conv(3, 3, 3, 1, 0.3), bn1: None, bn2: None };
        assert_eq!(fx.run(&neg, |fw, v| preact_block(fw, v, &blk)), neg);
    }

    #[test]
    fn preact_block_matches_learned_residual_step() {
        let mut fx = Fixture::new();
        let x = Tensor4::<f64>::randn([2, 3, 6, 6], &mut fx.rng);
        let blk = BasicBlock { a: fx.conv(3, 3, 3, 1, 0.3), b: fx.conv(3, 3, 3, 1, 0.3), bn1: None, bn2: None };
        let got = fx.run(&x, |fw, v| preact_block(fw, v, &blk));
        let ka = KernelParam::new(fx.store.value(blk.a.id).unwrap().clone(), 1).unwrap();
        let kb = KernelParam::new(fx.store.value(blk.b.id).unwrap().clone(), 1).unwrap();
        let want = residual_step(&x, &ka, &kb, Sign::Learned).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-13);
    }

    #[test]
    fn classic_block_cases() {
        let mut fx = Fixture::new();
        let pos = Tensor4::<f64>::random_uniform([1, 2, 5, 5], 0.0, 1.0, &mut fx.rng);
        let blk = BasicBlock { a: fx.zero(2, 2), b: fx.conv(2, 2, 3, 1, 0.3), bn1: None, bn2: None };
        assert_eq!(fx.run(&pos, |fw, v| classic_block(fw, v, &blk)), pos);

        let x = Tensor4::<f64>::randn([1, 2, 5, 5], &mut fx.rng);
        let blk = BasicBlock { a: fx.conv(2, 2, 3, 1, 1.0), b: fx.conv(2, 2, 3, 1, 1.0), bn1: None, bn2: None };
        assert!(fx.run(&x, |fw, v| classic_block(fw, v, &blk)).min() >= 0.0);
    }

    #[test]
    fn classic_block_single_channel_by_hand() {
        let mut fx = Fixture::new();
        let x = Tensor4::<f64>::from_fn([1, 1, 4, 4], |_, _, y, x| (y as f64) - (x as f64) * 0.5);
        let blk = BasicBlock { a: fx.conv(1, 1, 3, 1, 1.0), b: fx.conv(1, 1, 3, 1, 1.0), bn1: None, bn2: None };
        let got = fx.run(&x, |fw, v| classic_block(fw, v, &blk));
        let a = fx.store.value(blk.a.id).unwrap().clone();
        let b = fx.store.value(blk.b.id).unwrap().clone();
        // Zero-padded 3×3 correlation written out directly.
        let conv = |k: &Tensor4<f64>, t: &Tensor4<f64>| {
            Tensor4::from_fn([1, 1, 4, 4], |_, _, i, j| {
                let mut s = 0.0;
                for di in 0..3 {
                    for dj in 0..3 {
                        let (y, xx) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                        if (0..4).contains(&y) && (0..4).contains(&xx) {
                            s += k.at(0, 0, di, dj) * t.at(0, 0, y as usize, xx as usize);
                        }
                    }
                }
                s
            })
        };
        let relu = |t: &Tensor4<f64>| t.map(|v| v.max(0.0));
        let want = relu(&x.add(&conv(&a, &relu(&conv(&b, &x)))).unwrap());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-13);
    }

    #[test]
    fn pooling_shapes_and_trivial_cases() {
        let mut fx = Fixture::new();
        let x = Tensor4::<f64>::randn([1, 1, 8, 8], &mut fx.rng);
        let r = fx.conv(2, 1, 1, 2, 1.0);
        let b0 = fx.conv(2, 1, 3, 2, 1.0);
        let a = fx.conv(2, 2, 3, 1, 1.0);
        let pre = PoolBlock::PreAct { r, b0, a, bn1: None, bn2: None };
        let cls = PoolBlock::Classic { r, b0, a, bn_b: None, bn_a: None, bn_r: None };
        for blk in [&pre, &cls] {
            let y = fx.run(&x, |fw, v| match pool_block(fw, Stream::Residual(v), blk)? {
                Stream::Residual(y) => Ok(y),
                _ => unreachable!(),
            });
            assert_eq!(y.shape(), [1, 2, 4, 4]);
        }

        let zb0 = Conv { id: fx.store.insert("z", ParamKind::ConvWeight, Tensor4::zeros([2, 1, 3, 3])), stride: 2 };
        let pre0 = PoolBlock::PreAct { r, b0: zb0, a, bn1: None, bn2: None };
        let y = fx.run(&x, |fw, v| match pool_block(fw, Stream::Residual(v), &pre0)? {
            Stream::Residual(y) => Ok(y),
            _ => unreachable!(),
        });
        let proj = ops::conv2d_forward(&x, fx.store.value(r.id).unwrap(), None, 2).unwrap();
        assert_eq!(y, proj);
    }

    #[test]
    fn feature_pool_with_zero_features() {
        let mut fx = Fixture::new();
        let f = Tensor4::<f64>::randn([1, 1, 8, 8], &mut fx.rng);
        let pi = fx.conv(2, 1, 3, 2, 1.0);
        let r = fx.conv(2, 1, 3, 2, 1.0);
        let layer = |c: Conv| SchemeLayer { form: SchemeForm::ConvOnly, conv: c, bn_in: None, bn_out: None };
        let a_prev = layer(fx.conv(1, 1, 3, 1, 1.0));
        let a_next = layer(fx.zero(2, 2));
        let blk = PoolBlock::Feature { pi, r, a_prev, a_next };
        let mut fw = Forward::new(&fx.store, &[], BnMode::Eval);
        let u = fw.input(Tensor4::zeros(f.shape()));
        let fv = fw.input(f.clone());
        let Stream::Feature { u, f: f2 } = pool_block(&mut fw, Stream::Feature { u, f: fv }, &blk).unwrap() else {
            panic!()
        };
        assert_eq!(fw.value(u).shape(), [1, 2, 4, 4]);
        assert_eq!(fw.value(u).max_abs(), 0.0);
        let want = ops::conv2d_forward(&f, fx.store.value(r.id).unwrap(), None, 2).unwrap();
        assert!(fw.value(f2).max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn sharing_resolution() {
        let mut n = 0;
        let mut fresh = |_: KernelRole, _: usize| {
            n += 1;
            ParamId::fresh()
        };
        let p = SharingPolicy::new(Share::PerLevel, Share::PerLayer);
        let lk = LevelKernels::allocate(p, 2, false, &mut fresh);
        let (a1, b1) = resolve_sharing(p, &lk, 1).unwrap();
        let (a2, b2) = resolve_sharing(p, &lk, 2).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(b1, b2);
        assert!(resolve_sharing(p, &lk, 0).is_err());
        assert!(resolve_sharing(p, &lk, 3).is_err());

        let q = SharingPolicy::NONE;
        let lk = LevelKernels::allocate(q, 2, false, &mut fresh);
        let mut ids: Vec<_> = (1..=2)
            .flat_map(|i| {
                let (a, b) = resolve_sharing(q, &lk, i).unwrap();
                [a, b]
            })
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4);

        // Pooling kernel is never shared with the level's B.
        let s = SharingPolicy::new(Share::PerLevel, Share::PerLevel);
        let lk = LevelKernels::allocate(s, 3, true, &mut fresh);
        let (_, b1) = resolve_sharing(s, &lk, 1).unwrap();
        let (_, b2) = resolve_sharing(s, &lk, 2).unwrap();
        let (_, b3) = resolve_sharing(s, &lk, 3).unwrap();
        assert_ne!(b1, b2);
        assert_eq!(b2, b3);
    }
}
