//! Whole networks: specification, layout, parameter counting and the forward
//! pass.
//!
//! Building happens in two phases. [`Architecture::plan`] lays out every
//! block and allocates parameter ids with their shapes but no values, which
//! is all that counting needs. [`Model::build`] then materializes values.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    classic_block, feature_block, pool_block, preact_block, resolve_sharing, BasicBlock, BlockVariant,
    BnLayer, Conv, FeatureStep, Forward, KernelRole, LevelKernels, PoolBlock, PoolingVariant, RunningStats,
    SchemeLayer, SchemeNorm, Share, SharingPolicy, Stream,
};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, BnMode};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::scheme::SchemeForm;
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    PreAct,
    Classic,
    FeatureBased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StemKind {
    /// 3×3 stride-1 convolution on 3-channel input.
    Cifar,
    /// 3×3 stride-1 convolution on 1-channel input.
    SmallImage,
    /// 7×7 stride-2 convolution followed by max pooling. Counted, not run.
    LargeImage,
}

impl StemKind {
    pub fn in_channels(self) -> usize {
        match self {
            StemKind::SmallImage => 1,
            StemKind::Cifar | StemKind::LargeImage => 3,
        }
    }

    pub fn kernel(self) -> usize {
        match self {
            StemKind::LargeImage => 7,
            _ => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub family: Family,
    pub nu: Vec<usize>,
    pub channels: Vec<usize>,
    pub sharing: SharingPolicy,
    pub pooling: PoolingVariant,
    pub a_form: SchemeForm,
    pub b_form: SchemeForm,
    pub stem: StemKind,
    pub num_classes: usize,
    pub bn: bool,
    /// Batch-norm placement inside feature-based operator forms.
    #[serde(default)]
    pub scheme_norm: SchemeNorm,
}

pub const WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const DESK_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const NU_18: [usize; 4] = [2, 2, 2, 2];
pub const NU_34: [usize; 4] = [3, 4, 6, 3];

impl NetworkSpec {
    /// Pre-activation network; modified pooling is chosen when `A` is shared per level.
    pub fn preact(nu: &[usize], channels: &[usize], sharing: SharingPolicy, num_classes: usize) -> Self {
        let pooling = match sharing.a {
            Share::PerLevel => PoolingVariant::AppendixPool,
            Share::PerLayer => PoolingVariant::PreActPool,
        };
        NetworkSpec {
            family: Family::PreAct,
            nu: nu.to_vec(),
            channels: channels.to_vec(),
            sharing,
            pooling,
            a_form: SchemeForm::ConvOnly,
            b_form: SchemeForm::Sandwich,
            stem: StemKind::Cifar,
            num_classes,
            bn: true,
            scheme_norm: SchemeNorm::default(),
        }
    }

    pub fn classic(nu: &[usize], channels: &[usize], sharing: SharingPolicy, num_classes: usize) -> Self {
        NetworkSpec { family: Family::Classic, pooling: PoolingVariant::ClassicPool, ..Self::preact(nu, channels, sharing, num_classes) }
    }

    pub fn feature_based(
        nu: &[usize],
        channels: &[usize],
        a_form: SchemeForm,
        b_form: SchemeForm,
        num_classes: usize,
    ) -> Self {
        NetworkSpec {
            family: Family::FeatureBased,
            pooling: PoolingVariant::FBPool,
            sharing: SharingPolicy::new(Share::PerLevel, Share::PerLayer),
            a_form,
            b_form,
            ..Self::preact(nu, channels, SharingPolicy::NONE, num_classes)
        }
    }

    pub fn levels(&self) -> usize {
        self.nu.len()
    }

    pub fn block_variant(&self) -> BlockVariant {
        match (self.family, self.sharing.a) {
            (Family::PreAct, Share::PerLayer) => BlockVariant::PreAct,
            (Family::PreAct, Share::PerLevel) => BlockVariant::ModifiedPreAct,
            (Family::Classic, Share::PerLayer) => BlockVariant::Classic,
            (Family::Classic, Share::PerLevel) => BlockVariant::ModifiedClassic,
            (Family::FeatureBased, _) => BlockVariant::FeatureBased,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nu.is_empty() {
            return bad("a network needs at least one level".into());
        }
        if self.nu.len() != self.channels.len() {
            return bad(format!(
                "{} block counts but {} channel widths; both lists need one entry per level",
                self.nu.len(),
                self.channels.len()
            ));
        }
        if let Some(l) = self.nu.iter().position(|&n| n == 0) {
            return bad(format!("level {} has no blocks", l + 1));
        }
        if self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("the head needs at least one class".into());
        }
        let pool_ok = match self.family {
            Family::PreAct => matches!(self.pooling, PoolingVariant::PreActPool | PoolingVariant::AppendixPool),
            Family::Classic => self.pooling == PoolingVariant::ClassicPool,
            Family::FeatureBased => self.pooling == PoolingVariant::FBPool,
        };
        if !pool_ok {
            return bad(format!("{:?} pooling does not fit a {:?} network", self.pooling, self.family));
        }
        if self.pooling == PoolingVariant::AppendixPool && self.sharing.a != Share::PerLevel {
            return bad("the tied pooling block reuses the level's A, which needs per-level A sharing".into());
        }
        if self.family == Family::FeatureBased && self.sharing.b != Share::PerLayer {
            return bad("feature-based networks use a separate B for every smoothing step".into());
        }
        if self.family != Family::FeatureBased
            && (self.a_form != SchemeForm::ConvOnly || self.b_form != SchemeForm::Sandwich)
        {
            return bad("operator forms are configurable only for feature-based networks".into());
        }
        Ok(())
    }
}

/// Named presets. Grammar:
/// `[preact-]resnet{18|34}-{Ali|Al}-{Bli|Bl}-{mnist|cifar10|cifar100|imagenet}[-desk]`
/// and `fbresnet18-<A form>-<B form>-{cifar10|cifar100}[-desk]` with forms `K`, `Ks`, `sK`, `sKs`.
pub fn preset(name: &str) -> Result<NetworkSpec> {
    let unknown = || Error::Config(format!("unknown model preset {name:?}"));
    let (base, desk) = match name.strip_suffix("-desk") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let widths: &[usize] = if desk { &DESK_WIDTHS } else { &WIDTHS };
    let parts: Vec<&str> = base.split('-').collect();

    let dataset = |s: &str| -> Result<(StemKind, usize)> {
        match s {
            "mnist" => Ok((StemKind::SmallImage, 10)),
            "cifar10" => Ok((StemKind::Cifar, 10)),
            "cifar100" => Ok((StemKind::Cifar, 100)),
            "imagenet" => Ok((StemKind::LargeImage, 1000)),
            _ => Err(unknown()),
        }
    };

    if parts.first() == Some(&"fbresnet18") {
        let [_, a, b, data] = parts[..] else { return Err(unknown()) };
        let (stem, classes) = dataset(data)?;
        if stem != StemKind::Cifar {
            return Err(unknown());
        }
        let spec = NetworkSpec::feature_based(
            &NU_18,
            widths,
            SchemeForm::from_label(a)?,
            SchemeForm::from_label(b)?,
            classes,
        );
        return Ok(spec);
    }

    let (preact, rest) = match parts.first() {
        Some(&"preact") => (true, &parts[1..]),
        _ => (false, &parts[..]),
    };
    let [depth, a, b, data] = rest[..] else { return Err(unknown()) };
    let nu: &[usize] = match depth {
        "resnet18" => &NU_18,
        "resnet34" => &NU_34,
        _ => return Err(unknown()),
    };
    let share = |s: &str, p: char| -> Result<Share> {
        match s.strip_prefix(p) {
            Some("li") => Ok(Share::PerLayer),
            Some("l") => Ok(Share::PerLevel),
            _ => Err(unknown()),
        }
    };
    let sharing = SharingPolicy::new(share(a, 'A')?, share(b, 'B')?);
    let (stem, classes) = dataset(data)?;
    let mut spec = if preact {
        NetworkSpec::preact(nu, widths, sharing, classes)
    } else {
        NetworkSpec::classic(nu, widths, sharing, classes)
    };
    spec.stem = stem;
    Ok(spec)
}

/// The sixteen `(A form, B form)` pairs over the 18-layer feature-based backbone.
pub fn scheme_sweep_specs() -> Vec<NetworkSpec> {
    scheme_sweep_specs_with(&WIDTHS)
}

pub fn scheme_sweep_specs_with(channels: &[usize]) -> Vec<NetworkSpec> {
    let mut out = Vec::with_capacity(16);
    for a in SchemeForm::ALL {
        for b in SchemeForm::ALL {
            out.push(NetworkSpec::feature_based(&NU_18, channels, a, b, 10));
        }
    }
    out
}

/// Whether `count` prints as `printed` (e.g. `"8.1M"`, `"11.7M"`, `"270K"`)
/// when rounded to the same number of decimals.
pub fn matches_printed(count: usize, printed: &str) -> Result<bool> {
    let s = printed.trim();
    let (num, scale) = match s.chars().last() {
        Some('M') | Some('m') => (&s[..s.len() - 1], 1e6),
        Some('K') | Some('k') => (&s[..s.len() - 1], 1e3),
        _ => (s, 1.0),
    };
    let value: f64 = num.parse().map_err(|_| Error::Config(format!("cannot read count {printed:?}")))?;
    let decimals = num.split_once('.').map_or(0, |(_, d)| d.len()) as i32;
    let p = 10f64.powi(decimals);
    Ok(((count as f64 / scale) * p).round() == (value * p).round())
}

/// A count in millions with `decimals` places, e.g. `8.1M`.
pub fn format_count(count: usize, decimals: usize) -> String {
    format!("{:.*}M", decimals, count as f64 / 1e6)
}

/// One parameter tensor of an architecture: id, canonical name, owning
/// module and shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Decl {
    pub id: ParamId,
    pub name: String,
    pub module: String,
    pub kind: ParamKind,
    pub shape: [usize; 4],
}

impl Decl {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    PreAct(BasicBlock),
    Classic(BasicBlock),
    Feature(FeatureStep),
    Pool(PoolBlock),
}

impl Stage {
    fn convs(&self) -> Vec<ParamId> {
        let s = |l: &SchemeLayer| l.conv.id;
        match self {
            Stage::PreAct(b) | Stage::Classic(b) => vec![b.b.id, b.a.id],
            Stage::Feature(f) => vec![s(&f.a), s(&f.b)],
            Stage::Pool(PoolBlock::PreAct { r, b0, a, .. }) | Stage::Pool(PoolBlock::Classic { r, b0, a, .. }) => {
                vec![r.id, b0.id, a.id]
            }
            Stage::Pool(PoolBlock::Feature { pi, r, a_prev, a_next }) => vec![pi.id, r.id, s(a_prev), s(a_next)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Level {
    stages: Vec<Stage>,
    kernels: LevelKernels,
}

/// Layout and parameter inventory of a network, without values.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub spec: NetworkSpec,
    pub decls: Vec<Decl>,
    /// Channel count of each batch-normalization slot.
    pub bn_channels: Vec<usize>,
    stem_conv: Conv,
    stem_bn: Option<BnLayer>,
    levels: Vec<Level>,
    final_bn: Option<BnLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

struct Planner {
    decls: Vec<Decl>,
    bn_channels: Vec<usize>,
    bn: bool,
    norm: SchemeNorm,
}

impl Planner {
    fn decl(&mut self, module: &str, name: String, kind: ParamKind, shape: [usize; 4]) -> ParamId {
        let id = ParamId::fresh();
        self.decls.push(Decl { id, name, module: module.to_string(), kind, shape });
        id
    }

    fn conv(&mut self, module: &str, name: String, co: usize, ci: usize, k: usize, stride: usize) -> Conv {
        Conv { id: self.decl(module, name, ParamKind::ConvWeight, [co, ci, k, k]), stride }
    }

    fn bn(&mut self, module: &str, name: String, c: usize) -> Option<BnLayer> {
        if !self.bn {
            return None;
        }
        let gamma = self.decl(module, format!("{name}.gamma"), ParamKind::BnGamma, [1, c, 1, 1]);
        let beta = self.decl(module, format!("{name}.beta"), ParamKind::BnBeta, [1, c, 1, 1]);
        self.bn_channels.push(c);
        Some(BnLayer { gamma, beta, slot: self.bn_channels.len() - 1 })
    }

    fn scheme(&mut self, module: &str, name: String, form: SchemeForm, conv: Conv, c: usize) -> SchemeLayer {
        let (before, after) = match self.norm {
            SchemeNorm::BeforeActivation => (form.act_before(), form.act_after()),
            SchemeNorm::AfterConv => (false, true),
        };
        let bn_in = if before { self.bn(module, format!("{name}.bn_in"), c) } else { None };
        let bn_out = if after { self.bn(module, format!("{name}.bn_out"), c) } else { None };
        SchemeLayer { form, conv, bn_in, bn_out }
    }
}

impl Architecture {
    pub fn plan(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut p = Planner { decls: Vec::new(), bn_channels: Vec::new(), bn: spec.bn, norm: spec.scheme_norm };
        let c0 = spec.channels[0];
        let k = spec.stem.kernel();
        let stride = if spec.stem == StemKind::LargeImage { 2 } else { 1 };
        let stem_conv = Conv {
            id: p.decl("stem", "stem.conv".into(), ParamKind::ConvWeight, [c0, spec.stem.in_channels(), k, k]),
            stride,
        };
        let stem_bn = p.bn("stem", "stem.bn".into(), c0);

        let fb = spec.family == Family::FeatureBased;
        let j = spec.levels();

        // Kernel ids first, so pooling blocks can refer to the next level's A.
        let mut kernels = Vec::with_capacity(j);
        for l in 0..j {
            let c = spec.channels[l];
            let c_prev = if l == 0 { c0 } else { spec.channels[l - 1] };
            let opens_with_pool = !fb && l > 0;
            let module = format!("level{}", l + 1);
            let shared_a = spec.sharing.a == Share::PerLevel;
            let shared_b = spec.sharing.b == Share::PerLevel;
            let lk = LevelKernels::allocate(spec.sharing, spec.nu[l], opens_with_pool, |role, i| {
                let (name, shape) = match role {
                    KernelRole::A if shared_a => (format!("{module}.A"), [c, c, 3, 3]),
                    KernelRole::A => (format!("{module}.A{}", i + 1), [c, c, 3, 3]),
                    KernelRole::B0 => (format!("{module}.B0"), [c, c_prev, 3, 3]),
                    KernelRole::B if shared_b => (format!("{module}.B"), [c, c, 3, 3]),
                    KernelRole::B => {
                        let slot = if opens_with_pool { i + 2 } else { i + 1 };
                        (format!("{module}.B{slot}"), [c, c, 3, 3])
                    }
                };
                p.decl(&module, name, ParamKind::ConvWeight, shape)
            });
            kernels.push(lk);
        }

        let mut levels = Vec::with_capacity(j);
        for l in 0..j {
            let c = spec.channels[l];
            let c_prev = if l == 0 { c0 } else { spec.channels[l - 1] };
            let module = format!("level{}", l + 1);
            let lk = &kernels[l];
            let mut stages = Vec::new();
            for i in 1..=spec.nu[l] {
                let (a, b) = resolve_sharing(spec.sharing, lk, i)?;
                let tag = format!("{module}.block{i}");
                if fb {
                    let a = p.scheme(&module, format!("{tag}.A"), spec.a_form, Conv { id: a, stride: 1 }, c);
                    let b = p.scheme(&module, format!("{tag}.B"), spec.b_form, Conv { id: b, stride: 1 }, c);
                    stages.push(Stage::Feature(FeatureStep { a, b }));
                } else if i == 1 && l > 0 {
                    let r = p.conv(&module, format!("{module}.pool.R"), c, c_prev, 1, 2);
                    let b0 = Conv { id: b, stride: 2 };
                    let a_id = if spec.pooling == PoolingVariant::PreActPool && spec.sharing.a == Share::PerLevel {
                        p.decl(&module, format!("{module}.pool.A"), ParamKind::ConvWeight, [c, c, 3, 3])
                    } else {
                        a
                    };
                    let a = Conv { id: a_id, stride: 1 };
                    let blk = match spec.family {
                        Family::PreAct => PoolBlock::PreAct {
                            r,
                            b0,
                            a,
                            bn1: p.bn(&module, format!("{tag}.bn1"), c_prev),
                            bn2: p.bn(&module, format!("{tag}.bn2"), c),
                        },
                        _ => PoolBlock::Classic {
                            r,
                            b0,
                            a,
                            bn_b: p.bn(&module, format!("{tag}.bn1"), c),
                            bn_a: p.bn(&module, format!("{tag}.bn2"), c),
                            bn_r: p.bn(&module, format!("{tag}.bn_r"), c),
                        },
                    };
                    stages.push(Stage::Pool(blk));
                } else {
                    let blk = BasicBlock {
                        a: Conv { id: a, stride: 1 },
                        b: Conv { id: b, stride: 1 },
                        bn1: p.bn(&module, format!("{tag}.bn1"), c),
                        bn2: p.bn(&module, format!("{tag}.bn2"), c),
                    };
                    stages.push(if spec.family == Family::PreAct { Stage::PreAct(blk) } else { Stage::Classic(blk) });
                }
            }
            if fb && l + 1 < j {
                let c_next = spec.channels[l + 1];
                let next = format!("level{}", l + 2);
                let pi = p.conv(&next, format!("{next}.pool.Pi"), c_next, c, 3, 2);
                let r = p.conv(&next, format!("{next}.pool.R"), c_next, c, 3, 2);
                let (a_last, _) = resolve_sharing(spec.sharing, lk, spec.nu[l])?;
                let (a_first, _) = resolve_sharing(spec.sharing, &kernels[l + 1], 1)?;
                let a_prev =
                    p.scheme(&next, format!("{next}.pool.A_prev"), spec.a_form, Conv { id: a_last, stride: 1 }, c);
                let a_next =
                    p.scheme(&next, format!("{next}.pool.A_next"), spec.a_form, Conv { id: a_first, stride: 1 }, c_next);
                stages.push(Stage::Pool(PoolBlock::Feature { pi, r, a_prev, a_next }));
            }
            levels.push(Level { stages, kernels: lk.clone() });
        }

        let c_last = spec.channels[j - 1];
        let final_bn = if spec.family != Family::Classic { p.bn("head", "head.bn".into(), c_last) } else { None };
        let head_w = p.decl("head", "head.weight".into(), ParamKind::LinearWeight, [spec.num_classes, c_last, 1, 1]);
        let head_b = p.decl("head", "head.bias".into(), ParamKind::LinearBias, [1, spec.num_classes, 1, 1]);

        Ok(Architecture {
            spec: spec.clone(),
            decls: p.decls,
            bn_channels: p.bn_channels,
            stem_conv,
            stem_bn,
            levels,
            final_bn,
            head_w,
            head_b,
        })
    }

    pub fn num_params(&self) -> usize {
        self.decls.iter().map(Decl::len).sum()
    }

    pub fn decl(&self, id: ParamId) -> Option<&Decl> {
        self.decls.iter().find(|d| d.id == id)
    }

    pub fn summary(&self) -> ModelSummary {
        let mut modules: BTreeMap<String, usize> = BTreeMap::new();
        let mut order = Vec::new();
        for d in &self.decls {
            if !modules.contains_key(&d.module) {
                order.push(d.module.clone());
            }
            *modules.entry(d.module.clone()).or_default() += d.len();
        }
        let per_module = order.into_iter().map(|m| (m.clone(), modules[&m])).collect();

        let mut levels = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            let mut uses: BTreeMap<ParamId, usize> = BTreeMap::new();
            for st in &level.stages {
                for id in st.convs() {
                    *uses.entry(id).or_default() += 1;
                }
            }
            let kernels = uses
                .into_iter()
                .filter_map(|(id, n)| {
                    self.decl(id).map(|d| KernelEntry { name: d.name.clone(), shape: d.shape, uses: n })
                })
                .collect();
            levels.push(LevelInventory { level: l + 1, blocks: self.spec.nu[l], kernels });
        }
        ModelSummary { total: self.num_params(), per_module, levels }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Number of convolution sites using this kernel; above one means shared.
    pub uses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelInventory {
    pub level: usize,
    pub blocks: usize,
    pub kernels: Vec<KernelEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub total: usize,
    pub per_module: Vec<(String, usize)>,
    pub levels: Vec<LevelInventory>,
}

/// Parameter count of a spec, without allocating weights.
pub fn count_spec(spec: &NetworkSpec) -> Result<ModelSummary> {
    Ok(Architecture::plan(spec)?.summary())
}

/// A network with parameter values and batch-normalization running statistics.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
    pub running: Vec<RunningStats<T>>,
}

impl<T: Scalar> Model<T> {
    /// Kaiming-normal convolutions, unit/zero batch-norm affine, and a
    /// uniform `±1/√fan_in` head.
    pub fn build<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let arch = Architecture::plan(spec)?;
        let mut store = ParamStore::new();
        for d in &arch.decls {
            let v = match d.kind {
                ParamKind::ConvWeight => {
                    let fan_in = (d.shape[1] * d.shape[2] * d.shape[3]) as f64;
                    Tensor4::random_normal(d.shape, (2.0 / fan_in).sqrt(), rng)
                }
                ParamKind::BnGamma => Tensor4::filled(d.shape, T::one()),
                ParamKind::BnBeta => Tensor4::zeros(d.shape),
                ParamKind::LinearWeight | ParamKind::LinearBias => {
                    let bound = 1.0 / (spec.channels[spec.levels() - 1] as f64).sqrt();
                    Tensor4::random_uniform(d.shape, -bound, bound, rng)
                }
            };
            store.insert_at(d.id, d.name.clone(), d.kind, v);
        }
        let running = arch.bn_channels.iter().map(|&c| RunningStats::new(c)).collect();
        Ok(Model { arch, store, running })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.arch.spec
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn summary(&self) -> ModelSummary {
        self.arch.summary()
    }

    /// A fresh forward context over this model's parameters.
    pub fn forward_context(&self, mode: BnMode) -> Forward<'_, T> {
        Forward::new(&self.store, &self.running, mode)
    }

    /// Records the forward pass of `x` on `fw` and returns the logits.
    pub fn forward(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let spec = &self.arch.spec;
        if spec.stem == StemKind::LargeImage {
            return Err(Error::config("the 7x7 large-image stem is available for counting only"));
        }
        let shape = fw.value(x).shape();
        if shape[1] != spec.stem.in_channels() {
            return Err(Error::shape(format!(
                "input has {} channels, the stem expects {}",
                shape[1],
                spec.stem.in_channels()
            )));
        }
        let h = fw.conv(x, &self.arch.stem_conv)?;
        let h = fw.bn(h, self.arch.stem_bn.as_ref())?;
        let h = fw.relu(h);

        let mut stream = if spec.family == Family::FeatureBased {
            let u = fw.input(Tensor4::zeros(fw.value(h).shape()));
            Stream::Feature { u, f: h }
        } else {
            Stream::Residual(h)
        };
        for level in &self.arch.levels {
            for st in &level.stages {
                stream = match (st, stream) {
                    (Stage::PreAct(b), Stream::Residual(r)) => Stream::Residual(preact_block(fw, r, b)?),
                    (Stage::Classic(b), Stream::Residual(r)) => Stream::Residual(classic_block(fw, r, b)?),
                    (Stage::Feature(s), Stream::Feature { u, f }) => Stream::Feature { u: feature_block(fw, u, f, s)?, f },
                    (Stage::Pool(p), s) => pool_block(fw, s, p)?,
                    _ => return Err(Error::State("block does not match the stream it receives".into())),
                };
            }
        }
        let out = match stream {
            Stream::Residual(r) => r,
            Stream::Feature { u, .. } => u,
        };
        let out = match &self.arch.final_bn {
            Some(bn) => {
                let h = fw.bn(out, Some(bn))?;
                fw.relu(h)
            }
            None if spec.family == Family::PreAct => fw.relu(out),
            None => out,
        };
        let pooled = fw.tape.global_avg_pool(out);
        let w = fw.param(self.arch.head_w)?;
        let b = fw.param(self.arch.head_b)?;
        fw.tape.linear(pooled, w, Some(b))
    }

    /// Logits for a batch. Train mode folds the batch statistics into the
    /// running estimates.
    pub fn logits(&mut self, x: &Tensor4<T>, mode: BnMode) -> Result<Tensor4<T>> {
        let (out, stats) = {
            let mut fw = self.forward_context(mode);
            let xv = fw.input(x.clone());
            let y = self.forward(&mut fw, xv)?;
            (fw.value(y).clone(), std::mem::take(&mut fw.batch_stats))
        };
        self.apply_batch_stats(&stats);
        Ok(out)
    }

    /// Eval-mode logits without mutating the model.
    pub fn eval_logits(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut fw = self.forward_context(BnMode::Eval);
        let xv = fw.input(x.clone());
        let y = self.forward(&mut fw, xv)?;
        Ok(fw.value(y).clone())
    }

    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        for (slot, s) in stats {
            self.running[*slot].update(s);
        }
    }

    /// Predicted class per sample, evaluated in chunks of `chunk` samples.
    pub fn predict(&self, x: &Tensor4<T>, chunk: usize) -> Result<Vec<usize>> {
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(x.n);
        let mut start = 0;
        while start < x.n {
            let end = (start + chunk).min(x.n);
            let logits = self.eval_logits(&x.slice_batch(start, end)?)?;
            let k = logits.sample_len();
            for row in logits.data().chunks(k) {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                out.push(best);
            }
            start = end;
        }
        Ok(out)
    }

    /// Ids of the level's `A` and `B` kernels for block `i` (1-based).
    pub fn block_kernels(&self, level: usize, i: usize) -> Result<(ParamId, ParamId)> {
        let lv = self
            .arch
            .levels
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::OutOfRange(format!("level {level}")))?;
        resolve_sharing(self.arch.spec.sharing, &lv.kernels, i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn printed_rounding() {
        assert!(matches_printed(11_173_962, "11M").unwrap());
        assert!(matches_printed(8_086_692, "8.1M").unwrap());
        assert!(!matches_printed(8_040_522, "8.1M").unwrap());
        assert!(matches_printed(11_689_512, "11.7M").unwrap());
        assert!(matches_printed(270_000, "270K").unwrap());
        assert!(matches_printed(1, "x").is_err());
    }

    #[test]
    fn presets_parse() {
        let s = preset("resnet18-Al-Bli-cifar10").unwrap();
        assert_eq!(s.family, Family::Classic);
        assert_eq!(s.sharing, SharingPolicy::new(Share::PerLevel, Share::PerLayer));
        let s = preset("preact-resnet34-Ali-Bl-cifar100-desk").unwrap();
        assert_eq!(s.nu, NU_34);
        assert_eq!(s.channels, DESK_WIDTHS);
        assert_eq!(s.num_classes, 100);
        assert_eq!(s.pooling, PoolingVariant::PreActPool);
        let s = preset("fbresnet18-K-sKs-cifar10").unwrap();
        assert_eq!((s.a_form, s.b_form), (SchemeForm::ConvOnly, SchemeForm::Sandwich));
        assert!(preset("resnet50-Al-Bl-cifar10").is_err());
        assert!(preset("fbresnet18-K-sKs-mnist").is_err());
    }

    #[test]
    fn validation_rules() {
        let mut s = NetworkSpec::preact(&[1, 1], &[4], SharingPolicy::NONE, 10);
        assert!(s.validate().is_err());
        s.channels = vec![4, 8];
        assert!(s.validate().is_ok());
        s.pooling = PoolingVariant::AppendixPool;
        assert!(matches!(s.validate(), Err(Error::Config(m)) if m.contains("per-level A")));
        let mut f = NetworkSpec::feature_based(&[1], &[4], SchemeForm::ConvOnly, SchemeForm::Sandwich, 10);
        f.sharing.b = Share::PerLevel;
        assert!(f.validate().is_err());
    }

    #[test]
    fn eighteen_layer_counts() {
        let s = preset("resnet18-Ali-Bli-cifar10").unwrap();
        assert_eq!(count_spec(&s).unwrap().total, 11_173_962);
        let s = preset("resnet18-Al-Bli-cifar10").unwrap();
        assert_eq!(count_spec(&s).unwrap().total, 8_040_522);
    }

    #[test]
    fn smoke_forward_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for family in [Family::PreAct, Family::Classic, Family::FeatureBased] {
            let spec = match family {
                Family::PreAct => NetworkSpec::preact(&[1], &[4], SharingPolicy::NONE, 5),
                Family::Classic => NetworkSpec::classic(&[1], &[4], SharingPolicy::NONE, 5),
                Family::FeatureBased => {
                    NetworkSpec::feature_based(&[1], &[4], SchemeForm::ConvOnly, SchemeForm::Sandwich, 5)
                }
            };
            let mut m = Model::<f32>::build(&spec, &mut rng).unwrap();
            let x = Tensor4::randn([1, 3, 8, 8], &mut rng);
            assert_eq!(m.logits(&x, BnMode::Train).unwrap().shape(), [1, 5, 1, 1]);
        }
    }
}
