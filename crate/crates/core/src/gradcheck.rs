//! Central finite-difference checks of the tape's gradients in `f64`.
//!
//! The error of one gradient tensor is `max |analytic − numeric|` divided by
//! `max(largest |entry| of either, SCALE_FLOOR)`, so gradients that vanish
//! identically are held to an absolute bound instead of dividing noise by
//! noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops;
use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SCALE_FLOOR: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub inputs: usize,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub step: f64,
    pub tolerance: f64,
    pub checks: Vec<GradCheck>,
    pub max_rel_error: f64,
    pub pass: bool,
}

impl GradReport {
    fn new(step: f64, tolerance: f64, checks: Vec<GradCheck>) -> Self {
        let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        let pass = checks.iter().all(|c| c.max_rel_error < tolerance);
        GradReport { step, tolerance, checks, max_rel_error, pass }
    }
}

/// A differentiable function of some tensors, recorded on a tape.
pub trait Graph: Sync {
    fn inputs(&self) -> &[Tensor4<f64>];
    fn record(&self, tape: &mut Tape<f64>, inputs: &[Var]) -> Result<Var>;
}

fn reduce(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let v = tape.value(out);
    if v.len() == 1 {
        return Ok(out);
    }
    let w = Tensor4::randn(v.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
    tape.dot(out, w)
}

fn eval<G: Graph + ?Sized>(g: &G, inputs: &[Tensor4<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = g.record(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out, 0xD07)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares the tape gradient of every input entry with a central difference.
pub fn check<G: Graph + ?Sized>(name: &str, g: &G, step: f64) -> Result<GradCheck> {
    let inputs = g.inputs();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = g.record(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out, 0xD07)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut entries = 0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = match grads.wrt(vars[k]) {
            Some(a) => a.clone(),
            None => Tensor4::zeros(t.shape()),
        };
        let numeric: Vec<f64> = par::map_range(t.len(), |i| -> Result<f64> {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] = t.data()[i] + step;
            let up = eval(g, &shifted)?;
            shifted[k].data_mut()[i] = t.data()[i] - step;
            let down = eval(g, &shifted)?;
            Ok((up - down) / (2.0 * step))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let scale = analytic.max_abs().max(numeric.iter().fold(0.0, |m, v| m.max(v.abs()))).max(SCALE_FLOOR);
        let diff = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        worst = worst.max(diff / scale);
        entries += t.len();
    }
    if !worst.is_finite() {
        return Err(Error::NonFinite(format!("gradient check {name}")));
    }
    Ok(GradCheck { name: name.into(), inputs: inputs.len(), entries, max_rel_error: worst })
}

type RecordFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync;

/// A graph given by a closure.
pub struct FnGraph {
    inputs: Vec<Tensor4<f64>>,
    f: Box<RecordFn>,
}

impl FnGraph {
    pub fn new(inputs: Vec<Tensor4<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync + 'static) -> Self {
        FnGraph { inputs, f: Box::new(f) }
    }
}

impl Graph for FnGraph {
    fn inputs(&self) -> &[Tensor4<f64>] {
        &self.inputs
    }

    fn record(&self, tape: &mut Tape<f64>, inputs: &[Var]) -> Result<Var> {
        (self.f)(tape, inputs)
    }
}

/// One graph per tape operator, with randomly drawn inputs.
pub fn operator_graphs(seed: u64) -> Vec<(&'static str, FnGraph)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: [usize; 4]| Tensor4::<f64>::randn(s, &mut rng);
    let x = r([2, 3, 6, 6]);
    let gamma = r([1, 3, 1, 1]);
    let beta = r([1, 3, 1, 1]);
    let mean: Vec<f64> = r([1, 3, 1, 1]).into_vec();
    let var: Vec<f64> = r([1, 3, 1, 1]).into_vec().iter().map(|v| v * v + 0.5).collect();
    let labels = vec![1usize, 3];
    let mut out: Vec<(&'static str, FnGraph)> = vec![
        ("conv2d stride 1", FnGraph::new(vec![x.clone(), r([4, 3, 3, 3])], |t, v| t.conv2d(v[0], v[1], 1))),
        ("conv2d stride 2", FnGraph::new(vec![x.clone(), r([2, 3, 3, 3])], |t, v| t.conv2d(v[0], v[1], 2))),
        ("conv2d 1x1 stride 2", FnGraph::new(vec![x.clone(), r([2, 3, 1, 1])], |t, v| t.conv2d(v[0], v[1], 2))),
        ("relu", FnGraph::new(vec![x.clone()], |t, v| Ok(t.relu(v[0])))),
        ("add", FnGraph::new(vec![x.clone(), r([2, 3, 6, 6])], |t, v| t.add(v[0], v[1]))),
        ("sub", FnGraph::new(vec![x.clone(), r([2, 3, 6, 6])], |t, v| t.sub(v[0], v[1]))),
        ("scale", FnGraph::new(vec![x.clone()], |t, v| Ok(t.scale(v[0], -1.7)))),
        (
            "batchnorm train",
            FnGraph::new(vec![x.clone(), gamma.clone(), beta.clone()], |t, v| {
                Ok(t.batchnorm_train(v[0], v[1], v[2], EPS)?.0)
            }),
        ),
        (
            "batchnorm eval",
            FnGraph::new(vec![x.clone(), gamma, beta], move |t, v| t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, EPS)),
        ),
        ("subsample", FnGraph::new(vec![x.clone()], |t, v| Ok(t.subsample(v[0])))),
        ("global average pool", FnGraph::new(vec![x.clone()], |t, v| Ok(t.global_avg_pool(v[0])))),
        (
            "linear",
            FnGraph::new(vec![r([2, 3, 1, 1]), r([5, 3, 1, 1]), r([1, 5, 1, 1])], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        ),
        ("linear without bias", FnGraph::new(vec![r([2, 12, 1, 1]), r([4, 12, 1, 1])], |t, v| t.linear(v[0], v[1], None))),
        ("cross entropy", FnGraph::new(vec![r([2, 5, 1, 1])], move |t, v| t.cross_entropy(v[0], &labels))),
    ];
    let w = r([2, 3, 6, 6]);
    out.push(("dot", FnGraph::new(vec![x.clone()], move |t, v| t.dot(v[0], w.clone()))));
    out.push((
        "shared kernel",
        FnGraph::new(vec![x, r([3, 3, 3, 3])], |t, v| {
            let h = t.conv2d(v[0], v[1], 1)?;
            let h = t.relu(h);
            t.conv2d(h, v[1], 1)
        }),
    ));
    out
}

#[derive(Clone, Debug)]
enum Step {
    Conv { kernel: usize, stride: usize },
    Relu,
    Skip { with: usize, subtract: bool },
    Scale(f64),
    BnTrain { gamma: usize, beta: usize },
    BnEval { gamma: usize, beta: usize, mean: Vec<f64>, var: Vec<f64> },
    Subsample,
}

/// A random chain of operators with skip connections and kernel reuse,
/// ending in a linear head with cross-entropy or a random projection.
#[derive(Clone, Debug)]
pub struct Composite {
    inputs: Vec<Tensor4<f64>>,
    steps: Vec<Step>,
    head: Option<(usize, usize, Vec<usize>)>,
}

impl Composite {
    pub fn random(depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c0 = rng.random_range(1..=3);
        let side = if rng.random_bool(0.5) { 4 } else { 6 };
        let mut inputs = vec![Tensor4::randn([2, c0, side, side], &mut rng)];
        let mut shapes = vec![inputs[0].shape()];
        let mut kernels: Vec<(usize, [usize; 4])> = Vec::new();
        let mut steps = Vec::with_capacity(depth);
        for _ in 0..depth {
            let cur = *shapes.last().unwrap();
            let same: Vec<usize> = (0..shapes.len() - 1).filter(|&i| shapes[i] == cur).collect();
            let step = match rng.random_range(0..8) {
                0 | 1 => {
                    let stride = if cur[2] >= 4 && cur[2] % 2 == 0 && rng.random_bool(0.3) { 2 } else { 1 };
                    let c_out = rng.random_range(1..=3);
                    let shape = [c_out, cur[1], 3, 3];
                    let reuse = kernels.iter().find(|(_, s)| *s == shape).map(|(i, _)| *i);
                    let kernel = match reuse {
                        Some(i) if rng.random_bool(0.7) => i,
                        _ => {
                            inputs.push(Tensor4::randn(shape, &mut rng).scale(0.5));
                            kernels.push((inputs.len() - 1, shape));
                            inputs.len() - 1
                        }
                    };
                    Step::Conv { kernel, stride }
                }
                2 => Step::Relu,
                3 if !same.is_empty() => {
                    Step::Skip { with: same[rng.random_range(0..same.len())], subtract: rng.random_bool(0.5) }
                }
                4 => Step::Scale(rng.random_range(-2.0..2.0)),
                5 | 6 => {
                    let c = cur[1];
                    inputs.push(Tensor4::random_uniform([1, c, 1, 1], 0.5, 1.5, &mut rng));
                    inputs.push(Tensor4::randn([1, c, 1, 1], &mut rng));
                    let (gamma, beta) = (inputs.len() - 2, inputs.len() - 1);
                    if rng.random_bool(0.5) && cur[2] * cur[3] > 1 {
                        Step::BnTrain { gamma, beta }
                    } else {
                        let mean = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
                        let var = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
                        Step::BnEval { gamma, beta, mean, var }
                    }
                }
                7 if cur[2] >= 2 => Step::Subsample,
                _ => Step::Relu,
            };
            let next = match &step {
                Step::Conv { kernel, stride } => {
                    let oh = ops::conv_out_dim(cur[2], 3, *stride, 1);
                    [cur[0], inputs[*kernel].n, oh, ops::conv_out_dim(cur[3], 3, *stride, 1)]
                }
                Step::Subsample => [cur[0], cur[1], cur[2].div_ceil(2), cur[3].div_ceil(2)],
                _ => cur,
            };
            shapes.push(next);
            steps.push(step);
        }
        let head = if rng.random_bool(0.5) {
            let c = shapes.last().unwrap()[1];
            let k = rng.random_range(2..=4);
            inputs.push(Tensor4::randn([k, c, 1, 1], &mut rng));
            inputs.push(Tensor4::randn([1, k, 1, 1], &mut rng));
            let labels = (0..2).map(|_| rng.random_range(0..k)).collect();
            Some((inputs.len() - 2, inputs.len() - 1, labels))
        } else {
            None
        };
        Composite { inputs, steps, head }
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }
}

impl Graph for Composite {
    fn inputs(&self) -> &[Tensor4<f64>] {
        &self.inputs
    }

    fn record(&self, t: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
        let mut nodes = vec![v[0]];
        for s in &self.steps {
            let cur = *nodes.last().unwrap();
            let next = match s {
                Step::Conv { kernel, stride } => t.conv2d(cur, v[*kernel], *stride)?,
                Step::Relu => t.relu(cur),
                Step::Skip { with, subtract: false } => t.add(cur, nodes[*with])?,
                Step::Skip { with, subtract: true } => t.sub(cur, nodes[*with])?,
                Step::Scale(a) => t.scale(cur, *a),
                Step::BnTrain { gamma, beta } => t.batchnorm_train(cur, v[*gamma], v[*beta], EPS)?.0,
                Step::BnEval { gamma, beta, mean, var } => t.batchnorm_eval(cur, v[*gamma], v[*beta], mean, var, EPS)?,
                Step::Subsample => t.subsample(cur),
            };
            nodes.push(next);
        }
        let out = *nodes.last().unwrap();
        match &self.head {
            Some((w, b, labels)) => {
                let p = t.global_avg_pool(out);
                let logits = t.linear(p, v[*w], Some(v[*b]))?;
                t.cross_entropy(logits, labels)
            }
            None => Ok(out),
        }
    }
}

/// Every operator, then `composites` random graphs of depth `1..=max_depth`.
pub fn run_suite(composites: usize, max_depth: usize, seed: u64, step: f64, tolerance: f64) -> Result<GradReport> {
    if max_depth == 0 {
        return Err(Error::config("composite depth must be at least 1"));
    }
    let mut checks = Vec::new();
    for (name, g) in operator_graphs(seed) {
        checks.push(check(name, &g, step)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
    for i in 0..composites {
        let depth = rng.random_range(1..=max_depth);
        let g = Composite::random(depth, seed.wrapping_add(1000 + i as u64));
        checks.push(check(&format!("composite {} (depth {depth})", i + 1), &g, step)?);
    }
    Ok(GradReport::new(step, tolerance, checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x·x recorded as a product the tape does not know: the
        // "analytic" side sees only the first factor.
        let x = Tensor4::filled([1, 1, 1, 2], 1.5);
        let g = FnGraph::new(vec![x.clone()], move |t, v| {
            let fixed = t.value(v[0]).clone();
            t.dot(v[0], fixed)
        });
        assert!(check("x.x", &g, STEP).unwrap().max_rel_error > 0.4);
    }

    #[test]
    fn operators_pass() {
        for (name, g) in operator_graphs(1) {
            let c = check(name, &g, STEP).unwrap();
            assert!(c.max_rel_error < TOLERANCE, "{name}: {}", c.max_rel_error);
        }
    }

    #[test]
    fn composites_respect_depth() {
        for d in 1..=6 {
            assert_eq!(Composite::random(d, d as u64).depth(), d);
        }
    }
}
