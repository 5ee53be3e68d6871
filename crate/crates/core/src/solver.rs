//! Numerical experiments on the iterative schemes: lockstep equivalence of the
//! feature and residual iterations, Richardson convergence against the
//! spectral bound, constraint preservation, and the one-pixel comparison of
//! subsampling against strided convolution.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops::{self, conv_out_dim, padding_for};
use crate::par;
use crate::param::KernelParam;
use crate::scheme::{constrained_feature_step, residual_step, SchemeOp, Sign};
use crate::tensor::Tensor4;

/// Largest number of unknowns accepted by [`assemble_matrix`].
pub const MAX_UNKNOWNS: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub steps: usize,
    pub max_abs_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Runs the constrained feature iteration and the residual iteration side by
/// side from `u⁰ = 0`, `r⁰ = f` and reports the largest `‖rⁱ − (f − A∗uⁱ)‖∞`.
pub fn verify_theorem1(
    a: &KernelParam<f64>,
    bs: &[KernelParam<f64>],
    f: &Tensor4<f64>,
    tol: f64,
) -> Result<EquivalenceReport> {
    if a.stride != 1 || a.c_in() != a.c_out() {
        return Err(Error::config("the data operator must be a square stride-1 kernel"));
    }
    let op = SchemeOp::linear(a.clone());
    let mut u = Tensor4::zeros(f.shape());
    let mut r = f.clone();
    let mut gap = r.max_abs_diff(&f.sub(&a.apply(&u)?)?)?;
    for b in bs {
        u = constrained_feature_step(&u, f, &op, b)?;
        r = residual_step(&r, a, b, Sign::Analytic)?;
        gap = gap.max(r.max_abs_diff(&f.sub(&a.apply(&u)?)?)?);
    }
    Ok(EquivalenceReport { steps: bs.len(), max_abs_gap: gap, tolerance: tol, pass: gap < tol })
}

/// Dense matrix of the convolution on an `h × w` grid, assembled entry by
/// entry from the stencil. Unknowns are flattened channel-major.
pub fn assemble_matrix(a: &KernelParam<f64>, h: usize, w: usize) -> Result<DMatrix<f64>> {
    let k = a.size();
    let s = a.stride;
    let p = padding_for(k);
    let (ho, wo) = (conv_out_dim(h, k, s, p), conv_out_dim(w, k, s, p));
    let rows = a.c_out() * ho * wo;
    let cols = a.c_in() * h * w;
    if rows.max(cols) > MAX_UNKNOWNS {
        return Err(Error::config(format!(
            "{rows}x{cols} operator exceeds the {MAX_UNKNOWNS}-unknown limit for dense assembly"
        )));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for co in 0..a.c_out() {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (co * ho + oy) * wo + ox;
                for ci in 0..a.c_in() {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let col = (ci * h + iy as usize) * w + ix as usize;
                            m[(row, col)] += a.weight.at(co, ci, ky, kx);
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Largest eigenvalue of `MᵀM`.
pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    let s = m.clone().svd(false, false).singular_values;
    let top = s.iter().cloned().fold(0.0, f64::max);
    top * top
}

/// Smallest singular value, used to certify invertibility.
pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Largest difference between `M·vec(x)` and `vec(conv(x))` over random inputs.
pub fn matrix_action_gap(a: &KernelParam<f64>, h: usize, w: usize, trials: usize, seed: u64) -> Result<f64> {
    let m = assemble_matrix(a, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gap = 0.0f64;
    for _ in 0..trials {
        let x = Tensor4::<f64>::randn([1, a.c_in(), h, w], &mut rng);
        let y = a.apply(&x)?;
        let v = DMatrix::from_column_slice(x.len(), 1, x.data());
        let mv = &m * v;
        for (p, q) in mv.iter().zip(y.data()) {
            gap = gap.max((p - q).abs());
        }
    }
    Ok(gap)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceTrace {
    /// `‖f − A∗uⁱ‖₂` for `i = 0..=steps`.
    pub residual_norms: Vec<f64>,
    pub monotone: bool,
}

impl ConvergenceTrace {
    fn new(residual_norms: Vec<f64>) -> Self {
        let monotone = residual_norms.windows(2).all(|w| w[1] <= w[0]);
        ConvergenceTrace { residual_norms, monotone }
    }
}

/// `uⁱ = uⁱ⁻¹ + B∗(f − A∗uⁱ⁻¹)` from `u⁰ = 0` with a fixed `B`.
pub fn run_plain_iteration(
    a: &KernelParam<f64>,
    b: &KernelParam<f64>,
    f: &Tensor4<f64>,
    steps: usize,
) -> Result<ConvergenceTrace> {
    let mut u = Tensor4::zeros(f.shape());
    let mut norms = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let r = f.sub(&a.apply(&u)?)?;
        norms.push(r.norm2());
        if i < steps {
            u.add_assign(&b.apply(&r)?)?;
        }
    }
    Ok(ConvergenceTrace::new(norms))
}

/// `ω·Aᵀ` realized as a kernel.
pub fn richardson_kernel(a: &KernelParam<f64>, omega: f64) -> Result<KernelParam<f64>> {
    Ok(a.adjoint()?.scaled(omega))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstrainedTrace {
    pub residual_norms: Vec<f64>,
    /// Smallest entry of `uⁱ` for `i = 0..=steps`.
    pub min_entries: Vec<f64>,
    pub nonnegative: bool,
}

/// Constrained iteration from `u⁰ = 0`, one step per kernel in `bs`.
pub fn run_constrained_iteration(
    a: &KernelParam<f64>,
    bs: &[KernelParam<f64>],
    f: &Tensor4<f64>,
) -> Result<(ConstrainedTrace, Tensor4<f64>)> {
    let op = SchemeOp::linear(a.clone());
    let mut u = Tensor4::zeros(f.shape());
    let mut norms = vec![f.norm2()];
    let mut mins = vec![0.0];
    for b in bs {
        u = constrained_feature_step(&u, f, &op, b)?;
        norms.push(f.sub(&a.apply(&u)?)?.norm2());
        mins.push(u.min());
    }
    let nonnegative = mins.iter().all(|&m| m >= 0.0);
    Ok((ConstrainedTrace { residual_norms: norms, min_entries: mins, nonnegative }, u))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PixelReport {
    pub n: usize,
    /// `‖S(r)‖∞` for the one-pixel residual.
    pub subsampled_max_abs: f64,
    /// Entry of the all-ones stride-2 convolution at output `(0, 0)`.
    pub strided_entry: f64,
    /// `‖B∗R∗S(r)‖∞` for random `B`, `R`.
    pub subsample_path_max_abs: f64,
    pub pass: bool,
}

/// One-pixel residual on an `n × n` grid with its single unit entry at
/// 0-based `(1, 1)`: subsampling loses it, a learned stride-2 kernel keeps it.
pub fn pixel_experiment(n: usize, seed: u64) -> Result<PixelReport> {
    if n < 4 || !n.is_multiple_of(2) {
        return Err(Error::Precondition(format!("grid size must be even and at least 4, got {n}")));
    }
    let mut r = Tensor4::<f64>::zeros([1, 1, n, n]);
    r.set(0, 0, 1, 1, 1.0);
    let s = ops::subsample(&r);
    let ones = KernelParam::new(Tensor4::filled([1, 1, 3, 3], 1.0), 2)?;
    let strided = ones.apply(&r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rk = KernelParam::new(Tensor4::randn([2, 1, 3, 3], &mut rng), 1)?;
    let bk = KernelParam::new(Tensor4::randn([2, 2, 3, 3], &mut rng), 1)?;
    let path = bk.apply(&rk.apply(&s)?)?;
    let report = PixelReport {
        n,
        subsampled_max_abs: s.max_abs(),
        strided_entry: strided.at(0, 0, 0, 0),
        subsample_path_max_abs: path.max_abs(),
        pass: false,
    };
    let pass = report.subsampled_max_abs == 0.0 && report.strided_entry != 0.0 && report.subsample_path_max_abs == 0.0;
    Ok(PixelReport { pass, ..report })
}

/// Identity plus a small random perturbation: diagonally dominant.
pub fn perturbed_identity(channels: usize, scale: f64, rng: &mut impl Rng) -> Result<KernelParam<f64>> {
    let mut w = Tensor4::<f64>::randn([channels, channels, 3, 3], rng).scale(scale / (9.0 * channels as f64).sqrt());
    for c in 0..channels {
        let v = w.at(c, c, 1, 1);
        w.set(c, c, 1, 1, v + 1.0);
    }
    KernelParam::new(w, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem1Trial {
    pub seed: u64,
    pub channels: usize,
    pub grid: usize,
    pub steps: usize,
    pub sigma_min: f64,
    pub max_abs_gap: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem1Sweep {
    pub tolerance: f64,
    pub trials: Vec<Theorem1Trial>,
    pub max_abs_gap: f64,
    pub pass: bool,
}

/// Randomized lockstep trials: perturbed-identity `A`, random `B`s, `f ≥ 0`,
/// grid up to 16, up to 4 channels and 20 steps. Invertibility of `A` is
/// certified by the smallest singular value of its assembled matrix.
pub fn theorem1_sweep(trials: usize, seed: u64, tol: f64) -> Result<Theorem1Sweep> {
    let runs = par::map_range(trials, |t| -> Result<Theorem1Trial> {
        let s = seed.wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let channels = rng.random_range(1..=4);
        let grid = rng.random_range(4..=16);
        let steps = rng.random_range(1..=20);
        let a = perturbed_identity(channels, 0.1, &mut rng)?;
        let sm = sigma_min(&assemble_matrix(&a, grid, grid)?);
        let bs: Vec<_> = (0..steps)
            .map(|_| KernelParam::new(Tensor4::randn([channels, channels, 3, 3], &mut rng).scale(0.3), 1))
            .collect::<Result<_>>()?;
        let f = Tensor4::random_uniform([1, channels, grid, grid], 0.0, 1.0, &mut rng);
        let rep = verify_theorem1(&a, &bs, &f, tol)?;
        Ok(Theorem1Trial {
            seed: s,
            channels,
            grid,
            steps,
            sigma_min: sm,
            max_abs_gap: rep.max_abs_gap,
            pass: rep.pass && sm > 1e-8,
        })
    });
    let trials = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let max_abs_gap = trials.iter().map(|t| t.max_abs_gap).fold(0.0, f64::max);
    let pass = trials.iter().all(|t| t.pass);
    Ok(Theorem1Sweep { tolerance: tol, trials, max_abs_gap, pass })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RichardsonTrial {
    pub seed: u64,
    pub lambda_max: f64,
    pub omega: f64,
    /// Whether `ω < 2/λ_max`.
    pub predicted_convergent: bool,
    pub monotone: bool,
    pub first_norm: f64,
    pub last_norm: f64,
    pub agrees: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RichardsonSweep {
    pub trials: Vec<RichardsonTrial>,
    pub pass: bool,
}

/// For each trial, runs `B = ω·Aᵀ` with `ω = 1/λ_max` and with `ω = 4/λ_max`
/// and checks that the observed behaviour matches the spectral prediction.
pub fn richardson_sweep(trials: usize, seed: u64, steps: usize) -> Result<RichardsonSweep> {
    let runs = par::map_range(trials, |t| -> Result<Vec<RichardsonTrial>> {
        let s = seed.wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let channels = rng.random_range(1..=3);
        let grid = rng.random_range(4..=10);
        let a = perturbed_identity(channels, 0.5, &mut rng)?;
        let lam = lambda_max(&assemble_matrix(&a, grid, grid)?);
        let f = Tensor4::randn([1, channels, grid, grid], &mut rng);
        let mut out = Vec::new();
        for factor in [1.0, 4.0] {
            let omega = factor / lam;
            let tr = run_plain_iteration(&a, &richardson_kernel(&a, omega)?, &f, steps)?;
            let predicted = omega < 2.0 / lam;
            let first = tr.residual_norms[0];
            let last = *tr.residual_norms.last().unwrap();
            let observed = tr.monotone && last <= first;
            out.push(RichardsonTrial {
                seed: s,
                lambda_max: lam,
                omega,
                predicted_convergent: predicted,
                monotone: tr.monotone,
                first_norm: first,
                last_norm: last,
                agrees: observed == predicted,
            });
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for r in runs {
        all.extend(r?);
    }
    let pass = all.iter().all(|t| t.agrees);
    Ok(RichardsonSweep { trials: all, pass })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstraintSweep {
    pub trials: usize,
    pub seed: u64,
    pub min_entry: f64,
    pub pass: bool,
}

/// Constrained iteration with arbitrary random kernels and data; every
/// iterate must stay entrywise nonnegative.
pub fn constraint_sweep(trials: usize, seed: u64) -> Result<ConstraintSweep> {
    let mins = par::map_range(trials, |t| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let c = rng.random_range(1..=3);
        let g = rng.random_range(3..=8);
        let steps = rng.random_range(1..=10);
        let a = KernelParam::new(Tensor4::randn([c, c, 3, 3], &mut rng), 1)?;
        let bs: Vec<_> =
            (0..steps).map(|_| KernelParam::new(Tensor4::randn([c, c, 3, 3], &mut rng), 1)).collect::<Result<_>>()?;
        let f = Tensor4::randn([1, c, g, g], &mut rng);
        let (tr, _) = run_constrained_iteration(&a, &bs, &f)?;
        Ok(tr.min_entries.iter().cloned().fold(f64::INFINITY, f64::min))
    });
    let min_entry = mins.into_iter().collect::<Result<Vec<_>>>()?.into_iter().fold(f64::INFINITY, f64::min);
    Ok(ConstraintSweep { trials, seed, min_entry, pass: min_entry >= 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_gives_zero_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = KernelParam::identity(2, 3).unwrap();
        let bs: Vec<_> =
            (0..5).map(|_| KernelParam::new(Tensor4::randn([2, 2, 3, 3], &mut rng), 1).unwrap()).collect();
        let f = Tensor4::random_uniform([1, 2, 6, 6], 0.0, 1.0, &mut rng);
        // Exact up to the rounding of (f − u) − c versus f − (u + c).
        assert!(verify_theorem1(&a, &bs, &f, 1e-10).unwrap().max_abs_gap < 1e-14);
        let none = verify_theorem1(&a, &[], &f, 1e-10).unwrap();
        assert_eq!((none.steps, none.max_abs_gap), (0, 0.0));
    }

    #[test]
    fn assembled_identity_and_stencil() {
        let m = assemble_matrix(&KernelParam::identity(2, 3).unwrap(), 3, 4).unwrap();
        assert_eq!(m, DMatrix::identity(24, 24));
        let ones = KernelParam::new(Tensor4::<f64>::filled([1, 1, 3, 3], 1.0), 1).unwrap();
        let m = assemble_matrix(&ones, 3, 3).unwrap();
        assert!(m.row(4).iter().all(|&v| v == 1.0));
        assert_eq!(m.row(0).sum(), 4.0);
        let big = KernelParam::<f64>::zeros(4, 4, 3, 1).unwrap();
        assert!(assemble_matrix(&big, 40, 40).is_err());
    }

    #[test]
    fn matrix_agrees_with_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for stride in [1, 2] {
            let a = KernelParam::new(Tensor4::randn([3, 2, 3, 3], &mut rng), stride).unwrap();
            assert!(matrix_action_gap(&a, 7, 6, 20, 1).unwrap() < 1e-12);
        }
    }

    #[test]
    fn zero_data_stays_zero() {
        let a = KernelParam::identity(1, 3).unwrap();
        let tr = run_plain_iteration(&a, &a, &Tensor4::zeros([1, 1, 4, 4]), 5).unwrap();
        assert!(tr.residual_norms.iter().all(|&n| n == 0.0));
        let (tr, u) = run_constrained_iteration(&a, &[a.clone(), a.clone()], &Tensor4::filled([1, 1, 4, 4], -1.0)).unwrap();
        assert!(tr.nonnegative);
        assert_eq!(u.max_abs(), 0.0);
    }

    #[test]
    fn pixel_report() {
        let r = pixel_experiment(8, 0).unwrap();
        assert_eq!(r.subsampled_max_abs, 0.0);
        assert_eq!(r.strided_entry, 1.0);
        assert_eq!(r.subsample_path_max_abs, 0.0);
        assert!(r.pass);
        assert!(pixel_experiment(5, 0).is_err());
        assert!(pixel_experiment(2, 0).is_err());
    }
}
