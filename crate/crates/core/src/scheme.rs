//! Operator forms built from one convolution kernel and ReLU, and the
//! iterative correction steps composed from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::relu;
use crate::param::KernelParam;
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeForm {
    /// `K∗x`
    ConvOnly,
    /// `K∗σ(x)`
    ConvAfterAct,
    /// `σ(K∗x)`
    ActAfterConv,
    /// `σ(K∗σ(x))`
    Sandwich,
}

impl SchemeForm {
    pub const ALL: [SchemeForm; 4] = [
        SchemeForm::ConvOnly,
        SchemeForm::ConvAfterAct,
        SchemeForm::ActAfterConv,
        SchemeForm::Sandwich,
    ];

    pub fn is_linear(self) -> bool {
        self == SchemeForm::ConvOnly
    }

    pub fn act_before(self) -> bool {
        matches!(self, SchemeForm::ConvAfterAct | SchemeForm::Sandwich)
    }

    pub fn act_after(self) -> bool {
        matches!(self, SchemeForm::ActAfterConv | SchemeForm::Sandwich)
    }

    /// Short label used in reports: `K`, `Ks`, `sK`, `sKs`.
    pub fn label(self) -> &'static str {
        match self {
            SchemeForm::ConvOnly => "K",
            SchemeForm::ConvAfterAct => "Ks",
            SchemeForm::ActAfterConv => "sK",
            SchemeForm::Sandwich => "sKs",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown scheme form {s:?}; expected K, Ks, sK or sKs")))
    }
}

#[derive(Clone, Debug)]
pub struct SchemeOp<T> {
    pub form: SchemeForm,
    pub kernel: KernelParam<T>,
}

impl<T: Scalar> SchemeOp<T> {
    pub fn new(form: SchemeForm, kernel: KernelParam<T>) -> Self {
        SchemeOp { form, kernel }
    }

    pub fn linear(kernel: KernelParam<T>) -> Self {
        Self::new(SchemeForm::ConvOnly, kernel)
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        apply_scheme(self, x)
    }
}

pub fn apply_scheme<T: Scalar>(op: &SchemeOp<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let y = if op.form.act_before() {
        op.kernel.apply(&relu(x))?
    } else {
        op.kernel.apply(x)?
    };
    Ok(if op.form.act_after() { relu(&y) } else { y })
}

/// `u + B(f − A(u))`
pub fn feature_step<T: Scalar>(
    u: &Tensor4<T>,
    f: &Tensor4<T>,
    a: &SchemeOp<T>,
    b: &SchemeOp<T>,
) -> Result<Tensor4<T>> {
    let r = f.sub(&a.apply(u)?)?;
    u.add(&b.apply(&r)?)
}

/// `u + σ(B∗σ(f − A∗u))`, defined for a linear `A` and `u ≥ 0`.
pub fn constrained_feature_step<T: Scalar>(
    u: &Tensor4<T>,
    f: &Tensor4<T>,
    a: &SchemeOp<T>,
    b: &KernelParam<T>,
) -> Result<Tensor4<T>> {
    if !a.form.is_linear() {
        return Err(Error::Contract(format!(
            "constrained feature step needs a linear data operator, got form {}",
            a.form.label()
        )));
    }
    if let Some(v) = u.data().iter().find(|v| **v < T::zero()) {
        return Err(Error::Precondition(format!("feature iterate has a negative entry {v}")));
    }
    let r = f.sub(&a.kernel.apply(u)?)?;
    let c = relu(&b.apply(&relu(&r))?);
    u.add(&c)
}

/// Sign of the correction in [`residual_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    /// `r − A∗σ(B∗σ(r))`, the form derived from the feature iteration.
    Analytic,
    /// `r + A∗σ(B∗σ(r))`, the form used for training.
    Learned,
}

pub fn residual_step<T: Scalar>(
    r: &Tensor4<T>,
    a: &KernelParam<T>,
    b: &KernelParam<T>,
    sign: Sign,
) -> Result<Tensor4<T>> {
    if a.stride != 1 || b.stride != 1 {
        return Err(Error::config("residual step needs stride-1 kernels"));
    }
    let c = a.apply(&relu(&b.apply(&relu(r))?))?;
    match sign {
        Sign::Analytic => r.sub(&c),
        Sign::Learned => r.add(&c),
    }
}

/// `r − A(B(r))` for a linear `A` and any form of `B`.
pub fn nonlinear_residual_step<T: Scalar>(
    r: &Tensor4<T>,
    a: &SchemeOp<T>,
    b: &SchemeOp<T>,
) -> Result<Tensor4<T>> {
    if !a.form.is_linear() {
        return Err(Error::Contract(format!(
            "a residual recursion exists only for a linear data operator; form {} is nonlinear, \
             iterate the features instead",
            a.form.label()
        )));
    }
    r.sub(&a.apply(&b.apply(r)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn id(c: usize) -> KernelParam<f64> {
        KernelParam::identity(c, 3).unwrap()
    }

    fn rand_kernel(c: usize, r: &mut ChaCha8Rng) -> KernelParam<f64> {
        KernelParam::new(Tensor4::randn([c, c, 3, 3], r).scale(0.2), 1).unwrap()
    }

    #[test]
    fn identity_forms() {
        let x = Tensor4::<f64>::randn([2, 3, 5, 5], &mut rng());
        let op = SchemeOp::linear(id(3));
        assert!(apply_scheme(&op, &x).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
        let s = SchemeOp::new(SchemeForm::Sandwich, id(3));
        assert!(apply_scheme(&s, &x).unwrap().max_abs_diff(&relu(&x)).unwrap() < 1e-15);
    }

    #[test]
    fn act_first_is_linear_on_nonnegatives() {
        let mut r = rng();
        let x = Tensor4::<f64>::random_uniform([1, 2, 6, 6], 0.0, 1.0, &mut r);
        let k = rand_kernel(2, &mut r);
        let a = apply_scheme(&SchemeOp::new(SchemeForm::ConvAfterAct, k.clone()), &x).unwrap();
        let b = apply_scheme(&SchemeOp::linear(k), &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn form_labels_round_trip() {
        for f in SchemeForm::ALL {
            assert_eq!(SchemeForm::from_label(f.label()).unwrap(), f);
        }
        assert!(SchemeForm::from_label("KK").is_err());
    }

    #[test]
    fn feature_step_trivial_cases() {
        let mut r = rng();
        let u = Tensor4::<f64>::randn([1, 2, 4, 4], &mut r);
        let f = Tensor4::<f64>::randn([1, 2, 4, 4], &mut r);
        let a = SchemeOp::linear(id(2));
        let zero = SchemeOp::linear(KernelParam::zeros(2, 2, 3, 1).unwrap());
        assert_eq!(feature_step(&u, &f, &a, &zero).unwrap(), u);
        let u0 = Tensor4::zeros(u.shape());
        let one = feature_step(&u0, &f, &a, &SchemeOp::linear(id(2))).unwrap();
        assert!(one.max_abs_diff(&f).unwrap() < 1e-15);
    }

    #[test]
    fn damped_identity_contracts_by_one_minus_omega() {
        let mut r = rng();
        let f = Tensor4::<f64>::randn([1, 2, 5, 5], &mut r);
        let a = SchemeOp::linear(id(2));
        let omega = 0.3;
        let b = SchemeOp::linear(id(2).scaled(omega));
        let mut u = Tensor4::zeros(f.shape());
        let mut prev = f.norm2();
        for _ in 0..15 {
            u = feature_step(&u, &f, &a, &b).unwrap();
            let res = f.sub(&u).unwrap().norm2();
            assert!((res / prev - (1.0 - omega)).abs() < 1e-9);
            prev = res;
        }
    }

    #[test]
    fn constrained_step_cases() {
        let mut r = rng();
        let a = SchemeOp::linear(rand_kernel(2, &mut r));
        let b = rand_kernel(2, &mut r);
        let u = Tensor4::<f64>::random_uniform([1, 2, 5, 5], 0.0, 1.0, &mut r);
        let f = a.apply(&u).unwrap();
        assert_eq!(constrained_feature_step(&u, &f, &a, &b).unwrap(), u);

        let f = Tensor4::<f64>::random_uniform([1, 2, 5, 5], 0.0, 1.0, &mut r);
        let out = constrained_feature_step(&Tensor4::zeros(f.shape()), &f, &SchemeOp::linear(id(2)), &id(2))
            .unwrap();
        assert!(out.max_abs_diff(&f).unwrap() < 1e-15);

        let neg = u.map(|v| v - 0.5);
        assert!(matches!(
            constrained_feature_step(&neg, &f, &a, &b),
            Err(Error::Precondition(_))
        ));
        let nl = SchemeOp::new(SchemeForm::Sandwich, a.kernel.clone());
        assert!(matches!(constrained_feature_step(&u, &f, &nl, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn residual_step_trivial_cases() {
        let mut r = rng();
        let a = rand_kernel(2, &mut r);
        let x = Tensor4::<f64>::randn([1, 2, 4, 4], &mut r);
        let zero = KernelParam::zeros(2, 2, 3, 1).unwrap();
        assert_eq!(residual_step(&x, &a, &zero, Sign::Analytic).unwrap(), x);
        let neg = x.map(|v| -v.abs());
        let b = rand_kernel(2, &mut r);
        assert_eq!(residual_step(&neg, &a, &b, Sign::Learned).unwrap(), neg);
    }

    #[test]
    fn nonlinear_residual_cases() {
        let mut r = rng();
        let x = Tensor4::<f64>::randn([1, 2, 4, 4], &mut r);
        let a = SchemeOp::linear(id(2));
        let zero = SchemeOp::new(SchemeForm::Sandwich, KernelParam::zeros(2, 2, 3, 1).unwrap());
        assert_eq!(nonlinear_residual_step(&x, &a, &zero).unwrap(), x);
        let out = nonlinear_residual_step(&x, &a, &SchemeOp::linear(id(2))).unwrap();
        assert!(out.max_abs() < 1e-15);

        let ak = rand_kernel(2, &mut r);
        let bk = rand_kernel(2, &mut r);
        let lhs = nonlinear_residual_step(
            &x,
            &SchemeOp::linear(ak.clone()),
            &SchemeOp::new(SchemeForm::Sandwich, bk.clone()),
        )
        .unwrap();
        // Hand-composed: r − A∗σ(B∗σ(r)).
        let hand = x.sub(&ak.apply(&relu(&bk.apply(&relu(&x)).unwrap())).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&hand).unwrap() < 1e-14);
        let rs = residual_step(&x, &ak, &bk, Sign::Analytic).unwrap();
        assert!(lhs.max_abs_diff(&rs).unwrap() < 1e-14);

        let bad = SchemeOp::new(SchemeForm::ActAfterConv, ak);
        assert!(matches!(nonlinear_residual_step(&x, &bad, &a), Err(Error::Contract(_))));
    }
}
