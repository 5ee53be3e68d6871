use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resfeat::blocks::{preact_block, BasicBlock, Conv, Forward};
use resfeat::data::augment::augment;
use resfeat::data::{AugmentConfig, Batch};
use resfeat::ops::BnMode;
use resfeat::scheme::{apply_scheme, constrained_feature_step, SchemeForm, SchemeOp};
use resfeat::solver::{perturbed_identity, verify_theorem1};
use resfeat::{KernelParam, ParamKind, ParamStore, Tensor4};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn kernel(c_out: usize, c_in: usize, seed: u64) -> KernelParam<f64> {
    KernelParam::new(Tensor4::randn([c_out, c_in, 3, 3], &mut rng(seed)), 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_form_is_positively_homogeneous(seed in any::<u64>(), alpha in 0.01f64..50.0, c in 1usize..4, g in 3usize..9) {
        let x = Tensor4::<f64>::randn([1, c, g, g], &mut rng(seed ^ 1));
        for form in SchemeForm::ALL {
            let op = SchemeOp::new(form, kernel(c, c, seed));
            let scaled = apply_scheme(&op, &x.scale(alpha)).unwrap();
            let expect = apply_scheme(&op, &x).unwrap().scale(alpha);
            let tol = 1e-12 * (1.0 + expect.max_abs());
            prop_assert!(scaled.max_abs_diff(&expect).unwrap() <= tol, "form {}", form.label());
        }
    }

    #[test]
    fn constrained_iterates_stay_nonnegative_and_grow(seed in any::<u64>(), c in 1usize..4, g in 3usize..9, steps in 1usize..12) {
        let a = SchemeOp::linear(kernel(c, c, seed));
        let f = Tensor4::<f64>::randn([1, c, g, g], &mut rng(seed ^ 2));
        let mut u = Tensor4::zeros(f.shape());
        for i in 0..steps {
            let next = constrained_feature_step(&u, &f, &a, &kernel(c, c, seed.wrapping_add(10 + i as u64))).unwrap();
            prop_assert!(next.min() >= 0.0);
            prop_assert!(next.data().iter().zip(u.data()).all(|(n, o)| n >= o));
            u = next;
        }
    }

    #[test]
    fn residual_and_feature_iterations_move_in_lockstep(seed in any::<u64>(), c in 1usize..5, g in 4usize..17, steps in 1usize..21) {
        let mut r = rng(seed);
        let a = perturbed_identity(c, 0.1, &mut r).unwrap();
        let bs: Vec<_> = (0..steps)
            .map(|_| KernelParam::new(Tensor4::randn([c, c, 3, 3], &mut r).scale(0.3), 1).unwrap())
            .collect();
        let f = Tensor4::random_uniform([1, c, g, g], 0.0, 1.0, &mut r);
        let rep = verify_theorem1(&a, &bs, &f, 1e-10).unwrap();
        prop_assert!(rep.pass, "gap {}", rep.max_abs_gap);
    }

    /// A level of modified pre-activation blocks without batch norm, one `A`
    /// per level stored as `−A`, reproduces `f − A∗uⁱ` of the constrained
    /// feature iteration block by block.
    #[test]
    fn modified_preact_level_tracks_the_feature_iteration(seed in any::<u64>(), c in 1usize..4, g in 3usize..9, nu in 1usize..6) {
        let a = kernel(c, c, seed);
        let bks: Vec<_> = (0..nu).map(|i| kernel(c, c, seed.wrapping_add(1 + i as u64))).collect();
        let f = Tensor4::<f64>::random_uniform([1, c, g, g], 0.0, 1.0, &mut rng(seed ^ 3));

        let mut store = ParamStore::new();
        let a_id = store.insert("A", ParamKind::ConvWeight, a.weight.scale(-1.0));
        let b_ids: Vec<_> = bks.iter().map(|b| store.insert("B", ParamKind::ConvWeight, b.weight.clone())).collect();
        let mut fw = Forward::new(&store, &[], BnMode::Train);
        let mut rv = fw.input(f.clone());

        let op = SchemeOp::linear(a.clone());
        let mut u = Tensor4::zeros(f.shape());
        for (b, &bid) in bks.iter().zip(&b_ids) {
            let blk = BasicBlock { a: Conv { id: a_id, stride: 1 }, b: Conv { id: bid, stride: 1 }, bn1: None, bn2: None };
            rv = preact_block(&mut fw, rv, &blk).unwrap();
            u = constrained_feature_step(&u, &f, &op, b).unwrap();
            let expect = f.sub(&a.apply(&u).unwrap()).unwrap();
            let gap = fw.value(rv).max_abs_diff(&expect).unwrap();
            prop_assert!(gap <= 1e-12 * (1.0 + expect.max_abs()), "gap {gap} at scale {}", expect.max_abs());
        }
    }

    #[test]
    fn augmentation_keeps_labels_with_their_images(seed in any::<u64>(), n in 1usize..12, pad in 0usize..5) {
        // Image k is filled with k + 1, so any pixel that survives the crop
        // identifies its source image.
        let images = Tensor4::<f32>::from_fn([n, 3, 8, 8], |k, _, _, _| (k + 1) as f32);
        let labels: Vec<usize> = (0..n).collect();
        let mut b = Batch { images, labels: labels.clone() };
        let cfg = AugmentConfig { pad, random_crop: true, horizontal_flip: true, normalization: None };
        augment(&mut b, &cfg, &mut rng(seed)).unwrap();
        prop_assert_eq!(&b.labels, &labels);
        for (k, &l) in b.labels.iter().enumerate() {
            let s = b.images.sample(k);
            prop_assert!(s.iter().all(|&v| v == 0.0 || v == (l + 1) as f32));
            prop_assert!(s.iter().any(|&v| v != 0.0));
        }
    }
}
