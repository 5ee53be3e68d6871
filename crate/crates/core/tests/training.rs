use std::fs;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resfeat::blocks::{Share, SharingPolicy};
use resfeat::checkpoint;
use resfeat::data::synthetic::class_images;
use resfeat::data::{Batch, Dataset};
use resfeat::network::{Model, NetworkSpec};
use resfeat::par;
use resfeat::train::{evaluate, train, MetricsRow, RunOptions, TrainConfig, Trainer, METRICS_HEADER};
use resfeat::{Error, Tensor4};

const TINY: [usize; 4] = [4, 4, 8, 8];

fn tiny_preact(a: Share) -> NetworkSpec {
    NetworkSpec::preact(&[2, 2, 2, 2], &TINY, SharingPolicy::new(a, Share::PerLayer), 10)
}

fn data(n: usize, seed: u64) -> Dataset {
    class_images(n, 10, [3, 8, 8], 0.2, seed).unwrap()
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 16, total_epochs: epochs, lr_step: 2, prefetch: 0, lr0: 0.05, ..TrainConfig::default() }
}

fn without_wall(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    rows.iter().map(|r| MetricsRow { wall_seconds: 0.0, ..r.clone() }).collect()
}

#[test]
fn fixed_seed_sequential_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = par::sequential(|| {
            train(
                &tiny_preact(Share::PerLevel),
                Arc::new(data(48, 1)),
                Some(&data(20, 2)),
                &quick_cfg(3),
                RunOptions { out_dir: Some(out.clone()), on_epoch: None },
            )
            .unwrap()
        });
        (o, fs::read(out.join("final.rft")).unwrap())
    };
    let (a, ca) = run("a");
    let (b, cb) = run("b");
    assert_eq!(without_wall(&a.metrics), without_wall(&b.metrics));
    assert_eq!(a.step_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(), b.step_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
    assert_eq!(ca, cb);
    // Schedule boundary after epoch 2 and the end of the run.
    assert_eq!(a.checkpoints.len(), 2);
    let csv = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn prefetch_and_threads_do_not_change_results() {
    let mut cfg = quick_cfg(1);
    let seq = par::sequential(|| train(&tiny_preact(Share::PerLayer), Arc::new(data(40, 3)), None, &cfg, RunOptions::default()).unwrap());
    cfg.prefetch = 3;
    let par_run = train(&tiny_preact(Share::PerLayer), Arc::new(data(40, 3)), None, &cfg, RunOptions::default()).unwrap();
    assert_eq!(seq.step_losses, par_run.step_losses);
}

#[test]
fn checkpoint_round_trip_preserves_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let test = data(30, 5);
    let out = train(
        &tiny_preact(Share::PerLevel),
        Arc::new(data(48, 4)),
        None,
        &quick_cfg(1),
        RunOptions { out_dir: Some(dir.path().to_path_buf()), on_epoch: None },
    )
    .unwrap();
    let path = dir.path().join("final.rft");
    let loaded: Model<f32> = checkpoint::load(&path).unwrap();
    let norm = resfeat::train::load_normalization(&path).unwrap();
    assert_eq!(norm, out.normalization);
    let before = evaluate(&out.model, &test, out.normalization.as_ref(), 7).unwrap();
    let after = evaluate(&loaded, &test, norm.as_ref(), 13).unwrap();
    assert_eq!(before.to_bits(), after.to_bits());
    let x = test.images.slice_batch(0, 4).unwrap();
    assert_eq!(out.model.eval_logits(&x).unwrap(), loaded.eval_logits(&x).unwrap());
}

#[test]
fn zero_epoch_run_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_preact(Share::PerLayer);
    let cfg = quick_cfg(0);
    let out = train(&spec, Arc::new(data(16, 6)), None, &cfg, RunOptions { out_dir: Some(dir.path().to_path_buf()), on_epoch: None })
        .unwrap();
    assert!(out.metrics.is_empty());
    let init = Model::<f32>::build(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let saved = checkpoint::read_entries(fs::File::open(dir.path().join("final.rft")).unwrap()).unwrap();
    assert_eq!(saved, checkpoint::model_entries(&init).unwrap());
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { lr0: 1e300, ..quick_cfg(3) };
    let r = train(
        &tiny_preact(Share::PerLayer),
        Arc::new(data(64, 7)),
        None,
        &cfg,
        RunOptions { out_dir: Some(dir.path().to_path_buf()), on_epoch: None },
    );
    match r {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("diverged.rft"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training at lr 1e300 stayed finite"),
    }
    assert!(dir.path().join("diverged.rft").is_file());
}

#[test]
fn training_lowers_the_loss() {
    let spec = tiny_preact(Share::PerLevel);
    let set = data(128, 8);
    let batch = Batch { images: set.images.clone(), labels: set.labels.clone() };
    let model = Model::build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut t = Trainer::new(model, TrainConfig { weight_decay: 0.0, ..TrainConfig::default() }).unwrap();
    let first = t.step(&batch, 0.05).unwrap().loss;
    let mut last = first;
    for _ in 1..200 {
        last = t.step(&batch, 0.05).unwrap().loss;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn shared_kernels_stay_single_objects_under_training() {
    let spec = tiny_preact(Share::PerLevel);
    let model = Model::build(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let decls = model.arch.decls.len();
    let set = data(16, 9);
    let mut t = Trainer::new(model, quick_cfg(1)).unwrap();
    for _ in 0..3 {
        t.step(&Batch { images: set.images.clone(), labels: set.labels.clone() }, 0.1).unwrap();
    }
    assert_eq!(t.model.store.len(), decls);
    for level in 1..=4 {
        let (a1, _) = t.model.block_kernels(level, 1).unwrap();
        let (a2, _) = t.model.block_kernels(level, 2).unwrap();
        assert_eq!(a1, a2);
    }
}

#[test]
fn evaluation_counts_argmax_hits() {
    let spec = tiny_preact(Share::PerLayer);
    let mut model = Model::<f32>::build(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let w = model.store.find("head.weight").unwrap();
    let b = model.store.find("head.bias").unwrap();
    model.store.value_mut(w).unwrap().fill(0.0);
    let mut bias = Tensor4::zeros([1, 10, 1, 1]);
    bias.set(0, 3, 0, 0, 1.0);
    *model.store.value_mut(b).unwrap() = bias;
    let set = data(40, 10);
    let freq = 100.0 * set.labels.iter().filter(|&&l| l == 3).count() as f64 / 40.0;
    let acc = evaluate(&model, &set, None, 9).unwrap();
    assert_eq!(acc, freq);
    assert_eq!(acc.to_bits(), evaluate(&model, &set, None, 40).unwrap().to_bits());
    let empty = Dataset { images: Tensor4::zeros([0, 3, 8, 8]), labels: vec![], num_classes: 10 };
    assert!(evaluate(&model, &empty, None, 8).is_err());
}
