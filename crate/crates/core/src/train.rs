//! SGD with momentum, the step learning-rate schedule, evaluation and the
//! epoch loop with metrics and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{AugmentConfig, Batch, BatchIter, BatchOptions, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::network::{Model, NetworkSpec, StemKind};
use crate::ops::BnMode;
use crate::par;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs between learning-rate drops.
    pub lr_step: usize,
    pub lr_factor: f64,
    pub total_epochs: usize,
    pub seed: u64,
    /// Random crop and horizontal flip on training batches.
    pub augment: bool,
    /// Per-channel normalization from training-set statistics.
    pub normalize: bool,
    pub prefetch: usize,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            lr_step: 30,
            lr_factor: 0.1,
            total_epochs: 120,
            seed: 0,
            augment: true,
            normalize: true,
            prefetch: 2,
            train_subset: None,
            test_subset: None,
        }
    }
}

impl TrainConfig {
    /// Defaults by depth and dataset: weight decay 1e-3 for 34-layer
    /// networks, 60 epochs without augmentation for small grayscale images,
    /// batch 256 for the large-image stem.
    pub fn for_spec(spec: &NetworkSpec) -> Self {
        let blocks: usize = spec.nu.iter().sum();
        let mut c = TrainConfig { weight_decay: if blocks > 8 { 1e-3 } else { 1e-4 }, ..Self::default() };
        match spec.stem {
            StemKind::SmallImage => {
                c.total_epochs = 60;
                c.augment = false;
            }
            StemKind::LargeImage => c.batch_size = 256,
            StemKind::Cifar => {}
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [("lr0", self.lr0), ("momentum", self.momentum), ("lr_factor", self.lr_factor)];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("{k} must be a positive finite number, got {v}")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight_decay must be nonnegative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.lr_step == 0 {
            return Err(Error::config("batch_size and lr_step must be positive"));
        }
        Ok(())
    }
}

/// `lr0 · lr_factor^⌊epoch / lr_step⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_factor.powi((epoch / cfg.lr_step) as i32)
}

/// Momentum buffers by parameter.
pub type Velocity<T> = BTreeMap<ParamId, Tensor4<T>>;

/// One update of every stored parameter: `v ← μv + g + λw`, `w ← w − lr·v`,
/// with `λ = 0` for batch-norm parameters and biases. A parameter without a
/// gradient is treated as having a zero gradient.
pub fn sgd_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<ParamId, Tensor4<T>>,
    velocity: &mut Velocity<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (id, g) in grads {
        let w = store.value(*id)?;
        g.check_same(w, "gradient")?;
    }
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for (id, p) in store.iter_mut() {
        let lambda = if p.kind.decays() { T::of(weight_decay) } else { T::zero() };
        let v = velocity.entry(id).or_insert_with(|| Tensor4::zeros(p.value.shape()));
        v.check_same(&p.value, "velocity")?;
        let g = grads.get(&id);
        let w = p.value.data_mut();
        for (i, (vi, wi)) in v.data_mut().iter_mut().zip(w.iter_mut()).enumerate() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            *vi = mu * *vi + gi + lambda * *wi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub velocity: Velocity<f32>,
    pub steps: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { model, cfg, velocity: BTreeMap::new(), steps: 0 })
    }

    /// Forward, backward and one SGD update on `batch` at rate `lr`. A
    /// non-finite loss leaves the parameters untouched.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<StepStats> {
        let (loss, correct, grads, stats) = {
            let mut fw = self.model.forward_context(BnMode::Train);
            let x = fw.input(batch.images.clone());
            let logits = self.model.forward(&mut fw, x)?;
            let loss = fw.tape.cross_entropy(logits, &batch.labels)?;
            let lv = fw.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss {lv} at step {}", self.steps + 1)));
            }
            let correct = count_correct(fw.value(logits), &batch.labels);
            let grads = fw.tape.backward(loss)?.into_params();
            (lv, correct, grads, std::mem::take(&mut fw.batch_stats))
        };
        self.model.apply_batch_stats(&stats);
        sgd_step(&mut self.model.store, &grads, &mut self.velocity, lr, self.cfg.momentum, self.cfg.weight_decay)?;
        self.steps += 1;
        Ok(StepStats { loss, correct, samples: batch.labels.len() })
    }
}

/// Mean cross-entropy of `batch` with batch statistics, as a training step
/// would see it, without touching the running estimates or parameters.
pub fn probe_loss(model: &Model<f32>, batch: &Batch) -> Result<f64> {
    let mut fw = model.forward_context(BnMode::Train);
    let x = fw.input(batch.images.clone());
    let logits = model.forward(&mut fw, x)?;
    let loss = fw.tape.cross_entropy(logits, &batch.labels)?;
    Ok(fw.value(loss).data()[0] as f64)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor4<f32>, labels: &[usize]) -> usize {
    logits.data().chunks(logits.sample_len()).zip(labels).filter(|(r, &y)| argmax(r) == y).count()
}

/// TOP-1 accuracy in percent, in eval mode. Chunks of `batch` samples are
/// evaluated in parallel when enabled; the result does not depend on it.
pub fn evaluate(model: &Model<f32>, data: &Dataset, norm: Option<&Normalization>, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::shape("cannot evaluate on an empty dataset"));
    }
    let batch = batch.max(1);
    let chunks = data.len().div_ceil(batch);
    let results = par::map_range(chunks, |k| -> Result<usize> {
        let (s, e) = (k * batch, ((k + 1) * batch).min(data.len()));
        let mut x = data.images.slice_batch(s, e)?;
        if let Some(n) = norm {
            n.apply(&mut x)?;
        }
        Ok(count_correct(&model.eval_logits(&x)?, &data.labels[s..e]))
    });
    let mut correct = 0;
    for r in results {
        correct += r?;
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_top1,test_top1,wall_seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    /// `None` when no test set was given.
    pub test_top1: Option<f64>,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let test = self.test_top1.map_or(String::new(), |t| format!("{t:.4}"));
        format!(
            "{},{},{:.6},{:.4},{},{:.3}",
            self.epoch, self.lr, self.train_loss, self.train_top1, test, self.wall_seconds
        )
    }
}

/// Where a run writes its outputs, and an optional per-epoch observer.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Receives `metrics.csv`, `metrics.jsonl` and checkpoints.
    pub out_dir: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&MetricsRow)>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub metrics: Vec<MetricsRow>,
    /// Loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
    pub normalization: Option<Normalization>,
    pub checkpoints: Vec<PathBuf>,
}

/// Checkpoint plus the normalization sidecar `<path>.norm` when present.
pub fn save_checkpoint(model: &Model<f32>, norm: Option<&Normalization>, path: &Path) -> Result<()> {
    checkpoint::save(model, path)?;
    if let Some(n) = norm {
        let json = serde_json::to_string_pretty(n).map_err(|e| Error::format(e.to_string()))?;
        fs::write(norm_path(path), json)?;
    }
    Ok(())
}

pub fn norm_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".norm");
    PathBuf::from(s)
}

pub fn load_normalization(checkpoint: &Path) -> Result<Option<Normalization>> {
    let p = norm_path(checkpoint);
    if !p.is_file() {
        return Ok(None);
    }
    let s = fs::read_to_string(&p)?;
    serde_json::from_str(&s).map(Some).map_err(|e| Error::format(format!("{}: {e}", p.display())))
}

/// Trains a freshly initialized `spec` model. One metrics row per epoch;
/// checkpoints after every epoch that ends a schedule step and at the end.
/// A non-finite loss stops the run after writing `diverged.rft`.
pub fn train(
    spec: &NetworkSpec,
    train_set: Arc<Dataset>,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if train_set.num_classes != spec.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, the network head has {}",
            train_set.num_classes, spec.num_classes
        )));
    }
    let model = Model::build(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let norm = cfg.normalize.then(|| Normalization::from_images(&train_set.images, "train"));
    let augment = if cfg.augment { AugmentConfig::standard(norm.clone()) } else { AugmentConfig::none(norm.clone()) };
    let mut trainer = Trainer::new(model, cfg.clone())?;

    let mut csv = None;
    let mut jsonl = None;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("metrics.csv"))?;
        writeln!(f, "{METRICS_HEADER}")?;
        csv = Some(f);
        jsonl = Some(fs::File::create(dir.join("metrics.jsonl"))?);
    }

    let start = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.total_epochs);
    let mut step_losses = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in 0..cfg.total_epochs {
        let lr = lr_at(epoch, cfg);
        let bo = BatchOptions {
            batch_size: cfg.batch_size,
            shuffle: true,
            seed: cfg.seed.wrapping_add(1),
            augment: Some(augment.clone()),
            prefetch: cfg.prefetch,
            drop_last: false,
        };
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for batch in BatchIter::new(Arc::clone(&train_set), bo, epoch as u64)? {
            let batch = batch?;
            let st = match trainer.step(&batch, lr) {
                Ok(s) => s,
                Err(Error::NonFinite(msg)) => {
                    let mut note = msg;
                    if let Some(dir) = &opts.out_dir {
                        let p = dir.join("diverged.rft");
                        save_checkpoint(&trainer.model, norm.as_ref(), &p)?;
                        note = format!("{note}; parameters before the step saved to {}", p.display());
                    }
                    return Err(Error::NonFinite(note));
                }
                Err(e) => return Err(e),
            };
            step_losses.push(st.loss);
            loss_sum += st.loss * st.samples as f64;
            correct += st.correct;
            seen += st.samples;
        }
        let test_top1 = match test_set {
            Some(t) => Some(evaluate(&trainer.model, t, norm.as_ref(), 256)?),
            None => None,
        };
        let row = MetricsRow {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_top1: 100.0 * correct as f64 / seen.max(1) as f64,
            test_top1,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", row.csv())?;
        }
        if let Some(f) = jsonl.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&row).map_err(|e| Error::format(e.to_string()))?)?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&row);
        }
        metrics.push(row);
        if (epoch + 1) % cfg.lr_step == 0 && epoch + 1 < cfg.total_epochs {
            if let Some(dir) = &opts.out_dir {
                let p = dir.join(format!("epoch{}.rft", epoch + 1));
                save_checkpoint(&trainer.model, norm.as_ref(), &p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        let p = dir.join("final.rft");
        save_checkpoint(&trainer.model, norm.as_ref(), &p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome { model: trainer.model, metrics, step_losses, normalization: norm, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamKind;

    fn store(kind: ParamKind, w: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", kind, Tensor4::filled([1, 1, 1, 2], w));
        (s, id)
    }

    #[test]
    fn decay_only_step() {
        let (mut s, id) = store(ParamKind::ConvWeight, 2.0);
        sgd_step(&mut s, &BTreeMap::new(), &mut BTreeMap::new(), 0.1, 0.9, 0.01).unwrap();
        assert_eq!(s.value(id).unwrap().data()[0], 2.0 - 0.1 * 0.01 * 2.0);
    }

    #[test]
    fn plain_gradient_step() {
        let (mut s, id) = store(ParamKind::LinearWeight, 1.0);
        let g = BTreeMap::from([(id, Tensor4::filled([1, 1, 1, 2], 0.5))]);
        sgd_step(&mut s, &g, &mut BTreeMap::new(), 0.1, 0.0, 0.0).unwrap();
        assert_eq!(s.value(id).unwrap().data()[0], 1.0 - 0.05);
    }

    #[test]
    fn two_momentum_steps() {
        let (mut s, id) = store(ParamKind::ConvWeight, 0.0);
        let g = BTreeMap::from([(id, Tensor4::filled([1, 1, 1, 2], 1.0))]);
        let mut v = BTreeMap::new();
        for _ in 0..2 {
            sgd_step(&mut s, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        }
        assert!((s.value(id).unwrap().data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_parameters_do_not_decay() {
        let (mut s, id) = store(ParamKind::BnGamma, 1.3);
        sgd_step(&mut s, &BTreeMap::new(), &mut BTreeMap::new(), 0.1, 0.9, 0.5).unwrap();
        assert_eq!(s.value(id).unwrap().data()[0].to_bits(), 1.3f64.to_bits());
    }

    #[test]
    fn gradient_shape_mismatch() {
        let (mut s, id) = store(ParamKind::ConvWeight, 1.0);
        let g = BTreeMap::from([(id, Tensor4::zeros([1, 1, 1, 3]))]);
        assert!(matches!(sgd_step(&mut s, &g, &mut BTreeMap::new(), 0.1, 0.9, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.1);
        assert!((lr_at(30, &c) - 0.01).abs() < 1e-15);
        assert!((lr_at(59, &c) - 0.01).abs() < 1e-15);
        assert!((lr_at(90, &c) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn defaults_follow_depth_and_data() {
        let r18 = crate::network::preset("resnet18-Ali-Bli-mnist").unwrap();
        let r34 = crate::network::preset("resnet34-Ali-Bli-cifar10").unwrap();
        let c18 = TrainConfig::for_spec(&r18);
        assert_eq!((c18.weight_decay, c18.total_epochs, c18.augment), (1e-4, 60, false));
        let c34 = TrainConfig::for_spec(&r34);
        assert_eq!((c34.weight_decay, c34.total_epochs, c34.augment), (1e-3, 120, true));
    }
}
