//! The sixteen `(𝓐, 𝓑)` operator-form combinations of the feature-based
//! network, trained side by side.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{AugmentConfig, Batch, BatchIter, BatchOptions, Dataset, Normalization};
use crate::error::Result;
use crate::network::{scheme_sweep_specs_with, Model};
use crate::scheme::SchemeForm;
use crate::train::{evaluate, lr_at, probe_loss, TrainConfig, Trainer};

/// Published full-scale CIFAR-10 TOP-1 for each combination, for side-by-side
/// comparison with runs at that scale.
pub fn reported_top1(a: SchemeForm, b: SchemeForm) -> f64 {
    use SchemeForm::*;
    match (a, b) {
        (ConvOnly, ConvOnly) => 70.96,
        (ConvOnly, ActAfterConv) => 92.82,
        (ConvOnly, ConvAfterAct) => 93.01,
        (ConvOnly, Sandwich) => 93.49,
        (ConvAfterAct, ConvOnly) => 92.64,
        (ConvAfterAct, ActAfterConv) => 92.54,
        (ConvAfterAct, ConvAfterAct) => 93.46,
        (ConvAfterAct, Sandwich) => 93.15,
        (ActAfterConv, ConvOnly) => 91.91,
        (ActAfterConv, ActAfterConv) => 92.14,
        (ActAfterConv, ConvAfterAct) => 93.37,
        (ActAfterConv, Sandwich) => 93.17,
        (Sandwich, ConvOnly) => 92.70,
        (Sandwich, ActAfterConv) => 93.23,
        (Sandwich, ConvAfterAct) => 93.37,
        (Sandwich, Sandwich) => 93.40,
    }
}

pub const SWEEP_HEADER: &str =
    "a_form,b_form,params,epochs,probe_loss_first_step,probe_loss_end,loss_decreased,test_top1,reported_top1,wall_seconds";

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub a_form: SchemeForm,
    pub b_form: SchemeForm,
    pub params: usize,
    pub epochs: usize,
    /// Loss on the fixed probe batch after the first update.
    pub probe_loss_first_step: f64,
    pub probe_loss_end: f64,
    pub loss_decreased: bool,
    pub test_top1: Option<f64>,
    pub reported_top1: f64,
    pub wall_seconds: f64,
    /// Set when training stopped early, e.g. on a non-finite loss.
    pub error: Option<String>,
}

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{},{},{:.2},{:.1}",
            self.a_form.label(),
            self.b_form.label(),
            self.params,
            self.epochs,
            self.probe_loss_first_step,
            self.probe_loss_end,
            self.loss_decreased,
            self.test_top1.map_or(String::new(), |t| format!("{t:.2}")),
            self.reported_top1,
            self.wall_seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub channels: Vec<usize>,
    pub epochs: usize,
    /// Samples of the training set taken for the probe batch.
    pub probe: usize,
    pub train: TrainConfig,
}

/// Trains every combination from the same seed and data order. "Loss
/// decreased" compares the cross-entropy of a fixed probe batch (the first
/// `probe` training samples, normalized, unaugmented, batch statistics)
/// after the first update and after the last.
pub fn run_sweep(
    train_set: Arc<Dataset>,
    test_set: Option<&Dataset>,
    cfg: &SweepConfig,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    cfg.train.validate()?;
    let norm = cfg.train.normalize.then(|| Normalization::from_images(&train_set.images, "train"));
    let aug = if cfg.train.augment { AugmentConfig::standard(norm.clone()) } else { AugmentConfig::none(norm.clone()) };
    let probe_set = train_set.take(cfg.probe)?;
    let mut probe = Batch { images: probe_set.images, labels: probe_set.labels };
    if let Some(n) = &norm {
        n.apply(&mut probe.images)?;
    }
    let mut rows = Vec::with_capacity(16);
    for mut spec in scheme_sweep_specs_with(&cfg.channels) {
        spec.num_classes = train_set.num_classes;
        let start = Instant::now();
        let model = Model::build(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
        let params = model.num_params();
        let mut t = Trainer::new(model, cfg.train.clone())?;
        let mut first = None;
        let mut error = None;
        'epochs: for epoch in 0..cfg.epochs {
            let bo = BatchOptions {
                batch_size: cfg.train.batch_size,
                shuffle: true,
                seed: cfg.train.seed.wrapping_add(1),
                augment: Some(aug.clone()),
                prefetch: cfg.train.prefetch,
                drop_last: false,
            };
            for b in BatchIter::new(Arc::clone(&train_set), bo, epoch as u64)? {
                if let Err(e) = t.step(&b?, lr_at(epoch, &cfg.train)) {
                    error = Some(e.to_string());
                    break 'epochs;
                }
                if first.is_none() {
                    first = Some(probe_loss(&t.model, &probe)?);
                }
            }
        }
        let first = first.unwrap_or(f64::NAN);
        let end = if error.is_none() { probe_loss(&t.model, &probe)? } else { f64::NAN };
        let test_top1 = match (test_set, &error) {
            (Some(ts), None) => Some(evaluate(&t.model, ts, norm.as_ref(), 256)?),
            _ => None,
        };
        let row = SweepRow {
            a_form: spec.a_form,
            b_form: spec.b_form,
            params,
            epochs: cfg.epochs,
            probe_loss_first_step: first,
            probe_loss_end: end,
            loss_decreased: end < first,
            test_top1,
            reported_top1: reported_top1(spec.a_form, spec.b_form),
            wall_seconds: start.elapsed().as_secs_f64(),
            error,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_reported_combination() {
        let mut best = (SchemeForm::ConvOnly, SchemeForm::ConvOnly, 0.0);
        for a in SchemeForm::ALL {
            for b in SchemeForm::ALL {
                let v = reported_top1(a, b);
                if v > best.2 {
                    best = (a, b, v);
                }
            }
        }
        assert_eq!(best, (SchemeForm::ConvOnly, SchemeForm::Sandwich, 93.49));
    }
}
