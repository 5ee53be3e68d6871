//! Mini-batch iteration with optional background prefetch.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

use super::augment::{augment, AugmentConfig};
use super::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    /// Applied to every batch; crop and flip belong to training only.
    pub augment: Option<AugmentConfig>,
    /// Batches produced ahead of the consumer; 0 produces inline.
    pub prefetch: usize,
    pub drop_last: bool,
}

impl BatchOptions {
    pub fn new(batch_size: usize) -> Self {
        BatchOptions { batch_size, shuffle: false, seed: 0, augment: None, prefetch: 2, drop_last: false }
    }
}

struct Producer {
    data: Arc<Dataset>,
    order: Vec<usize>,
    pos: usize,
    opts: BatchOptions,
    rng: ChaCha8Rng,
}

impl Producer {
    fn next(&mut self) -> Option<Result<Batch>> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.opts.drop_last && remaining < self.opts.batch_size) {
            return None;
        }
        let end = (self.pos + self.opts.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.make(idx.to_vec()))
    }

    fn make(&mut self, idx: Vec<usize>) -> Result<Batch> {
        let sub = self.data.select(&idx)?;
        let mut b = Batch { images: sub.images, labels: sub.labels };
        if let Some(cfg) = &self.opts.augment {
            augment(&mut b, cfg, &mut self.rng)?;
        }
        Ok(b)
    }
}

enum Inner {
    Inline(Box<Producer>),
    Threaded { rx: Receiver<Result<Batch>>, handle: Option<JoinHandle<()>> },
}

/// Batches of one pass over a dataset. The shuffle order and the augmentation
/// draws come from one generator seeded by `(seed, epoch)`, owned by the
/// iterator, so the sequence is the same with or without prefetch.
pub struct BatchIter {
    inner: Inner,
    batches: usize,
}

impl BatchIter {
    pub fn new(data: Arc<Dataset>, opts: BatchOptions, epoch: u64) -> Result<Self> {
        if opts.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..data.len()).collect();
        if opts.shuffle {
            order.shuffle(&mut rng);
        }
        let batches = if opts.drop_last { data.len() / opts.batch_size } else { data.len().div_ceil(opts.batch_size) };
        let prefetch = opts.prefetch;
        let mut producer = Producer { data, order, pos: 0, opts, rng };
        let inner = if prefetch == 0 {
            Inner::Inline(Box::new(producer))
        } else {
            let (tx, rx) = sync_channel(prefetch);
            let handle = std::thread::spawn(move || {
                while let Some(b) = producer.next() {
                    if tx.send(b).is_err() {
                        break;
                    }
                }
            });
            Inner::Threaded { rx, handle: Some(handle) }
        };
        Ok(BatchIter { inner, batches })
    }

    pub fn num_batches(&self) -> usize {
        self.batches
    }
}

impl Iterator for BatchIter {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.inner {
            Inner::Inline(p) => p.next(),
            Inner::Threaded { rx, handle } => match rx.recv() {
                Ok(b) => Some(b),
                Err(_) => {
                    if let Some(h) = handle.take() {
                        if h.join().is_err() {
                            return Some(Err(Error::State("batch producer panicked".into())));
                        }
                    }
                    None
                }
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::class_images;

    fn data() -> Arc<Dataset> {
        Arc::new(class_images(10, 3, [1, 4, 4], 0.2, 3).unwrap())
    }

    #[test]
    fn covers_every_sample_once() {
        let mut o = BatchOptions::new(4);
        o.shuffle = true;
        let it = BatchIter::new(data(), o, 0).unwrap();
        assert_eq!(it.num_batches(), 3);
        let sizes: Vec<usize> = it.map(|b| b.unwrap().labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn prefetch_does_not_change_the_stream() {
        let mut o = BatchOptions::new(3);
        o.shuffle = true;
        o.seed = 9;
        o.augment = Some(AugmentConfig::standard(None));
        let a: Vec<Batch> = BatchIter::new(data(), o.clone(), 2).unwrap().map(|b| b.unwrap()).collect();
        o.prefetch = 0;
        let b: Vec<Batch> = BatchIter::new(data(), o, 2).unwrap().map(|b| b.unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn drop_last() {
        let mut o = BatchOptions::new(4);
        o.drop_last = true;
        assert_eq!(BatchIter::new(data(), o, 0).unwrap().count(), 2);
    }
}
