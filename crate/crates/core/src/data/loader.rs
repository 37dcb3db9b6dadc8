use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;

use super::augment::{augment, sample_rng, AugmentConfig};
use super::{Dataset, CHANNELS, IMAGE_BYTES, SIDE};
use crate::tensor::Tensor;

/// Batches buffered ahead of the consumer.
pub const PREFETCH_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, 3, 32, 32]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub epoch: u64,
}

fn assemble(data: &Dataset, indices: &[usize], epoch: u64, make: impl Fn(usize) -> Vec<f32>) -> Batch {
    let mut pixels = Vec::with_capacity(indices.len() * IMAGE_BYTES);
    for &i in indices {
        pixels.extend(make(i));
    }
    Batch {
        images: Tensor::new([indices.len(), CHANNELS, SIDE, SIDE], pixels).expect("batch shape"),
        labels: indices.iter().map(|&i| data.label(i)).collect(),
        epoch,
    }
}

/// Endless shuffled, augmented training batches. Each epoch visits a fresh
/// permutation; a trailing partial batch is dropped.
pub struct BatchStream {
    data: Arc<Dataset>,
    cfg: LoaderConfig,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(data: Arc<Dataset>, cfg: LoaderConfig) -> Self {
        let mut s = Self {
            data,
            cfg,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.data.len()).collect();
        let mut rng = sample_rng(self.cfg.seed, u64::MAX, self.epoch);
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn batch_len(&self) -> usize {
        self.cfg.batch_size.min(self.data.len()).max(1)
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.data.is_empty() {
            return None;
        }
        let b = self.batch_len();
        if self.pos + b > self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let idx = &self.order[self.pos..self.pos + b];
        self.pos += b;
        let (data, cfg, epoch) = (&self.data, &self.cfg, self.epoch);
        Some(assemble(data, idx, epoch, |i| {
            let mut rng = sample_rng(cfg.seed, i as u64, epoch);
            augment(&data.image(i), &cfg.augment, &mut rng)
        }))
    }
}

/// Runs a [`BatchStream`] on a background thread with a bounded queue.
pub struct Prefetcher {
    rx: Option<Receiver<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(stream: BatchStream) -> Self {
        let (tx, rx) = sync_channel(PREFETCH_DEPTH);
        let handle = std::thread::Builder::new()
            .name("prefetch".into())
            .spawn(move || {
                for batch in stream {
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
            })
            .expect("spawn prefetch thread");
        Self {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

impl Iterator for Prefetcher {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Dropping the receiver makes the producer's next send fail.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Normalized, unaugmented batches in dataset order.
pub fn eval_batches(data: &Dataset, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
    let cfg = AugmentConfig::eval();
    let all: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Vec<usize>> = all.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| {
        assemble(data, &idx, 0, |i| {
            let mut rng = sample_rng(0, i as u64, 0);
            augment(&data.image(i), &cfg, &mut rng)
        })
    })
}
