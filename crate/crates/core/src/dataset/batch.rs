use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, GroundingSample};
use crate::error::{Error, Result};

/// A mini-batch with a fixed labeled/unlabeled composition.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub labeled: Vec<&'a GroundingSample>,
    pub unlabeled: Vec<&'a GroundingSample>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `round(fraction * batch_size)`, at least 1 and at most `batch_size`.
pub fn labeled_per_batch(batch_size: usize, fraction: f64) -> usize {
    ((fraction * batch_size as f64).round() as usize).clamp(1, batch_size)
}

/// One epoch of batches using the dataset's own labeled fraction.
pub fn make_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<EpochBatches<'_>> {
    make_batches_with_ratio(dataset, batch_size, dataset.labeled_fraction(), seed)
}

/// One epoch of batches, each holding `labeled_per_batch(batch_size, fraction)`
/// labeled samples and the remainder unlabeled.
///
/// Both pools are shuffled independently; the epoch ends once the larger pool
/// (measured in batches) has been covered, and the other pool cycles with a
/// fresh shuffle whenever it runs out. With no unlabeled samples the batches
/// are fully labeled.
pub fn make_batches_with_ratio(
    dataset: &Dataset,
    batch_size: usize,
    fraction: f64,
    seed: u64,
) -> Result<EpochBatches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction {fraction} outside (0, 1]"
        )));
    }
    let labeled: Vec<&GroundingSample> = dataset.labeled().collect();
    let unlabeled: Vec<&GroundingSample> = dataset.unlabeled().collect();
    if labeled.is_empty() {
        return Err(Error::Precondition(
            "no labeled samples: supervised pretraining is impossible".into(),
        ));
    }
    let per_labeled = if unlabeled.is_empty() {
        batch_size
    } else {
        labeled_per_batch(batch_size, fraction)
    };
    let per_unlabeled = batch_size - per_labeled;
    if labeled.len() < per_labeled && !unlabeled.is_empty() {
        return Err(Error::Precondition(format!(
            "{} labeled samples cannot fill {per_labeled} labeled slots per batch",
            labeled.len()
        )));
    }
    let num_batches = if per_unlabeled == 0 {
        labeled.len().div_ceil(per_labeled)
    } else {
        labeled
            .len()
            .div_ceil(per_labeled)
            .max(unlabeled.len().div_ceil(per_unlabeled))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labeled = CyclingPool::new(labeled, &mut rng);
    let unlabeled = CyclingPool::new(unlabeled, &mut rng);
    Ok(EpochBatches {
        labeled,
        unlabeled,
        per_labeled,
        per_unlabeled,
        remaining: num_batches,
        rng,
    })
}

#[derive(Debug)]
struct CyclingPool<'a> {
    items: Vec<&'a GroundingSample>,
    pos: usize,
}

impl<'a> CyclingPool<'a> {
    fn new(mut items: Vec<&'a GroundingSample>, rng: &mut ChaCha8Rng) -> Self {
        items.shuffle(rng);
        Self { items, pos: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a GroundingSample> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && !self.items.is_empty() {
            if self.pos == self.items.len() {
                self.items.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.items[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Iterator over the batches of one epoch.
#[derive(Debug)]
pub struct EpochBatches<'a> {
    labeled: CyclingPool<'a>,
    unlabeled: CyclingPool<'a>,
    per_labeled: usize,
    per_unlabeled: usize,
    remaining: usize,
    rng: ChaCha8Rng,
}

impl<'a> Iterator for EpochBatches<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let labeled = self.labeled.take(self.per_labeled, &mut self.rng);
        let unlabeled = self.unlabeled.take(self.per_unlabeled, &mut self.rng);
        Some(Batch {
            labeled,
            unlabeled,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for EpochBatches<'_> {}
