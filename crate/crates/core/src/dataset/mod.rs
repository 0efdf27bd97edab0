//! Grounding samples, synthetic generation, feature-file ingestion and
//! labeled/unlabeled batch sampling.

mod batch;
mod io;
mod synthetic;

pub use batch::{labeled_per_batch, make_batches, make_batches_with_ratio, Batch, EpochBatches};
pub use io::{
    load_features, load_split, load_split_with_workers, read_features, save_dataset, write_features,
    MANIFEST_NAME, SENTENCE_MAGIC, VIDEO_MAGIC,
};
pub use synthetic::{
    generate_synthetic, SignatureOracle, Splits, SplitsConfig, SyntheticConfig, SyntheticWorld,
};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::temporal::TemporalSegment;

/// A `len x dim` matrix of per-step features, stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Shape(format!(
                "feature sequence must be non-empty, got {:?}",
                data.dim()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition(
                "feature sequence contains non-finite values".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn to_f64(&self) -> Matrix {
        self.data.mapv(f64::from)
    }

    /// New sequence made of the given source rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = Array2::zeros((rows.len(), self.dim()));
        for (dst, &src) in rows.iter().enumerate() {
            out.row_mut(dst).assign(&self.data.row(src));
        }
        Self { data: out }
    }

    /// Uniformly subsamples to at most `max_len` rows.
    pub fn limit_len(&self, max_len: usize) -> Self {
        if self.len() <= max_len {
            return self.clone();
        }
        self.select_rows(&uniform_indices(self.len(), max_len))
    }
}

/// Equidistant source indices `floor(i * src / dst)` for `i in 0..dst`.
pub fn uniform_indices(src: usize, dst: usize) -> Vec<usize> {
    (0..dst).map(|i| (i * src / dst).min(src - 1)).collect()
}

/// One video-sentence pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub id: String,
    pub video: FeatureSequence,
    pub sentence: FeatureSequence,
    /// Ground-truth segment visible to training; `None` for unlabeled samples.
    pub label: Option<TemporalSegment>,
    /// Recorded ground truth, kept for evaluation even when `label` is masked.
    pub reference: Option<TemporalSegment>,
}

impl GroundingSample {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<GroundingSample>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<GroundingSample>, split: Split) -> Self {
        Self { samples, split }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fraction of samples carrying a label; 1 for an empty dataset.
    pub fn labeled_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 1.0;
        }
        self.num_labeled() as f64 / self.samples.len() as f64
    }

    pub fn num_labeled(&self) -> usize {
        self.samples.iter().filter(|s| s.is_labeled()).count()
    }

    pub fn labeled(&self) -> impl Iterator<Item = &GroundingSample> {
        self.samples.iter().filter(|s| s.is_labeled())
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &GroundingSample> {
        self.samples.iter().filter(|s| !s.is_labeled())
    }

    /// Only the labeled samples.
    pub fn labeled_subset(&self) -> Dataset {
        Dataset::new(self.labeled().cloned().collect(), self.split)
    }

    /// Keeps labels on a uniformly random subset of `round(fraction * n)`
    /// samples (at least one when the dataset is non-empty) and hides the rest.
    /// Labels are restored from `reference` first, so masking is never cumulative.
    /// Features are untouched.
    pub fn mask_labels(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled fraction {fraction} outside (0, 1]"
            )));
        }
        let n = self.samples.len();
        let keep = ((fraction * n as f64).round() as usize).clamp(n.min(1), n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_6265_6c73);
        order.shuffle(&mut rng);
        let mut keep_mask = vec![false; n];
        for &i in &order[..keep] {
            keep_mask[i] = true;
        }
        let samples = self
            .samples
            .iter()
            .zip(keep_mask)
            .map(|(s, keep)| {
                let mut s = s.clone();
                s.label = if keep { s.reference } else { None };
                s
            })
            .collect();
        Ok(Dataset::new(samples, self.split))
    }

    /// Labels every sample from its recorded reference segment.
    pub fn fully_labeled(&self) -> Dataset {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.label = s.reference.or(s.label);
                s
            })
            .collect();
        Dataset::new(samples, self.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_indices_cover_range() {
        assert_eq!(uniform_indices(4, 2), vec![0, 2]);
        assert_eq!(uniform_indices(200, 128).len(), 128);
        assert_eq!(*uniform_indices(200, 128).last().unwrap(), 198);
        assert_eq!(uniform_indices(3, 3), vec![0, 1, 2]);
    }

    #[test]
    fn feature_sequence_rejects_non_finite() {
        let mut d = Array2::<f32>::zeros((2, 2));
        d[[1, 1]] = f32::NAN;
        assert!(FeatureSequence::new(d).is_err());
        assert!(FeatureSequence::new(Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn masking_keeps_requested_fraction() {
        let cfg = SyntheticConfig {
            num_samples: 50,
            ..SyntheticConfig::small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let masked = ds.mask_labels(0.1, 3).unwrap();
        assert_eq!(masked.num_labeled(), 5);
        let again = masked.mask_labels(0.5, 3).unwrap();
        assert_eq!(again.num_labeled(), 25);
        assert!(ds.mask_labels(0.0, 1).is_err());
        for s in masked.labeled() {
            assert_eq!(s.label, s.reference);
        }
    }
}
