//! Sequential perturbations of video feature sequences: time lagging (reverse a
//! short sub-segment), time scaling (resample at a playback rate) and identity.
//!
//! Labels live in normalized time, so none of these change a sample's target.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub theta_set: Vec<f64>,
    /// Lag segment length bounds as fractions of the sequence length.
    pub lag_min_fraction: f64,
    pub lag_max_fraction: f64,
    /// Linear interpolation instead of nearest-frame sampling for time scaling.
    pub interpolate: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            theta_set: vec![0.25, 0.5, 0.75],
            lag_min_fraction: 0.05,
            lag_max_fraction: 0.2,
            interpolate: false,
        }
    }
}

/// A concrete perturbation; lag indices are 1-based and inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    Identity,
    TimeLag { start: usize, end: usize },
    TimeScale { theta: f64 },
}

impl Perturbation {
    pub fn apply(&self, video: &FeatureSequence, interpolate: bool) -> Result<FeatureSequence> {
        match *self {
            Perturbation::Identity => Ok(video.clone()),
            Perturbation::TimeLag { start, end } => time_lagging(video, start, end),
            Perturbation::TimeScale { theta } if interpolate => time_scaling_linear(video, theta),
            Perturbation::TimeScale { theta } => time_scaling(video, theta),
        }
    }
}

/// Reverses rows `start..=end` (1-based) and leaves every other row in place.
pub fn time_lagging(video: &FeatureSequence, start: usize, end: usize) -> Result<FeatureSequence> {
    let len = video.len();
    if !(1 <= start && start <= end && end <= len) {
        return Err(Error::Precondition(format!(
            "lag segment [{start}, {end}] outside 1..={len}"
        )));
    }
    let rows: Vec<usize> = (0..len)
        .map(|t| {
            if t + 1 >= start && t < end {
                (start - 1) + (end - 1) - t
            } else {
                t
            }
        })
        .collect();
    Ok(video.select_rows(&rows))
}

/// Output length of time scaling: `round(len / theta)`.
pub fn scaled_len(len: usize, theta: f64) -> usize {
    ((len as f64 / theta).round() as usize).max(1)
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Precondition(format!(
            "playback rate {theta} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Source row of every output step: `floor(t' * theta)`.
pub fn scaling_indices(len: usize, theta: f64) -> Vec<usize> {
    (0..scaled_len(len, theta))
        .map(|t| ((t as f64 * theta).floor() as usize).min(len - 1))
        .collect()
}

/// Equidistant nearest-frame resampling at playback rate `theta`.
pub fn time_scaling(video: &FeatureSequence, theta: f64) -> Result<FeatureSequence> {
    check_theta(theta)?;
    Ok(video.select_rows(&scaling_indices(video.len(), theta)))
}

/// Time scaling with linear interpolation between neighbouring frames.
pub fn time_scaling_linear(video: &FeatureSequence, theta: f64) -> Result<FeatureSequence> {
    check_theta(theta)?;
    let len = video.len();
    let out_len = scaled_len(len, theta);
    let src = video.data();
    let mut out = Array2::<f32>::zeros((out_len, video.dim()));
    for t in 0..out_len {
        let pos = (t as f64 * theta).min((len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        let w = (pos - lo as f64) as f32;
        for d in 0..video.dim() {
            out[[t, d]] = (1.0 - w) * src[[lo, d]] + w * src[[hi, d]];
        }
    }
    FeatureSequence::new(out)
}

/// Draws one of identity, time lagging or time scaling uniformly.
pub fn random_perturbation<R: Rng>(len: usize, config: &PerturbConfig, rng: &mut R) -> Perturbation {
    match rng.random_range(0..3) {
        0 => Perturbation::Identity,
        1 => {
            let lo = ((config.lag_min_fraction * len as f64).round() as usize).clamp(1, len);
            let hi = ((config.lag_max_fraction * len as f64).round() as usize).clamp(lo, len);
            let span = rng.random_range(lo..=hi);
            let start = rng.random_range(1..=len - span + 1);
            Perturbation::TimeLag {
                start,
                end: start + span - 1,
            }
        }
        _ => {
            if config.theta_set.is_empty() {
                return Perturbation::Identity;
            }
            let theta = config.theta_set[rng.random_range(0..config.theta_set.len())];
            Perturbation::TimeScale { theta }
        }
    }
}

/// Two independently perturbed views of one video.
pub fn random_augment_pair<R: Rng>(
    video: &FeatureSequence,
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<(FeatureSequence, FeatureSequence)> {
    let first = random_perturbation(video.len(), config, rng);
    let second = random_perturbation(video.len(), config, rng);
    Ok((
        first.apply(video, config.interpolate)?,
        second.apply(video, config.interpolate)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(len: usize, dim: usize) -> FeatureSequence {
        FeatureSequence::new(Array2::from_shape_fn((len, dim), |(t, d)| {
            (t * 100 + d) as f32
        }))
        .unwrap()
    }

    fn row_ids(s: &FeatureSequence) -> Vec<usize> {
        s.data().column(0).iter().map(|&v| v as usize / 100).collect()
    }

    #[test]
    fn lag_examples() {
        let v = seq(5, 2);
        assert_eq!(time_lagging(&v, 3, 3).unwrap(), v);
        assert_eq!(row_ids(&time_lagging(&v, 2, 4).unwrap()), vec![0, 3, 2, 1, 4]);
        assert_eq!(row_ids(&time_lagging(&v, 1, 5).unwrap()), vec![4, 3, 2, 1, 0]);
        assert!(time_lagging(&v, 0, 2).is_err());
        assert!(time_lagging(&v, 3, 2).is_err());
        assert!(time_lagging(&v, 2, 6).is_err());
    }

    #[test]
    fn scaling_examples() {
        let v = seq(4, 1);
        assert_eq!(time_scaling(&v, 1.0).unwrap(), v);
        assert_eq!(
            row_ids(&time_scaling(&v, 0.5).unwrap()),
            vec![0, 0, 1, 1, 2, 2, 3, 3]
        );
        // round(4 / 0.75) = 5; floor(t * 0.75) for t in 0..5
        assert_eq!(row_ids(&time_scaling(&v, 0.75).unwrap()), vec![0, 0, 1, 2, 3]);
        assert!(time_scaling(&v, 0.0).is_err());
        assert!(time_scaling(&v, -0.5).is_err());
        assert!(time_scaling(&v, 1.5).is_err());
    }

    #[test]
    fn linear_scaling_matches_nearest_on_integer_positions() {
        let v = seq(6, 3);
        assert_eq!(time_scaling_linear(&v, 1.0).unwrap(), v);
        let lin = time_scaling_linear(&v, 0.5).unwrap();
        assert_eq!(lin.len(), 12);
        assert_eq!(lin.data()[[1, 0]], 50.0);
    }

    #[test]
    fn identity_pair_is_two_copies() {
        let v = seq(10, 2);
        let cfg = PerturbConfig::default();
        let seed = (0u64..)
            .find(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_perturbation(v.len(), &cfg, &mut rng);
                let b = random_perturbation(v.len(), &cfg, &mut rng);
                a == Perturbation::Identity && b == Perturbation::Identity
            })
            .unwrap();
        let (a, b) = random_augment_pair(&v, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(a, v);
        assert_eq!(b, v);
    }

    #[test]
    fn augment_pair_reproducible() {
        let v = seq(32, 2);
        let cfg = PerturbConfig::default();
        let a = random_augment_pair(&v, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = random_augment_pair(&v, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lag_lengths_within_bounds() {
        let cfg = PerturbConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            if let Perturbation::TimeLag { start, end } = random_perturbation(100, &cfg, &mut rng) {
                let span = end - start + 1;
                assert!((5..=20).contains(&span));
                assert!(start >= 1 && end <= 100);
            }
        }
    }

    proptest! {
        #[test]
        fn lagging_is_an_involution_preserving_rows(len in 1usize..40, a in 0usize..40, b in 0usize..40) {
            let v = seq(len, 3);
            let (s, e) = (a.min(b) % len + 1, a.max(b) % len + 1);
            prop_assume!(s <= e);
            let once = time_lagging(&v, s, e).unwrap();
            prop_assert_eq!(time_lagging(&once, s, e).unwrap(), v.clone());
            let mut ids = row_ids(&once);
            ids.sort();
            prop_assert_eq!(ids, (0..len).collect::<Vec<_>>());
        }

        #[test]
        fn integer_rate_repeats_rows(len in 1usize..30, m in 1usize..5) {
            let v = seq(len, 2);
            let out = time_scaling(&v, 1.0 / m as f64).unwrap();
            prop_assert_eq!(out.len(), len * m);
            let ids = row_ids(&out);
            for (t, chunk) in ids.chunks(m).enumerate() {
                prop_assert!(chunk.iter().all(|&i| i == t));
            }
        }

        #[test]
        fn perturbations_commute_with_row_maps(len in 2usize..30, seed in 0u64..100) {
            let v = seq(len, 2);
            let mapped = FeatureSequence::new(v.data().mapv(|x| x * 0.5 - 3.0)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_perturbation(len, &PerturbConfig::default(), &mut rng);
            let after = p.apply(&v, false).unwrap();
            let after = FeatureSequence::new(after.data().mapv(|x| x * 0.5 - 3.0)).unwrap();
            prop_assert_eq!(p.apply(&mapped, false).unwrap(), after);
        }
    }
}
