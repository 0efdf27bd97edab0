//! The "R@n, IoU=m" grounding metric and metric tables.

use std::fmt::Write as _;

use crate::dataset::{Dataset, FeatureSequence, GroundingSample};
use crate::error::{Error, Result};
use crate::model::GroundingModel;
use crate::params::ParamStore;
use crate::temporal::{iou, ScoredSegment, TemporalSegment};

pub const RECALL_COUNTS: [usize; 2] = [1, 5];
pub const IOU_THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

/// Percentage of queries whose top-`n` predictions contain one with IoU
/// strictly greater than `m` against the ground truth.
pub fn recall_at(
    predictions: &[Vec<ScoredSegment>],
    ground_truths: &[TemporalSegment],
    n: usize,
    m: f64,
) -> Result<f64> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::Shape(format!(
            "{} prediction lists for {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Precondition("no queries to evaluate".into()));
    }
    if n == 0 {
        return Err(Error::Precondition("recall count n must be positive".into()));
    }
    let mut hits = 0usize;
    for (q, (preds, gt)) in predictions.iter().zip(ground_truths).enumerate() {
        if preds.is_empty() {
            return Err(Error::Precondition(format!("query {q} has no predictions")));
        }
        if preds.iter().take(n).any(|p| iou(&p.segment, gt) > m) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// Recall values over the `n x m` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    /// `values[i][j]` is R@`RECALL_COUNTS[i]`, IoU=`IOU_THRESHOLDS[j]`.
    pub values: [[f64; 4]; 2],
}

impl MetricTable {
    pub fn compute(predictions: &[Vec<ScoredSegment>], ground_truths: &[TemporalSegment]) -> Result<Self> {
        let mut values = [[0.0; 4]; 2];
        for (i, &n) in RECALL_COUNTS.iter().enumerate() {
            for (j, &m) in IOU_THRESHOLDS.iter().enumerate() {
                values[i][j] = recall_at(predictions, ground_truths, n, m)?;
            }
        }
        Ok(Self { values })
    }

    pub fn get(&self, n: usize, m: f64) -> Option<f64> {
        let i = RECALL_COUNTS.iter().position(|&x| x == n)?;
        let j = IOU_THRESHOLDS.iter().position(|&x| (x - m).abs() < 1e-12)?;
        Some(self.values[i][j])
    }

    /// The model-selection metric, R@1 at IoU 0.5.
    pub fn primary(&self) -> f64 {
        self.values[0][2]
    }

    pub fn len(&self) -> usize {
        RECALL_COUNTS.len() * IOU_THRESHOLDS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(column name, value)` pairs in grid order, e.g. `r1_iou0.5`.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for (i, n) in RECALL_COUNTS.iter().enumerate() {
            for (j, m) in IOU_THRESHOLDS.iter().enumerate() {
                out.push((format!("r{n}_iou{m}"), self.values[i][j]));
            }
        }
        out
    }

    /// CSV with header `n,iou,recall`, one row per grid cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,iou,recall\n");
        for (i, n) in RECALL_COUNTS.iter().enumerate() {
            for (j, m) in IOU_THRESHOLDS.iter().enumerate() {
                let _ = writeln!(s, "{n},{m},{:.4}", self.values[i][j]);
            }
        }
        s
    }

    /// Aligned text table with one row per `n` and one column per `m`.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<6}", "");
        for m in IOU_THRESHOLDS {
            let _ = write!(s, "{:>10}", format!("IoU={m}"));
        }
        s.push('\n');
        for (i, n) in RECALL_COUNTS.iter().enumerate() {
            let _ = write!(s, "{:<6}", format!("R@{n}"));
            for v in self.values[i] {
                let _ = write!(s, "{v:>10.2}");
            }
            s.push('\n');
        }
        s
    }
}

fn references(dataset: &Dataset) -> Result<Vec<TemporalSegment>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            s.reference
                .or(s.label)
                .ok_or_else(|| Error::Precondition(format!("sample {} has no ground truth", s.id)))
        })
        .collect()
}

/// Evaluates an arbitrary predictor returning ranked segments per sample.
pub fn evaluate_predictor<F>(dataset: &Dataset, mut predictor: F) -> Result<MetricTable>
where
    F: FnMut(&GroundingSample) -> Result<Vec<ScoredSegment>>,
{
    let gts = references(dataset)?;
    let preds = dataset.samples.iter().map(&mut predictor).collect::<Result<Vec<_>>>()?;
    MetricTable::compute(&preds, &gts)
}

/// Runs inference over every sample. Regression models yield a single
/// segment, which makes R@5 equal R@1; proposal models yield the NMS top-5.
pub fn evaluate_model(
    model: &GroundingModel,
    store: &ParamStore,
    dataset: &Dataset,
    nms_threshold: f64,
) -> Result<MetricTable> {
    let gts = references(dataset)?;
    let pairs: Vec<(&FeatureSequence, &FeatureSequence)> =
        dataset.samples.iter().map(|s| (&s.video, &s.sentence)).collect();
    let top_n = RECALL_COUNTS[RECALL_COUNTS.len() - 1];
    let preds = model
        .predict(store, &pairs)?
        .iter()
        .map(|p| model.rank(p, nms_threshold, top_n))
        .collect::<Result<Vec<_>>>()?;
    MetricTable::compute(&preds, &gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SignatureOracle, SyntheticConfig, SyntheticWorld};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scored(s: f64, e: f64) -> ScoredSegment {
        ScoredSegment {
            segment: TemporalSegment::new(s, e).unwrap(),
            score: 1.0,
        }
    }

    #[test]
    fn exact_and_disjoint_predictions() {
        let gts = vec![TemporalSegment::new(0.1, 0.3).unwrap(), TemporalSegment::new(0.5, 0.9).unwrap()];
        let exact: Vec<_> = gts.iter().map(|g| vec![ScoredSegment { segment: *g, score: 1.0 }]).collect();
        let table = MetricTable::compute(&exact, &gts).unwrap();
        assert!(table.values.iter().flatten().all(|&v| v == 100.0));
        let disjoint = vec![vec![scored(0.6, 0.7)], vec![scored(0.0, 0.2)]];
        let table = MetricTable::compute(&disjoint, &gts).unwrap();
        assert!(table.values.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(table.len(), 8);
        assert_eq!(table.entries().len(), 8);
    }

    #[test]
    fn hand_counted_half() {
        let gts = vec![TemporalSegment::new(0.0, 1.0).unwrap(); 2];
        // iou equals the predicted length against the full interval
        let preds = vec![vec![scored(0.0, 0.6)], vec![scored(0.3, 0.5)]];
        assert_eq!(recall_at(&preds, &gts, 1, 0.5).unwrap(), 50.0);
    }

    #[test]
    fn strict_threshold() {
        let gts = vec![TemporalSegment::new(0.0, 1.0).unwrap()];
        let preds = vec![vec![scored(0.0, 0.5)]];
        assert_eq!(recall_at(&preds, &gts, 1, 0.5).unwrap(), 0.0);
        assert_eq!(recall_at(&preds, &gts, 1, 0.3).unwrap(), 100.0);
    }

    #[test]
    fn invalid_inputs() {
        let gts = vec![TemporalSegment::new(0.0, 1.0).unwrap()];
        assert!(recall_at(&[vec![]], &gts, 1, 0.5).is_err());
        assert!(recall_at(&[], &[], 1, 0.5).is_err());
        assert!(recall_at(&[vec![scored(0.0, 1.0)]], &gts, 0, 0.5).is_err());
        assert!(recall_at(&vec![vec![scored(0.0, 1.0)]; 2], &gts, 1, 0.5).is_err());
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<ScoredSegment>>, Vec<TemporalSegment>) {
        let q = rng.random_range(1..20);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..q {
            gts.push(TemporalSegment::clamped(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)));
            let k = rng.random_range(1..8);
            preds.push(
                (0..k)
                    .map(|_| ScoredSegment {
                        segment: TemporalSegment::clamped(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                        score: rng.random_range(0.0..1.0),
                    })
                    .collect(),
            );
        }
        (preds, gts)
    }

    #[test]
    fn matches_brute_force_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (preds, gts) = random_instance(&mut rng);
            for n in RECALL_COUNTS {
                for m in IOU_THRESHOLDS {
                    let mut count = 0;
                    for q in 0..gts.len() {
                        let mut best: f64 = 0.0;
                        for p in preds[q].iter().take(n) {
                            let inter = (p.segment.end().min(gts[q].end()) - p.segment.start().max(gts[q].start())).max(0.0);
                            let union = p.segment.end().max(gts[q].end()) - p.segment.start().min(gts[q].start());
                            let v = if union > 0.0 { inter / union } else { f64::from(u8::from(p.segment == gts[q])) };
                            best = best.max(v);
                        }
                        if best > m {
                            count += 1;
                        }
                    }
                    let expected = 100.0 * count as f64 / gts.len() as f64;
                    assert_eq!(recall_at(&preds, &gts, n, m).unwrap(), expected);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_n_and_m(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (preds, gts) = random_instance(&mut rng);
            let t = MetricTable::compute(&preds, &gts).unwrap();
            for j in 0..4 {
                prop_assert!(t.values[1][j] >= t.values[0][j]);
                if j > 0 {
                    prop_assert!(t.values[0][j] <= t.values[0][j - 1]);
                    prop_assert!(t.values[1][j] <= t.values[1][j - 1]);
                }
            }
        }
    }

    #[test]
    fn text_and_csv_layout() {
        let t = MetricTable {
            values: [[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]],
        };
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.contains("1,0.5,3.0000"));
        let text = t.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().starts_with("R@5"));
        assert_eq!(t.get(5, 0.7), Some(8.0));
        assert_eq!(t.get(2, 0.7), None);
        assert_eq!(t.primary(), 3.0);
    }

    #[test]
    fn zero_noise_oracle_is_perfect() {
        let cfg = SyntheticConfig {
            noise_sigma: 0.0,
            num_samples: 60,
            video_len: 64,
            ..SyntheticConfig::small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let world = SyntheticWorld::new(cfg.video_dim, cfg.word_dim, cfg.num_concepts, cfg.seed);
        let oracle = SignatureOracle::new(&world);
        let table = evaluate_predictor(&ds, |s| {
            Ok(vec![ScoredSegment {
                segment: oracle.localize(s),
                score: 1.0,
            }])
        })
        .unwrap();
        assert_eq!(table.primary(), 100.0);
    }
}
