//! Temporal interval geometry: segments in normalized video time, temporal IoU
//! and greedy non-maximum suppression.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// A `[start, end]` interval in normalized video time.
///
/// Normalized time is the canonical representation; grid indices for a
/// sequence of a given length are derived with [`TemporalSegment::start_index`]
/// and [`TemporalSegment::end_index`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalSegment {
    start: f64,
    end: f64,
}

impl TemporalSegment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end > 1.0 || start > end {
            return Err(Error::InvalidSegment { start, end });
        }
        Ok(Self { start, end })
    }

    /// Clamps both endpoints into `[0, 1]` and orders them.
    pub fn clamped(a: f64, b: f64) -> Self {
        let a = if a.is_nan() { 0.0 } else { a.clamp(0.0, 1.0) };
        let b = if b.is_nan() { 0.0 } else { b.clamp(0.0, 1.0) };
        Self {
            start: a.min(b),
            end: a.max(b),
        }
    }

    /// Segment spanning grid indices `[first, last]` of a sequence of `len` steps.
    pub fn from_indices(first: usize, last: usize, len: usize) -> Result<Self> {
        if first > last || last >= len {
            return Err(Error::Precondition(format!(
                "grid indices [{first}, {last}] invalid for length {len}"
            )));
        }
        if len == 1 {
            return Self::new(0.0, 1.0);
        }
        let denom = (len - 1) as f64;
        Self::new(first as f64 / denom, last as f64 / denom)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn start_index(&self, len: usize) -> usize {
        grid_index(self.start, len)
    }

    pub fn end_index(&self, len: usize) -> usize {
        grid_index(self.end, len)
    }

    /// Indicator over a grid of `len` steps: 1 for `start_index <= t <= end_index`.
    pub fn grid_mask(&self, len: usize) -> Vec<bool> {
        let (lo, hi) = (self.start_index(len), self.end_index(len));
        (0..len).map(|t| t >= lo && t <= hi).collect()
    }
}

/// Projects a normalized time onto a grid of `len` steps: `round(x * (len - 1))`.
pub fn grid_index(x: f64, len: usize) -> usize {
    if len <= 1 {
        return 0;
    }
    let idx = (x.clamp(0.0, 1.0) * (len - 1) as f64).round() as usize;
    idx.min(len - 1)
}

/// A candidate segment with a confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSegment {
    pub segment: TemporalSegment,
    pub score: f64,
}

impl ScoredSegment {
    pub fn new(segment: TemporalSegment, score: f64) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::Precondition(format!(
                "segment score {score} outside [0, 1]"
            )));
        }
        Ok(Self { segment, score })
    }
}

/// Intersection over union of two 1-D intervals.
///
/// Two identical zero-length segments denote the same instant and have IoU 1;
/// any other pair with a zero-length union has IoU 0.
pub fn iou(a: &TemporalSegment, b: &TemporalSegment) -> f64 {
    if a.length() == 0.0 || b.length() == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Ordering used for ranking candidates: higher score first, then earlier
/// start, then shorter length.
pub fn rank_order(a: &ScoredSegment, b: &ScoredSegment) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.segment.start.total_cmp(&b.segment.start))
        .then(a.segment.length().total_cmp(&b.segment.length()))
}

/// Greedy temporal non-maximum suppression.
///
/// Candidates are visited in [`rank_order`]; a candidate is dropped iff its
/// IoU with some already-kept candidate exceeds `iou_threshold`. At most
/// `top_n` candidates are returned.
pub fn nms(
    candidates: &[ScoredSegment],
    iou_threshold: f64,
    top_n: usize,
) -> Result<Vec<ScoredSegment>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Precondition(format!(
            "nms threshold {iou_threshold} outside (0, 1]"
        )));
    }
    if top_n == 0 {
        return Err(Error::Precondition("nms top_n must be >= 1".into()));
    }
    let mut order: Vec<ScoredSegment> = candidates.to_vec();
    order.sort_by(rank_order);

    let mut kept: Vec<ScoredSegment> = Vec::with_capacity(top_n.min(order.len()));
    for cand in order {
        if kept.len() == top_n {
            break;
        }
        if kept
            .iter()
            .all(|k| iou(&k.segment, &cand.segment) <= iou_threshold)
        {
            kept.push(cand);
        }
    }
    Ok(kept)
}
