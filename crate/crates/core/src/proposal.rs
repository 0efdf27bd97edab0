//! Proposal grounding head: anchor confidences, boundary probabilities,
//! weighted cross-entropy losses and joint scoring with NMS.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var};
use crate::encoders::{FusedVideo, Linear};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::temporal::{grid_index, iou, nms, ScoredSegment, TemporalSegment};

/// Probability clamp used in every cross-entropy term.
pub const PROB_EPS: f64 = 1e-8;
/// Upper clamp of inverse-frequency positive weights.
pub const MAX_POSITIVE_WEIGHT: f64 = 100.0;

/// Anchor widths in normalized time; anchor `(t, k)` is
/// `[max(0, t/(T-1) - w_k), t/(T-1)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    widths: Vec<f64>,
}

impl AnchorSet {
    pub fn new(widths: Vec<f64>) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("anchor set needs at least one width".into()));
        }
        if widths.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::Config(format!("anchor widths {widths:?} must lie in (0, 1]")));
        }
        if widths.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!(
                "anchor widths {widths:?} must be strictly increasing"
            )));
        }
        Ok(Self { widths })
    }

    /// Widths 1/16, 1/8, 1/4, 1/2.
    pub fn standard() -> Self {
        Self {
            widths: vec![0.0625, 0.125, 0.25, 0.5],
        }
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn anchor(&self, t: usize, k: usize, len: usize) -> TemporalSegment {
        let end = if len > 1 { t as f64 / (len - 1) as f64 } else { 1.0 };
        TemporalSegment::clamped(end - self.widths[k], end)
    }
}

/// Anchor confidences `c` (`T x K`) and boundary probabilities `b` (`T`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalGrid {
    pub c: Array2<f64>,
    pub b: Vec<f64>,
}

impl ProposalGrid {
    pub fn new(c: Array2<f64>, b: Vec<f64>) -> Result<Self> {
        if c.nrows() != b.len() || c.nrows() == 0 {
            return Err(Error::Shape(format!(
                "anchor grid {:?} and {} boundary probabilities disagree",
                c.dim(),
                b.len()
            )));
        }
        if c.iter().chain(&b).any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Precondition("proposal probabilities outside [0, 1]".into()));
        }
        Ok(Self { c, b })
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }
}

/// Graph nodes of a proposal prediction: `c` is `T x K`, `b` is `T x 1`.
#[derive(Debug, Clone, Copy)]
pub struct ProposalOutput {
    pub c: Var,
    pub b: Var,
}

impl ProposalOutput {
    pub fn grid(&self, g: &Graph) -> ProposalGrid {
        ProposalGrid {
            c: g.value(self.c).clone(),
            b: g.value(self.b).iter().copied().collect(),
        }
    }
}

/// Per-timestep sigmoid heads over the fused video.
#[derive(Debug, Clone)]
pub struct ProposalHead {
    anchor: Linear,
    boundary: Linear,
}

impl ProposalHead {
    pub fn new<R: Rng>(store: &mut ParamStore, hidden: usize, anchors: &AnchorSet, rng: &mut R) -> Self {
        Self {
            anchor: Linear::new(store, "proposal.anchor", hidden, anchors.len(), rng),
            boundary: Linear::new(store, "proposal.boundary", hidden, 1, rng),
        }
    }

    pub fn predict(&self, g: &mut Graph, store: &ParamStore, fused: &FusedVideo) -> ProposalOutput {
        let c = self.anchor.forward(g, store, fused.h_p);
        let b = self.boundary.forward(g, store, fused.h_p);
        ProposalOutput {
            c: g.sigmoid(c),
            b: g.sigmoid(b),
        }
    }
}

fn anchor_mask(segment: &TemporalSegment, anchors: &AnchorSet, len: usize, inclusive: bool) -> Array2<bool> {
    Array2::from_shape_fn((len, anchors.len()), |(t, k)| {
        let v = iou(&anchors.anchor(t, k, len), segment);
        if inclusive {
            v >= 0.5
        } else {
            v > 0.5
        }
    })
}

/// `c_hat[t, k] = iou(anchor(t, k), gt) > 0.5`.
pub fn anchor_targets(gt: &TemporalSegment, anchors: &AnchorSet, len: usize) -> Array2<bool> {
    anchor_mask(gt, anchors, len, false)
}

/// Same geometry with the inclusive threshold `>= 0.5` used for pseudo labels.
pub fn pseudo_anchor_targets(segment: &TemporalSegment, anchors: &AnchorSet, len: usize) -> Array2<bool> {
    anchor_mask(segment, anchors, len, true)
}

/// Set bits at the grid-projected start and end.
pub fn boundary_targets(gt: &TemporalSegment, len: usize) -> Vec<bool> {
    let mut b = vec![false; len];
    b[gt.start_index(len)] = true;
    b[gt.end_index(len)] = true;
    b
}

/// Supervision targets of one sample for the proposal losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalTargets {
    pub anchors: Array2<bool>,
    pub boundaries: Vec<bool>,
}

impl ProposalTargets {
    pub fn ground_truth(gt: &TemporalSegment, anchors: &AnchorSet, len: usize) -> Self {
        Self {
            anchors: anchor_targets(gt, anchors, len),
            boundaries: boundary_targets(gt, len),
        }
    }

    pub fn pseudo(segment: &TemporalSegment, anchors: &AnchorSet, len: usize) -> Self {
        Self {
            anchors: pseudo_anchor_targets(segment, anchors, len),
            boundaries: boundary_targets(segment, len),
        }
    }
}

/// `clamp(#neg / #pos, 1, 100)`; `100` when there are no positives.
pub fn positive_weight(positives: usize, negatives: usize) -> f64 {
    if positives == 0 {
        return MAX_POSITIVE_WEIGHT;
    }
    (negatives as f64 / positives as f64).clamp(1.0, MAX_POSITIVE_WEIGHT)
}

/// Positive and negative weights per anchor scale and for boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub anchor_pos: Vec<f64>,
    pub anchor_neg: Vec<f64>,
    pub boundary_pos: f64,
    pub boundary_neg: f64,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        Self {
            anchor_pos: vec![1.0; k],
            anchor_neg: vec![1.0; k],
            boundary_pos: 1.0,
            boundary_neg: 1.0,
        }
    }
}

/// Per-column inverse-frequency positive weights over a set of target grids.
pub fn column_weights(grids: &[&Array2<bool>], global: bool) -> Vec<f64> {
    let cols = grids.first().map_or(0, |g| g.ncols());
    let mut pos = vec![0usize; cols];
    let mut total = vec![0usize; cols];
    for grid in grids {
        for row in grid.rows() {
            for (k, &bit) in row.iter().enumerate() {
                pos[k] += usize::from(bit);
                total[k] += 1;
            }
        }
    }
    if global {
        let p: usize = pos.iter().sum();
        let n: usize = total.iter().sum::<usize>() - p;
        return vec![positive_weight(p, n); cols];
    }
    pos.iter()
        .zip(&total)
        .map(|(&p, &n)| positive_weight(p, n - p))
        .collect()
}

/// Class weights for a batch of targets: per anchor scale, or one shared
/// anchor weight when `global` is set. Negative weights are 1.
pub fn compute_class_weights(targets: &[&ProposalTargets], global: bool) -> ClassWeights {
    let anchor_grids: Vec<&Array2<bool>> = targets.iter().map(|t| &t.anchors).collect();
    let anchor_pos = column_weights(&anchor_grids, global);
    let boundary_grids: Vec<Array2<bool>> = targets
        .iter()
        .map(|t| Array2::from_shape_vec((t.boundaries.len(), 1), t.boundaries.clone()).expect("column"))
        .collect();
    let boundary_refs: Vec<&Array2<bool>> = boundary_grids.iter().collect();
    let boundary_pos = column_weights(&boundary_refs, false).first().copied().unwrap_or(1.0);
    ClassWeights {
        anchor_neg: vec![1.0; anchor_pos.len()],
        anchor_pos,
        boundary_pos,
        boundary_neg: 1.0,
    }
}

/// `-sum w+ y log p + w- (1 - y) log(1 - p)` with `p` clamped to `[eps, 1 - eps]`
/// and per-column weights.
fn weighted_bce(g: &mut Graph, p: Var, targets: &Array2<bool>, pos: &[f64], neg: &[f64]) -> Result<Var> {
    if g.shape(p) != targets.dim() || pos.len() != targets.ncols() || neg.len() != targets.ncols() {
        return Err(Error::Shape(format!(
            "predictions {:?}, targets {:?}, {} weights",
            g.shape(p),
            targets.dim(),
            pos.len()
        )));
    }
    let wp = Matrix::from_shape_fn(targets.dim(), |(t, k)| if targets[[t, k]] { pos[k] } else { 0.0 });
    let wn = Matrix::from_shape_fn(targets.dim(), |(t, k)| if targets[[t, k]] { 0.0 } else { neg[k] });
    let clamped = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(clamped);
    let q = g.one_minus(clamped);
    let log_q = g.log(q);
    let wp = g.constant(wp);
    let wn = g.constant(wn);
    let a = g.mul(log_p, wp);
    let b = g.mul(log_q, wn);
    let s = g.add(a, b);
    let total = g.sum(s);
    Ok(g.scale(total, -1.0))
}

pub fn anchor_loss_graph(g: &mut Graph, c: Var, targets: &Array2<bool>, weights: &ClassWeights) -> Result<Var> {
    weighted_bce(g, c, targets, &weights.anchor_pos, &weights.anchor_neg)
}

pub fn boundary_loss_graph(g: &mut Graph, b: Var, targets: &[bool], weights: &ClassWeights) -> Result<Var> {
    let grid = Array2::from_shape_vec((targets.len(), 1), targets.to_vec()).expect("column");
    weighted_bce(g, b, &grid, &[weights.boundary_pos], &[weights.boundary_neg])
}

/// Anchor loss plus `alpha` times boundary loss.
pub fn proposal_task_graph(
    g: &mut Graph,
    output: &ProposalOutput,
    targets: &ProposalTargets,
    weights: &ClassWeights,
    alpha: f64,
) -> Result<Var> {
    let a = anchor_loss_graph(g, output.c, &targets.anchors, weights)?;
    if alpha == 0.0 {
        return Ok(a);
    }
    let b = boundary_loss_graph(g, output.b, &targets.boundaries, weights)?;
    let b = g.scale(b, alpha);
    Ok(g.add(a, b))
}

fn constant_output(g: &mut Graph, grid: &ProposalGrid) -> ProposalOutput {
    ProposalOutput {
        c: g.constant(grid.c.clone()),
        b: g.constant(Matrix::from_shape_vec((grid.b.len(), 1), grid.b.clone()).expect("column")),
    }
}

pub fn anchor_loss(targets: &Array2<bool>, c: &Array2<f64>, weights: &ClassWeights) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.constant(c.clone());
    let l = anchor_loss_graph(&mut g, c, targets, weights)?;
    Ok(g.scalar(l))
}

pub fn boundary_loss(targets: &[bool], b: &[f64], weights: &ClassWeights) -> Result<f64> {
    let mut g = Graph::new();
    let b = g.constant(Matrix::from_shape_vec((b.len(), 1), b.to_vec()).expect("column"));
    let l = boundary_loss_graph(&mut g, b, targets, weights)?;
    Ok(g.scalar(l))
}

pub fn proposal_task_loss(
    grid: &ProposalGrid,
    targets: &ProposalTargets,
    weights: &ClassWeights,
    alpha: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let out = constant_output(&mut g, grid);
    let l = proposal_task_graph(&mut g, &out, targets, weights, alpha)?;
    Ok(g.scalar(l))
}

/// Every anchor scored `c[t, k] * sqrt(b[idx(s)] * b[idx(e)])`.
pub fn joint_scores(grid: &ProposalGrid, anchors: &AnchorSet) -> Vec<ScoredSegment> {
    let len = grid.len();
    let mut out = Vec::with_capacity(len * anchors.len());
    for t in 0..len {
        for k in 0..anchors.len() {
            let segment = anchors.anchor(t, k, len);
            let bs = grid.b[grid_index(segment.start(), len)];
            let be = grid.b[grid_index(segment.end(), len)];
            let score = (grid.c[[t, k]] * (bs * be).sqrt()).clamp(0.0, 1.0);
            out.push(ScoredSegment { segment, score });
        }
    }
    out
}

/// Joint scoring followed by NMS; the first element is the final prediction.
pub fn joint_score_and_select(
    grid: &ProposalGrid,
    anchors: &AnchorSet,
    nms_threshold: f64,
    top_n: usize,
) -> Result<Vec<ScoredSegment>> {
    if grid.c.ncols() != anchors.len() {
        return Err(Error::Shape(format!(
            "grid has {} anchor columns, anchor set has {}",
            grid.c.ncols(),
            anchors.len()
        )));
    }
    nms(&joint_scores(grid, anchors), nms_threshold, top_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{input_gradient_error, param_gradient_error};
    use crate::temporal::rank_order;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_segment(rng: &mut ChaCha8Rng) -> TemporalSegment {
        TemporalSegment::clamped(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
    }

    fn random_grid(len: usize, k: usize, rng: &mut ChaCha8Rng) -> ProposalGrid {
        ProposalGrid::new(
            Array2::from_shape_fn((len, k), |_| rng.random_range(0.0..1.0)),
            (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn anchor_geometry() {
        let a = AnchorSet::standard();
        assert_eq!(a.anchor(0, 0, 17), TemporalSegment::new(0.0, 0.0).unwrap());
        let s = a.anchor(16, 3, 17);
        assert_eq!((s.start(), s.end()), (0.5, 1.0));
        assert!(AnchorSet::new(vec![]).is_err());
        assert!(AnchorSet::new(vec![0.2, 0.1]).is_err());
        assert!(AnchorSet::new(vec![0.0, 0.1]).is_err());
        assert!(AnchorSet::new(vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn anchor_target_examples() {
        let anchors = AnchorSet::new(vec![0.25, 0.5]).unwrap();
        let gt = anchors.anchor(6, 1, 9);
        let c = anchor_targets(&gt, &anchors, 9);
        assert!(c[[6, 1]]);
        let far = TemporalSegment::new(0.9, 1.0).unwrap();
        let c = anchor_targets(&far, &anchors, 9);
        assert!(c.row(2).iter().all(|&x| !x));
    }

    #[test]
    fn anchor_targets_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let k = rng.random_range(1..=3);
            let mut widths: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            widths.sort_by(f64::total_cmp);
            widths.dedup();
            let anchors = AnchorSet::new(widths.clone()).unwrap();
            let gt = random_segment(&mut rng);
            let c = anchor_targets(&gt, &anchors, 16);
            for t in 0..16 {
                for (k, w) in widths.iter().enumerate() {
                    let end = t as f64 / 15.0;
                    let start = (end - w).max(0.0);
                    let inter = (end.min(gt.end()) - start.max(gt.start())).max(0.0);
                    let union = (end - start) + gt.length() - inter;
                    let expect = if union == 0.0 || end - start == 0.0 || gt.length() == 0.0 {
                        (start == gt.start() && end == gt.end()) && 1.0 > 0.5
                    } else {
                        inter / union > 0.5
                    };
                    assert_eq!(c[[t, k]], expect, "t {t} k {k} gt {gt:?}");
                }
            }
        }
    }

    #[test]
    fn boundary_target_examples() {
        let b = boundary_targets(&TemporalSegment::new(0.0, 1.0).unwrap(), 10);
        assert!(b[0] && b[9]);
        assert_eq!(b.iter().filter(|&&x| x).count(), 2);
        let z = boundary_targets(&TemporalSegment::new(0.5, 0.5).unwrap(), 11);
        assert_eq!(z.iter().filter(|&&x| x).count(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let gt = random_segment(&mut rng);
            let b = boundary_targets(&gt, 32);
            let s = (gt.start() * 31.0).round() as usize;
            let e = (gt.end() * 31.0).round() as usize;
            let set: Vec<usize> = (0..32).filter(|&t| b[t]).collect();
            assert!(set.len() <= 2);
            assert!(set.contains(&s) && set.contains(&e));
        }
    }

    #[test]
    fn bce_examples() {
        let w = ClassWeights::uniform(1);
        let t = Array2::from_elem((1, 1), true);
        let l = anchor_loss(&t, &Array2::from_elem((1, 1), 0.5), &w).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let l = boundary_loss(&[true], &[0.5], &w).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        let targets = Array2::from_shape_vec((2, 2), vec![true, false, false, true]).unwrap();
        let saturated = targets.mapv(|x| f64::from(u8::from(x)));
        let l = anchor_loss(&targets, &saturated, &w.clone_with(2)).unwrap();
        assert!((0.0..1e-6).contains(&l));
        let bl = boundary_loss(&[true, false], &[1.0, 0.0], &w).unwrap();
        assert!((0.0..1e-6).contains(&bl));

        // doubling the positive weight doubles the positive term exactly
        let c = Array2::from_shape_vec((2, 2), vec![0.3, 0.6, 0.2, 0.9]).unwrap();
        let pos_only = Array2::from_elem((2, 2), true);
        let one = anchor_loss(&pos_only, &c, &w.clone_with(2)).unwrap();
        let mut doubled = w.clone_with(2);
        doubled.anchor_pos = vec![2.0, 2.0];
        assert_eq!(anchor_loss(&pos_only, &c, &doubled).unwrap(), 2.0 * one);
        let mut db = w.clone();
        db.boundary_pos = 2.0;
        assert_eq!(
            boundary_loss(&[true, true], &[0.3, 0.8], &db).unwrap(),
            2.0 * boundary_loss(&[true, true], &[0.3, 0.8], &w).unwrap()
        );
    }

    impl ClassWeights {
        fn clone_with(&self, k: usize) -> Self {
            Self {
                anchor_pos: vec![self.anchor_pos[0]; k],
                anchor_neg: vec![self.anchor_neg[0]; k],
                ..self.clone()
            }
        }
    }

    #[test]
    fn task_loss_combination() {
        let w = ClassWeights::uniform(1);
        let grid = ProposalGrid::new(Array2::from_elem((2, 1), 0.4), vec![0.7, 0.2]).unwrap();
        let targets = ProposalTargets {
            anchors: Array2::from_shape_vec((2, 1), vec![true, false]).unwrap(),
            boundaries: vec![false, true],
        };
        let a = anchor_loss(&targets.anchors, &grid.c, &w).unwrap();
        let b = boundary_loss(&targets.boundaries, &grid.b, &w).unwrap();
        assert_eq!(proposal_task_loss(&grid, &targets, &w, 0.0).unwrap(), a);
        assert!((proposal_task_loss(&grid, &targets, &w, 1.0).unwrap() - (a + b)).abs() < 1e-12);
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_elem((1, 1), 0.7));
        let y = g.constant(Matrix::from_elem((1, 1), 0.3));
        let s = g.add(x, y);
        assert!((g.scalar(s) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn class_weight_examples() {
        let grid = |bits: Vec<bool>| Array2::from_shape_vec((bits.len(), 1), bits).unwrap();
        let balanced = grid(vec![true, false, true, false]);
        assert_eq!(column_weights(&[&balanced], false), vec![1.0]);
        let mut bits = vec![false; 100];
        bits[3] = true;
        assert_eq!(column_weights(&[&grid(bits)], false), vec![99.0]);
        let none = grid(vec![false; 10]);
        assert_eq!(column_weights(&[&none], false), vec![100.0]);
        let mut rare = vec![false; 1000];
        rare[0] = true;
        assert_eq!(column_weights(&[&grid(rare)], false), vec![100.0]);

        let targets = ProposalTargets::ground_truth(
            &TemporalSegment::new(0.25, 0.5).unwrap(),
            &AnchorSet::standard(),
            17,
        );
        let w = compute_class_weights(&[&targets], false);
        assert_eq!(w.anchor_pos.len(), 4);
        assert_eq!(w.anchor_neg, vec![1.0; 4]);
        assert_eq!(w.boundary_pos, 15.0 / 2.0);
        let global = compute_class_weights(&[&targets], true);
        assert!(global.anchor_pos.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = rng.random_range(1..=6);
            let k = rng.random_range(1..=3);
            let logits_c = Matrix::from_shape_fn((t, k), |_| StandardNormal.sample(&mut rng));
            let logits_b = Matrix::from_shape_fn((t, 1), |_| StandardNormal.sample(&mut rng));
            let targets = ProposalTargets {
                anchors: Array2::from_shape_fn((t, k), |_| rng.random_bool(0.3)),
                boundaries: (0..t).map(|_| rng.random_bool(0.3)).collect(),
            };
            let weights = compute_class_weights(&[&targets], false);
            let alpha = rng.random_range(0.0..2.0);
            let err = input_gradient_error(&[logits_c, logits_b], |g, v| {
                let out = ProposalOutput {
                    c: g.sigmoid(v[0]),
                    b: g.sigmoid(v[1]),
                };
                proposal_task_graph(g, &out, &targets, &weights, alpha).unwrap()
            });
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn head_ranges_shapes_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let anchors = AnchorSet::standard();
        let head = ProposalHead::new(&mut store, 6, &anchors, &mut rng);
        let h = Matrix::from_shape_fn((64, 6), |_| { let z: f64 = StandardNormal.sample(&mut rng); 3.0 * z });
        let mut g = Graph::new();
        let fused = FusedVideo {
            h_p: g.constant(h.clone()),
            mask: vec![true; 64],
            attention: g.constant(Matrix::zeros((1, 1))),
        };
        let grid = head.predict(&mut g, &store, &fused).grid(&g);
        assert_eq!(grid.c.dim(), (64, 4));
        assert_eq!(grid.b.len(), 64);
        assert!(ProposalGrid::new(grid.c.clone(), grid.b.clone()).is_ok());
        let small = h.slice(ndarray::s![..5, ..]).to_owned();
        let err = param_gradient_error(
            &store,
            |g, s| {
                let fused = FusedVideo {
                    h_p: g.constant(small.clone()),
                    mask: vec![true; 5],
                    attention: g.constant(Matrix::zeros((1, 1))),
                };
                let out = head.predict(g, s, &fused);
                let a = g.sum(out.c);
                let b = g.sum(out.b);
                let b = g.scale(b, 0.5);
                g.add(a, b)
            },
            10,
            20,
            &mut rng,
        );
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn uniform_boundaries_rank_by_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let anchors = AnchorSet::standard();
        for _ in 0..20 {
            let mut grid = random_grid(12, 4, &mut rng);
            grid.b = vec![0.3; 12];
            let scored = joint_scores(&grid, &anchors);
            let best = scored.iter().enumerate().max_by(|a, b| a.1.score.total_cmp(&b.1.score)).unwrap().0;
            let best_c = grid
                .c
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(best, best_c);
        }
    }

    #[test]
    fn single_anchor_is_returned() {
        let anchors = AnchorSet::new(vec![0.5]).unwrap();
        let grid = ProposalGrid::new(Array2::from_elem((1, 1), 0.0), vec![0.0]).unwrap();
        let out = joint_score_and_select(&grid, &anchors, 0.5, 5).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn top_one_is_brute_force_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let anchors = AnchorSet::new(vec![0.2, 0.5]).unwrap();
        for _ in 0..200 {
            let grid = random_grid(8, 2, &mut rng);
            let mut best: Option<ScoredSegment> = None;
            for t in 0..8 {
                for k in 0..2 {
                    let end = t as f64 / 7.0;
                    let seg = TemporalSegment::clamped(end - anchors.widths()[k], end);
                    let s = ((seg.start() * 7.0).round()) as usize;
                    let e = ((seg.end() * 7.0).round()) as usize;
                    let cand = ScoredSegment {
                        segment: seg,
                        score: grid.c[[t, k]] * (grid.b[s] * grid.b[e]).sqrt(),
                    };
                    if best.is_none_or(|b| rank_order(&cand, &b).is_lt()) {
                        best = Some(cand);
                    }
                }
            }
            let top = joint_score_and_select(&grid, &anchors, 0.5, 1).unwrap()[0];
            assert_eq!(top, best.unwrap());
        }
    }

    #[test]
    fn argmax_invariant_to_boundary_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let anchors = AnchorSet::standard();
        for _ in 0..100 {
            let grid = random_grid(10, 4, &mut rng);
            let factor = rng.random_range(0.01..=1.0);
            let scaled = ProposalGrid::new(grid.c.clone(), grid.b.iter().map(|b| b * factor).collect()).unwrap();
            let a = joint_score_and_select(&grid, &anchors, 0.5, 1).unwrap()[0].segment;
            let b = joint_score_and_select(&scaled, &anchors, 0.5, 1).unwrap()[0].segment;
            assert_eq!(a, b);
        }
    }
}
