//! Margin-based contrastive losses with in-batch negatives.

use crate::autograd::{Graph, Matrix, Var};
use crate::error::{Error, Result};

/// Allowed deviation of an embedding norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Video,
    Sentence,
}

/// `B` unit-norm embeddings, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Matrix,
    pub modality: Modality,
}

fn check_unit(v: &[f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Precondition(format!("embedding norm {norm} is not 1")));
    }
    Ok(())
}

impl EmbeddingBatch {
    pub fn new(vectors: Matrix, modality: Modality) -> Result<Self> {
        for row in vectors.rows() {
            check_unit(row.as_slice().expect("standard layout"))?;
        }
        Ok(Self { vectors, modality })
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i).to_slice().expect("standard layout")
    }
}

fn cosine(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// `sum_{x- in neg_x} [margin - l(x, y) + l(x-, y)]_+ + sum_{y- in neg_y} [margin - l(x, y) + l(x, y-)]_+`
/// with cosine similarity `l` on unit vectors.
pub fn contrastive_loss(
    x: &[f64],
    y: &[f64],
    neg_x: &[&[f64]],
    neg_y: &[&[f64]],
    margin: f64,
) -> Result<f64> {
    if margin.is_nan() || margin <= 0.0 {
        return Err(Error::Precondition(format!("margin {margin} must be positive")));
    }
    for v in [x, y].iter().chain(neg_x).chain(neg_y) {
        check_unit(v)?;
    }
    let pos = cosine(x, y);
    let a: f64 = neg_x.iter().map(|n| (margin - pos + cosine(n, y)).max(0.0)).sum();
    let b: f64 = neg_y.iter().map(|n| (margin - pos + cosine(x, n)).max(0.0)).sum();
    Ok(a + b)
}

fn paired_loss(first: &EmbeddingBatch, second: &EmbeddingBatch, margin: f64) -> Result<f64> {
    if first.len() != second.len() {
        return Err(Error::Shape(format!(
            "{} and {} embeddings cannot be paired",
            first.len(),
            second.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..first.len() {
        let neg_x: Vec<&[f64]> = (0..first.len()).filter(|&j| j != i).map(|j| first.row(j)).collect();
        let neg_y: Vec<&[f64]> = (0..second.len()).filter(|&j| j != i).map(|j| second.row(j)).collect();
        total += contrastive_loss(first.row(i), second.row(i), &neg_x, &neg_y, margin)?;
    }
    Ok(total)
}

/// Matched video/sentence pairs against every other pair in the batch.
pub fn inter_modal_loss(video: &EmbeddingBatch, sentence: &EmbeddingBatch, margin: f64) -> Result<f64> {
    paired_loss(video, sentence, margin)
}

/// Two augmented views of each video against the views of the other videos.
pub fn intra_modal_loss(view1: &EmbeddingBatch, view2: &EmbeddingBatch, margin: f64) -> Result<f64> {
    paired_loss(view1, view2, margin)
}

pub fn self_supervised_loss(inter: f64, intra: f64) -> f64 {
    inter + intra
}

fn off_diagonal(b: usize) -> Matrix {
    Matrix::from_shape_fn((b, b), |(i, j)| if i == j { 0.0 } else { 1.0 })
}

/// Batched graph form of the paired loss on `B x D` rows `x` (anchors) and
/// `y` (positives), both already unit-normalized.
///
/// With `M = x y^T`, the terms are `[margin - M_ii + M_ji]_+` and
/// `[margin - M_ii + M_ij]_+` over all `j != i`.
pub fn paired_loss_graph(g: &mut Graph, x: Var, y: Var, margin: f64) -> Result<Var> {
    let (b, d) = g.shape(x);
    if g.shape(y) != (b, d) {
        return Err(Error::Shape(format!(
            "{:?} and {:?} embeddings cannot be paired",
            g.shape(x),
            g.shape(y)
        )));
    }
    if b < 2 {
        return Ok(g.constant(Matrix::zeros((1, 1))));
    }
    let y_t = g.transpose(y);
    let m = g.matmul(x, y_t);
    let eye = g.constant(Matrix::eye(b));
    let diag_only = g.mul(m, eye);
    let ones_col = g.constant(Matrix::ones((b, 1)));
    let diag = g.matmul(diag_only, ones_col);
    let ones_row = g.constant(Matrix::ones((1, b)));
    // pos[i, j] = M_ii
    let pos = g.matmul(diag, ones_row);
    let mask = g.constant(off_diagonal(b));
    let m_t = g.transpose(m);
    let mut terms = Vec::with_capacity(2);
    for neg in [m_t, m] {
        let gap = g.sub(neg, pos);
        let gap = g.offset(gap, margin);
        let hinge = g.relu(gap);
        let hinge = g.mul(hinge, mask);
        terms.push(g.sum(hinge));
    }
    Ok(g.add_all(&terms))
}

/// Every hinge argument of [`paired_loss_graph`], for kink-distance checks.
pub fn hinge_arguments(x: &Matrix, y: &Matrix, margin: f64) -> Vec<f64> {
    let m = x.dot(&y.t());
    let b = m.nrows();
    let mut out = Vec::with_capacity(2 * b * b);
    for i in 0..b {
        for j in 0..b {
            if i != j {
                out.push(margin - m[[i, i]] + m[[j, i]]);
                out.push(margin - m[[i, i]] + m[[i, j]]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::input_gradient_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_rows(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut m = Matrix::from_shape_fn((b, d), |_| StandardNormal.sample(rng));
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    }

    fn batch(m: Matrix, modality: Modality) -> EmbeddingBatch {
        EmbeddingBatch::new(m, modality).unwrap()
    }

    #[test]
    fn generic_examples() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        assert_eq!(contrastive_loss(&e1, &e1, &[&e2], &[&e2], 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&e1, &e2, &[], &[], 1.0).unwrap(), 0.0);
        // l(x, y) = 0 and both negatives at similarity 1: 2 * (1 - 0 + 1)
        assert_eq!(contrastive_loss(&e1, &e2, &[&e2], &[&e1], 1.0).unwrap(), 2.0 * 2.0);
        assert!(contrastive_loss(&[2.0, 0.0], &e1, &[], &[], 1.0).is_err());
        assert!(EmbeddingBatch::new(Matrix::ones((1, 2)), Modality::Video).is_err());
    }

    #[test]
    fn batch_examples() {
        let one = batch(Matrix::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap(), Modality::Video);
        assert_eq!(inter_modal_loss(&one, &one, 1.0).unwrap(), 0.0);
        let ortho = Matrix::eye(2);
        let v = batch(ortho.clone(), Modality::Video);
        let s = batch(ortho, Modality::Sentence);
        assert_eq!(inter_modal_loss(&v, &s, 1.0).unwrap(), 0.0);
        assert_eq!(intra_modal_loss(&v, &v, 1.0).unwrap(), 0.0);
        let same = batch(Matrix::from_elem((2, 2), 0.5f64.sqrt()), Modality::Video);
        // each of 2 samples has 2 negatives, every hinge equals the margin
        assert!((inter_modal_loss(&same, &same, 1.0).unwrap() - 4.0).abs() < 1e-12);
        assert!((intra_modal_loss(&same, &same, 1.0).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(self_supervised_loss(0.0, 0.0), 0.0);
        assert_eq!(self_supervised_loss(1.25, 0.0), 1.25);
        assert_eq!(self_supervised_loss(1.5, 2.5), 4.0);
    }

    #[test]
    fn graph_matches_pairwise_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let b = rng.random_range(1..7);
            let x = unit_rows(b, 5, &mut rng);
            let y = unit_rows(b, 5, &mut rng);
            let margin = rng.random_range(0.1..2.0);
            let reference = inter_modal_loss(&batch(x.clone(), Modality::Video), &batch(y.clone(), Modality::Sentence), margin).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let yv = g.constant(y);
            let l = paired_loss_graph(&mut g, xv, yv, margin).unwrap();
            assert!((g.scalar(l) - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = unit_rows(4, 3, &mut rng);
            let y = unit_rows(4, 3, &mut rng);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let rot = Matrix::from_shape_vec(
                (3, 3),
                vec![theta.cos(), -theta.sin(), 0.0, theta.sin(), theta.cos(), 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap();
            let loss = |x: Matrix, y: Matrix| {
                inter_modal_loss(&batch(x, Modality::Video), &batch(y, Modality::Sentence), 1.0).unwrap()
            };
            let a = loss(x.clone(), y.clone());
            let b = loss(x.dot(&rot), y.dot(&rot));
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn monotone_in_similarities() {
        // d loss / d l(x, y) <= 0 and d loss / d l(negative) >= 0
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = unit_rows(4, 6, &mut rng);
            let y = unit_rows(4, 6, &mut rng);
            let mut g = Graph::new();
            let m = g.input(x.dot(&y.t()));
            let b = 4;
            let eye = g.constant(Matrix::eye(b));
            let d = g.mul(m, eye);
            let ones_col = g.constant(Matrix::ones((b, 1)));
            let diag = g.matmul(d, ones_col);
            let ones_row = g.constant(Matrix::ones((1, b)));
            let pos = g.matmul(diag, ones_row);
            let mask = g.constant(off_diagonal(b));
            let m_t = g.transpose(m);
            let mut terms = Vec::new();
            for neg in [m_t, m] {
                let gap = g.sub(neg, pos);
                let gap = g.offset(gap, 1.0);
                let h = g.relu(gap);
                let h = g.mul(h, mask);
                terms.push(g.sum(h));
            }
            let l = g.add_all(&terms);
            let grad = g.backward(l).get(m).unwrap().clone();
            for i in 0..b {
                for j in 0..b {
                    if i == j {
                        assert!(grad[[i, j]] <= 0.0);
                    } else {
                        assert!(grad[[i, j]] >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut trials = 0;
        while trials < 100 {
            let b = rng.random_range(2..5);
            let raw_x = Matrix::from_shape_fn((b, 4), |_| StandardNormal.sample(&mut rng));
            let raw_y = Matrix::from_shape_fn((b, 4), |_| StandardNormal.sample(&mut rng));
            let normalize = |m: &Matrix| {
                let mut m = m.clone();
                for mut r in m.rows_mut() {
                    let n = r.dot(&r).sqrt();
                    r /= n;
                }
                m
            };
            let margin = 0.5;
            if hinge_arguments(&normalize(&raw_x), &normalize(&raw_y), margin)
                .iter()
                .any(|h| h.abs() < 1e-3)
            {
                continue;
            }
            trials += 1;
            let err = input_gradient_error(&[raw_x, raw_y], |g, v| {
                let x = g.row_normalize(v[0]);
                let y = g.row_normalize(v[1]);
                paired_loss_graph(g, x, y, margin).unwrap()
            });
            assert!(err < 1e-4, "relative error {err}");
        }
    }
}
