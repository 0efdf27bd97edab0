//! Regression grounding head and its supervised losses.

use rand::Rng;

use crate::autograd::{Graph, Matrix, Var};
use crate::encoders::{AttendedVideo, Linear};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::temporal::TemporalSegment;

/// Lower clamp applied to attention weights before the logarithm.
pub const ATTENTION_EPS: f64 = 1e-8;

/// Segment regressed directly from the attended video.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionPrediction {
    pub segment: TemporalSegment,
    pub attention: Vec<f64>,
}

/// Graph nodes of a regression prediction: `1 x 1` start and end, `1 x T` attention.
#[derive(Debug, Clone, Copy)]
pub struct RegressionOutput {
    pub start: Var,
    pub end: Var,
    pub attention: Var,
}

impl RegressionOutput {
    pub fn prediction(&self, g: &Graph) -> RegressionPrediction {
        RegressionPrediction {
            segment: TemporalSegment::clamped(g.scalar(self.start), g.scalar(self.end)),
            attention: g.value(self.attention).iter().copied().collect(),
        }
    }
}

/// Two-layer perceptron on the attention-pooled `h_r`, squashed to `[0, 1]`
/// and ordered so that `s = min`, `e = max`.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    hidden: Linear,
    out: Linear,
}

impl RegressionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, "regression.hidden", hidden, hidden, rng),
            out: Linear::new(store, "regression.out", hidden, 2, rng),
        }
    }

    pub fn predict(&self, g: &mut Graph, store: &ParamStore, attended: &AttendedVideo) -> RegressionOutput {
        let pooled = g.matmul(attended.a, attended.h_r);
        let h = self.hidden.forward(g, store, pooled);
        let h = g.relu(h);
        let raw = self.out.forward(g, store, h);
        let squashed = g.sigmoid(raw);
        let a = g.slice_cols(squashed, 0, 1);
        let b = g.slice_cols(squashed, 1, 1);
        RegressionOutput {
            start: g.minimum(a, b),
            end: g.maximum(a, b),
            attention: attended.a,
        }
    }
}

fn scalar(g: &mut Graph, x: f64) -> Var {
    g.constant(Matrix::from_elem((1, 1), x))
}

/// `SmoothL1(s - s_hat) + SmoothL1(e - e_hat)` with the kink at 1.
pub fn smooth_l1_graph(g: &mut Graph, start: Var, end: Var, target: &TemporalSegment) -> Var {
    let ts = scalar(g, target.start());
    let te = scalar(g, target.end());
    let ds = g.sub(start, ts);
    let de = g.sub(end, te);
    let ls = g.smooth_l1(ds);
    let le = g.smooth_l1(de);
    g.add(ls, le)
}

/// `-(sum_t m_t log a_t) / (sum_t m_t)` with `a` clamped below at [`ATTENTION_EPS`].
pub fn attention_calibration_graph(g: &mut Graph, attention: Var, mask: &[bool]) -> Result<Var> {
    let support = mask.iter().filter(|&&m| m).count();
    if support == 0 {
        return Err(Error::Precondition(
            "attention calibration needs at least one target position".into(),
        ));
    }
    if g.shape(attention) != (1, mask.len()) {
        return Err(Error::Shape(format!(
            "attention {:?} does not match mask length {}",
            g.shape(attention),
            mask.len()
        )));
    }
    let clamped = g.clamp(attention, ATTENTION_EPS, 1.0);
    let logs = g.log(clamped);
    let m = g.constant(Matrix::from_shape_fn((1, mask.len()), |(_, t)| {
        f64::from(u8::from(mask[t]))
    }));
    let picked = g.mul(logs, m);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / support as f64))
}

/// Regression loss plus `alpha` times attention calibration.
pub fn regression_task_graph(
    g: &mut Graph,
    output: &RegressionOutput,
    target: &TemporalSegment,
    target_mask: &[bool],
    alpha: f64,
) -> Result<Var> {
    let reg = smooth_l1_graph(g, output.start, output.end, target);
    if alpha == 0.0 {
        return Ok(reg);
    }
    let cal = attention_calibration_graph(g, output.attention, target_mask)?;
    let cal = g.scale(cal, alpha);
    Ok(g.add(reg, cal))
}

fn constant_output(g: &mut Graph, pred: &RegressionPrediction) -> RegressionOutput {
    RegressionOutput {
        start: scalar(g, pred.segment.start()),
        end: scalar(g, pred.segment.end()),
        attention: g.constant(Matrix::from_shape_vec((1, pred.attention.len()), pred.attention.clone()).expect("row")),
    }
}

pub fn smooth_l1_regression_loss(pred: &TemporalSegment, target: &TemporalSegment) -> f64 {
    let mut g = Graph::new();
    let s = scalar(&mut g, pred.start());
    let e = scalar(&mut g, pred.end());
    let loss = smooth_l1_graph(&mut g, s, e, target);
    g.scalar(loss)
}

pub fn attention_calibration_loss(target_mask: &[bool], attention: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(Matrix::from_shape_vec((1, attention.len()), attention.to_vec()).expect("row"));
    let loss = attention_calibration_graph(&mut g, a, target_mask)?;
    Ok(g.scalar(loss))
}

pub fn regression_task_loss(
    pred: &RegressionPrediction,
    target: &TemporalSegment,
    target_mask: &[bool],
    alpha: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let out = constant_output(&mut g, pred);
    let loss = regression_task_graph(&mut g, &out, target, target_mask, alpha)?;
    Ok(g.scalar(loss))
}
