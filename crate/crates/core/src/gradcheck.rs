//! Central finite-difference checks of [`Graph`] gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Matrix, Var};
use crate::params::ParamStore;

pub const STEP: f64 = 1e-6;
/// Denominator floor: gradients smaller than this are compared in absolute
/// terms, which keeps finite-difference roundoff from dominating.
pub const ABS_FLOOR: f64 = 1e-4;

pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(ABS_FLOOR)
}

/// Largest relative error over every coordinate of every input of `f`.
pub fn input_gradient_error<F>(inputs: &[Matrix], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |ins: &[Matrix]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut worst: f64 = 0.0;
    for (k, m) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(m.dim()));
        for (idx, &an) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            *plus[k].iter_mut().nth(idx).unwrap() += STEP;
            *minus[k].iter_mut().nth(idx).unwrap() -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(relative_error(fd, an));
        }
    }
    worst
}

/// Largest relative error of parameter gradients of `f`, checked along
/// `directions` random gaussian directions through the whole parameter space
/// plus `coordinates` randomly chosen single entries.
pub fn param_gradient_error<F, R>(
    store: &ParamStore,
    f: F,
    directions: usize,
    coordinates: usize,
    rng: &mut R,
) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
    R: Rng,
{
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out).for_params(&g, store.len());
    let grad = |i: usize| {
        grads[i]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(store.get(store.ids().nth(i).unwrap()).dim()))
    };
    let eval = |p: &ParamStore| {
        let mut g = Graph::new();
        let out = f(&mut g, p);
        g.scalar(out)
    };
    let along = |dir: &[Matrix]| {
        let shifted = |sign: f64| {
            let mut p = store.clone();
            for (id, d) in store.ids().zip(dir) {
                p.get_mut(id).scaled_add(sign * STEP, d);
            }
            eval(&p)
        };
        (shifted(1.0) - shifted(-1.0)) / (2.0 * STEP)
    };
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dir: Vec<Matrix> = store
            .ids()
            .map(|id| store.get(id).mapv(|_| StandardNormal.sample(&mut *rng)))
            .collect();
        let analytic: f64 = dir.iter().enumerate().map(|(i, d)| (&grad(i) * d).sum()).sum();
        worst = worst.max(relative_error(along(&dir), analytic));
    }
    let total = store.num_scalars();
    for _ in 0..coordinates {
        let mut pick = rng.random_range(0..total);
        let mut dir: Vec<Matrix> = store.ids().map(|id| Matrix::zeros(store.get(id).dim())).collect();
        let mut analytic = 0.0;
        for (i, d) in dir.iter_mut().enumerate() {
            if pick < d.len() {
                *d.iter_mut().nth(pick).unwrap() = 1.0;
                analytic = *grad(i).iter().nth(pick).unwrap();
                break;
            }
            pick -= d.len();
        }
        let fd = along(&dir);
        worst = worst.max(relative_error(fd, analytic));
    }
    worst
}
