//! Named parameter tensors and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Glorot-uniform initialized `rows x cols` matrix.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit));
        self.insert(name, value)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Matrix::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// `self <- decay * other + (1 - decay) * self`, parameter-wise.
    pub fn blend_from(&mut self, other: &ParamStore, decay: f64) -> Result<()> {
        self.check_same_layout(other)?;
        if decay == 1.0 {
            self.values.clone_from(&other.values);
            return Ok(());
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.zip_mut_with(src, |d, &s| *d = decay * s + (1.0 - decay) * *d);
        }
        Ok(())
    }

    /// Replaces values by name; every name and shape must match.
    pub fn load_values(&mut self, named: Vec<(String, Matrix)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, found {}",
                self.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
            if self.values[id.0].dim() != value.dim() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    self.values[id.0].dim(),
                    value.dim()
                )));
            }
            self.values[id.0] = value;
        }
        Ok(())
    }

    fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names
            || self
                .values
                .iter()
                .zip(&other.values)
                .any(|(a, b)| a.dim() != b.dim())
        {
            return Err(Error::Shape("parameter stores differ in layout".into()));
        }
        Ok(())
    }
}

/// Adaptive moment estimation without learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .values
            .iter()
            .map(|v| Matrix::zeros(v.dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters with no gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>]) {
        assert_eq!(grads.len(), store.len(), "gradient count");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let p = &mut store.values[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
