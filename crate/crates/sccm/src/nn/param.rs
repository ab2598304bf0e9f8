//! Parameter storage shared by all networks.
//!
//! Values are held behind `Arc` so a forward pass can hold cheap read-only
//! handles while the optimizer mutates through `Arc::make_mut` between steps.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Inference,
    Extraction,
    Cascade,
    Baseline,
}

pub type ParamId = usize;

#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Arc<Array2<f64>>,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: Array2<f64>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value: Arc::new(value),
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn value(&self, id: ParamId) -> &Arc<Array2<f64>> {
        &self.entries[id].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Array2<f64>) {
        self.entries[id].value = Arc::new(value);
    }

    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Array2<f64>)) {
        f(Arc::make_mut(&mut self.entries[id].value));
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&self) -> GradStore {
        GradStore {
            grads: self
                .entries
                .iter()
                .map(|e| Array2::zeros(e.value.dim()))
                .collect(),
        }
    }
}

/// Per-parameter gradient accumulator aligned with a `ParamStore`.
pub struct GradStore {
    pub grads: Vec<Array2<f64>>,
}

impl GradStore {
    pub fn accumulate(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            *g *= c;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Uniform Xavier/Glorot initialization for a (rows, cols) weight.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::ones((rows, cols))
}
