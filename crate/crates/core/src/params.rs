//! Named parameter groups.
//!
//! Parameters are stored as f32 (the checkpoint and cache dtype) and promoted
//! to f64 when bound into a computation graph, so a save/load round trip is
//! exact while all arithmetic runs in double precision. Weight matrices use
//! the `[input_dim, output_dim]` layout: activations are rows and a layer is
//! `y = x · W + b`.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, Tensor};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub values: Vec<f32>,
    pub rows: usize,
    pub cols: usize,
}

impl Param {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param {
            values: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    /// Gaussian init with the given scale, drawn in row-major order.
    pub fn normal(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let values = (0..rows * cols)
            .map(|_| (rng.normal() * scale) as f32)
            .collect();
        Param { values, rows, cols }
    }

    pub fn identity(n: usize) -> Self {
        let mut p = Param::zeros(n, n);
        for i in 0..n {
            p.values[i * n + i] = 1.0;
        }
        p
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Param {
            values: vec![1.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Parameter groups in sorted-name order (checkpoint segment order).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    groups: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.groups.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.groups.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.groups.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.groups.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.groups.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.groups.keys()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.groups.values().map(Param::numel).sum()
    }

    /// Bind every group into the graph as an f64 leaf tensor.
    pub fn bind(&self, graph: &Graph) -> BoundParams {
        let mut map = BTreeMap::new();
        for (name, p) in &self.groups {
            let values: Vec<f64> = p.values.iter().map(|&v| v as f64).collect();
            map.insert(name.clone(), graph.tensor(p.rows, p.cols, values));
        }
        BoundParams { map }
    }
}

/// Graph-bound view of a [`ParamStore`] for one forward/backward pass.
#[derive(Default)]
pub struct BoundParams {
    map: BTreeMap<String, Tensor>,
}

impl BoundParams {
    /// Empty binding; gradient-check harnesses insert hand-built tensors.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter group `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    /// Per-group gradient vectors after a backward pass; groups the loss
    /// never touched come back as zeros.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.map
            .iter()
            .map(|(name, t)| {
                let g = grads
                    .get(t)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.shape().numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}
