//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The forward pass records shaped f64 tensors into a [`Graph`]; each node
//! carries a backward closure that maps the gradient of its output to
//! gradient contributions for its parents. [`Graph::backward`] replays the
//! tape in reverse from a scalar loss and accumulates per-node gradients.
//!
//! Tensors are immutable once created, row-major, and shaped `(rows, cols)`;
//! a vector is a single row and a scalar is `(1, 1)`. Graphs are built per
//! training step and dropped afterwards, so the tape never needs freeing or
//! reuse logic.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

pub type NodeId = usize;

/// Gradient contributions: (parent id, gradient values for that parent).
type Backward = Box<dyn Fn(&[f64]) -> Vec<(NodeId, Vec<f64>)>>;

struct Node {
    value: Rc<Vec<f64>>,
    shape: Shape,
    backward: Option<Backward>,
}

#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on the tape.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: NodeId,
    shape: Shape,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, shape: Shape, backward: Option<Backward>) -> Tensor {
        debug_assert_eq!(value.len(), shape.numel());
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            shape,
            backward,
        });
        Tensor {
            graph: self.clone(),
            id,
            shape,
        }
    }

    /// A tensor with no backward rule. Gradients still accumulate on it, so
    /// the same constructor serves both constants and trainable leaves.
    pub fn tensor(&self, rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        assert_eq!(values.len(), rows * cols, "tensor value length mismatch");
        self.push(values, Shape::new(rows, cols), None)
    }

    pub fn row(&self, values: Vec<f64>) -> Tensor {
        let n = values.len();
        self.tensor(1, n, values)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.tensor(1, 1, vec![value])
    }

    /// Stack row blocks vertically. All inputs must share a column count.
    pub fn concat_rows(&self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows on empty list");
        let cols = parts[0].shape.cols;
        let mut values = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            assert_eq!(p.shape.cols, cols, "concat_rows column mismatch");
            values.extend_from_slice(&p.value());
            row_counts.push(p.shape.rows);
        }
        let rows: usize = row_counts.iter().sum();
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut out = Vec::with_capacity(ids.len());
            let mut offset = 0;
            for (idx, &id) in ids.iter().enumerate() {
                let len = row_counts[idx] * cols;
                out.push((id, g[offset..offset + len].to_vec()));
                offset += len;
            }
            out
        });
        self.push(values, Shape::new(rows, cols), Some(backward))
    }

    /// Stack row vectors side by side into a single row.
    pub fn concat_cols(&self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols on empty list");
        let rows = parts[0].shape.rows;
        for p in parts {
            assert_eq!(p.shape.rows, rows, "concat_cols row mismatch");
        }
        let total_cols: usize = parts.iter().map(|p| p.shape.cols).sum();
        let mut values = vec![0.0; rows * total_cols];
        let mut col_offset = 0;
        for p in parts {
            let v = p.value();
            for r in 0..rows {
                for c in 0..p.shape.cols {
                    values[r * total_cols + col_offset + c] = v[r * p.shape.cols + c];
                }
            }
            col_offset += p.shape.cols;
        }
        let meta: Vec<(NodeId, usize)> = parts.iter().map(|p| (p.id, p.shape.cols)).collect();
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut out = Vec::with_capacity(meta.len());
            let mut col_offset = 0;
            for &(id, cols) in &meta {
                let mut part = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        part[r * cols + c] = g[r * total_cols + col_offset + c];
                    }
                }
                out.push((id, part));
                col_offset += cols;
            }
            out
        });
        self.push(values, Shape::new(rows, total_cols), Some(backward))
    }

    /// Run backward from a scalar loss, returning gradients for every node
    /// that influences it.
    pub fn backward(&self, loss: &Tensor) -> Gradients {
        assert!(loss.shape.is_scalar(), "backward requires a scalar loss");
        let nodes = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if let Some(back) = nodes[id].backward.as_ref() {
                for (parent, contribution) in back(&grad) {
                    debug_assert_eq!(contribution.len(), nodes[parent].shape.numel());
                    match &mut grads[parent] {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&contribution) {
                                *a += c;
                            }
                        }
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

impl Tensor {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        self.graph.inner.borrow()[self.id].value.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.shape.is_scalar(), "scalar_value on non-scalar tensor");
        self.value()[0]
    }

    fn same_graph(&self, other: &Tensor) {
        debug_assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "tensors belong to different graphs"
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        let a = self.value();
        let b = other.value();
        let values: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        let (ida, idb) = (self.id, other.id);
        let backward: Backward =
            Box::new(move |g: &[f64]| vec![(ida, g.to_vec()), (idb, g.to_vec())]);
        self.graph.push(values, self.shape, Some(backward))
    }

    /// Add a single-row bias to every row.
    pub fn add_bias_row(&self, bias: &Tensor) -> Tensor {
        self.same_graph(bias);
        assert_eq!(bias.shape.rows, 1, "bias must be a row vector");
        assert_eq!(self.shape.cols, bias.shape.cols, "bias width mismatch");
        let a = self.value();
        let b = bias.value();
        let (rows, cols) = (self.shape.rows, self.shape.cols);
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(a[r * cols + c] + b[c]);
            }
        }
        let (ida, idb) = (self.id, bias.id);
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut db = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    db[c] += g[r * cols + c];
                }
            }
            vec![(ida, g.to_vec()), (idb, db)]
        });
        self.graph.push(values, self.shape, Some(backward))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let values: Vec<f64> = self.value().iter().map(|x| factor * x).collect();
        let id = self.id;
        let backward: Backward =
            Box::new(move |g: &[f64]| vec![(id, g.iter().map(|x| factor * x).collect())]);
        self.graph.push(values, self.shape, Some(backward))
    }

    /// Elementwise addition of fixed values (no gradient into the constants).
    pub fn add_const(&self, constants: &[f64]) -> Tensor {
        assert_eq!(constants.len(), self.shape.numel(), "add_const length");
        let values: Vec<f64> = self
            .value()
            .iter()
            .zip(constants)
            .map(|(x, c)| x + c)
            .collect();
        let id = self.id;
        let backward: Backward = Box::new(move |g: &[f64]| vec![(id, g.to_vec())]);
        self.graph.push(values, self.shape, Some(backward))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        assert_eq!(
            self.shape.cols, other.shape.rows,
            "matmul inner dimension mismatch"
        );
        let (m, k, n) = (self.shape.rows, self.shape.cols, other.shape.cols);
        let a = self.value();
        let b = other.value();
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    values[i * n + j] += aip * b[p * n + j];
                }
            }
        }
        let (ida, idb) = (self.id, other.id);
        let (a_cap, b_cap) = (a.clone(), b.clone());
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        da[i * k + p] += gij * b_cap[p * n + j];
                        db[p * n + j] += a_cap[i * k + p] * gij;
                    }
                }
            }
            vec![(ida, da), (idb, db)]
        });
        self.graph.push(values, Shape::new(m, n), Some(backward))
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.shape.rows, self.shape.cols);
        let a = self.value();
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = a[i * n + j];
            }
        }
        let id = self.id;
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut da = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    da[i * n + j] = g[j * m + i];
                }
            }
            vec![(id, da)]
        });
        self.graph.push(values, Shape::new(n, m), Some(backward))
    }

    pub fn tanh(&self) -> Tensor {
        let values: Vec<f64> = self.value().iter().map(|x| x.tanh()).collect();
        let id = self.id;
        let out = Rc::new(values.clone());
        let backward: Backward = Box::new(move |g: &[f64]| {
            vec![(
                id,
                g.iter().zip(out.iter()).map(|(g, y)| g * (1.0 - y * y)).collect(),
            )]
        });
        self.graph.push(values, self.shape, Some(backward))
    }

    /// Numerically stable softmax over each row.
    pub fn row_softmax(&self) -> Tensor {
        let (rows, cols) = (self.shape.rows, self.shape.cols);
        let x = self.value();
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                values[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                values[r * cols + c] /= sum;
            }
        }
        let id = self.id;
        let y = Rc::new(values.clone());
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let base = r * cols;
                let mut dot = 0.0;
                for c in 0..cols {
                    dot += g[base + c] * y[base + c];
                }
                for c in 0..cols {
                    dx[base + c] = y[base + c] * (g[base + c] - dot);
                }
            }
            vec![(id, dx)]
        });
        self.graph.push(values, self.shape, Some(backward))
    }

    /// Numerically stable log-softmax over each row.
    pub fn row_log_softmax(&self) -> Tensor {
        let (rows, cols) = (self.shape.rows, self.shape.cols);
        let x = self.value();
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..cols {
                values[r * cols + c] = row[c] - lse;
            }
        }
        let id = self.id;
        let log_probs = Rc::new(values.clone());
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let base = r * cols;
                let grad_sum: f64 = g[base..base + cols].iter().sum();
                for c in 0..cols {
                    dx[base + c] = g[base + c] - log_probs[base + c].exp() * grad_sum;
                }
            }
            vec![(id, dx)]
        });
        self.graph.push(values, self.shape, Some(backward))
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.value().iter().sum();
        let id = self.id;
        let numel = self.shape.numel();
        let backward: Backward = Box::new(move |g: &[f64]| vec![(id, vec![g[0]; numel])]);
        self.graph.push(vec![total], Shape::new(1, 1), Some(backward))
    }

    /// Column-wise mean over rows, producing a single row.
    pub fn mean_rows(&self) -> Tensor {
        let (rows, cols) = (self.shape.rows, self.shape.cols);
        let x = self.value();
        let mut values = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                values[c] += x[r * cols + c];
            }
        }
        for v in values.iter_mut() {
            *v /= rows as f64;
        }
        let id = self.id;
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    dx[r * cols + c] = g[c] / rows as f64;
                }
            }
            vec![(id, dx)]
        });
        self.graph.push(values, Shape::new(1, cols), Some(backward))
    }

    /// Extract one element as a scalar node.
    pub fn get(&self, row: usize, col: usize) -> Tensor {
        assert!(row < self.shape.rows && col < self.shape.cols, "get out of range");
        let cols = self.shape.cols;
        let value = self.value()[row * cols + col];
        let id = self.id;
        let numel = self.shape.numel();
        let flat = row * cols + col;
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; numel];
            dx[flat] = g[0];
            vec![(id, dx)]
        });
        self.graph.push(vec![value], Shape::new(1, 1), Some(backward))
    }

    pub fn slice_row(&self, row: usize) -> Tensor {
        assert!(row < self.shape.rows, "slice_row out of range");
        let cols = self.shape.cols;
        let values = self.value()[row * cols..(row + 1) * cols].to_vec();
        let id = self.id;
        let rows = self.shape.rows;
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; rows * cols];
            dx[row * cols..(row + 1) * cols].copy_from_slice(g);
            vec![(id, dx)]
        });
        self.graph.push(values, Shape::new(1, cols), Some(backward))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape.cols, "slice_cols out of range");
        let (rows, cols) = (self.shape.rows, self.shape.cols);
        let x = self.value();
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let id = self.id;
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                dx[r * cols + start..r * cols + start + len]
                    .copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            vec![(id, dx)]
        });
        self.graph.push(values, Shape::new(rows, len), Some(backward))
    }

    /// Reinterpret the same data under a new shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(rows * cols, self.shape.numel(), "reshape numel mismatch");
        let values = self.value().as_ref().clone();
        let id = self.id;
        let backward: Backward = Box::new(move |g: &[f64]| vec![(id, g.to_vec())]);
        self.graph.push(values, Shape::new(rows, cols), Some(backward))
    }

    /// L2 normalization of the whole tensor (intended for vectors).
    pub fn normalize(&self) -> Result<Tensor> {
        let x = self.value();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateVector(format!(
                "cannot normalize vector with norm {norm}"
            )));
        }
        let values: Vec<f64> = x.iter().map(|v| v / norm).collect();
        let id = self.id;
        let y = Rc::new(values.clone());
        let backward: Backward = Box::new(move |g: &[f64]| {
            let dot: f64 = g.iter().zip(y.iter()).map(|(g, y)| g * y).sum();
            vec![(
                id,
                g.iter().zip(y.iter()).map(|(g, y)| (g - y * dot) / norm).collect(),
            )]
        });
        Ok(self.graph.push(values, self.shape, Some(backward)))
    }

    /// Inner product of two equal-length tensors, as a scalar node.
    pub fn dot(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        assert_eq!(self.shape.numel(), other.shape.numel(), "dot length mismatch");
        let a = self.value();
        let b = other.value();
        let value: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let (ida, idb) = (self.id, other.id);
        let backward: Backward = Box::new(move |g: &[f64]| {
            let s = g[0];
            vec![
                (ida, b.iter().map(|y| s * y).collect()),
                (idb, a.iter().map(|x| s * x).collect()),
            ]
        });
        self.graph.push(vec![value], Shape::new(1, 1), Some(backward))
    }

    /// Per-row layer normalization with learnable gain and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        self.same_graph(gamma);
        self.same_graph(beta);
        let (rows, cols) = (self.shape.rows, self.shape.cols);
        assert_eq!(gamma.shape, Shape::new(1, cols), "layer_norm gamma shape");
        assert_eq!(beta.shape, Shape::new(1, cols), "layer_norm beta shape");
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let mut values = vec![0.0; rows * cols];
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let xh = (row[c] - mean) * istd;
                normalized[r * cols + c] = xh;
                values[r * cols + c] = gm[c] * xh + bt[c];
            }
        }
        let (idx, idg, idb) = (self.id, gamma.id, beta.id);
        let xh = Rc::new(normalized);
        let backward: Backward = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; rows * cols];
            let mut dgamma = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            for r in 0..rows {
                let base = r * cols;
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for c in 0..cols {
                    let dxh = g[base + c] * gm[c];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh[base + c];
                    dgamma[c] += g[base + c] * xh[base + c];
                    dbeta[c] += g[base + c];
                }
                let n = cols as f64;
                for c in 0..cols {
                    let dxh = g[base + c] * gm[c];
                    dx[base + c] =
                        inv_std[r] * (dxh - sum_dxh / n - xh[base + c] * sum_dxh_xh / n);
                }
            }
            vec![(idx, dx), (idg, dgamma), (idb, dbeta)]
        });
        self.graph.push(values, self.shape, Some(backward))
    }

    /// Straight-through hardening: forward value is the one-hot of the argmax
    /// (ties to the lowest index), backward passes the gradient through
    /// unchanged.
    pub fn straight_through(&self) -> Result<Tensor> {
        let x = self.value();
        let sum: f64 = x.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::NotNormalized(format!(
                "straight_through input sums to {sum}"
            )));
        }
        let mut best = 0;
        for (i, v) in x.iter().enumerate() {
            if *v > x[best] {
                best = i;
            }
        }
        let mut values = vec![0.0; x.len()];
        values[best] = 1.0;
        let id = self.id;
        let backward: Backward = Box::new(move |g: &[f64]| vec![(id, g.to_vec())]);
        Ok(self.graph.push(values, self.shape, Some(backward)))
    }
}

/// Cosine similarity between two tensors viewed as flat vectors.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.normalize()?.dot(&b.normalize()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Central-difference gradient check of `f` against the tape, perturbing
    /// the single input tensor.
    fn grad_check<F>(values: Vec<f64>, rows: usize, cols: usize, f: F, tol: f64)
    where
        F: Fn(&Graph, &Tensor) -> Tensor,
    {
        let g = Graph::new();
        let x = g.tensor(rows, cols, values.clone());
        let loss = f(&g, &x);
        assert!(loss.shape().is_scalar(), "grad_check needs a scalar loss");
        let grads = g.backward(&loss);
        let analytic = grads.get(&x).expect("input should receive a gradient").to_vec();

        let h = 1e-5;
        for i in 0..values.len() {
            let mut plus = values.clone();
            plus[i] += h;
            let mut minus = values.clone();
            minus[i] -= h;
            let gp = Graph::new();
            let lp = f(&gp, &gp.tensor(rows, cols, plus)).scalar_value();
            let gm = Graph::new();
            let lm = f(&gm, &gm.tensor(rows, cols, minus)).scalar_value();
            let numeric = (lp - lm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (numeric - analytic[i]).abs() / denom < tol,
                "index {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }

    fn random_values(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeededRng::from_seed_u64(seed);
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn add_and_scale_forward() {
        let g = Graph::new();
        let a = g.row(vec![1.0, 2.0]);
        let b = g.row(vec![3.0, -1.0]);
        let c = a.add(&b).scale(2.0);
        assert_eq!(c.value().as_ref(), &vec![8.0, 2.0]);
    }

    #[test]
    fn matmul_forward_matches_hand_product() {
        let g = Graph::new();
        let a = g.tensor(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = g.tensor(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.value().as_ref(), &vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        // loss = sum(x) + sum(x) should give gradient 2 everywhere.
        let g = Graph::new();
        let x = g.row(vec![1.0, 2.0, 3.0]);
        let loss = x.sum().add(&x.sum());
        let grads = g.backward(&loss);
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn grad_check_matmul_tanh_chain() {
        grad_check(random_values(6, 1), 2, 3, |g, x| {
            let w = g.tensor(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]);
            x.matmul(&w).tanh().sum()
        }, 1e-5);
    }

    #[test]
    fn grad_check_softmax() {
        grad_check(random_values(8, 2), 2, 4, |g, x| {
            let w = g.row(vec![0.9, -0.3, 0.2, 0.4]);
            let probs = x.row_softmax();
            // weighted sum keeps the check sensitive to every entry
            probs
                .slice_row(0)
                .dot(&w)
                .add(&probs.slice_row(1).dot(&w.scale(-0.5)))
        }, 1e-5);
    }

    #[test]
    fn grad_check_log_softmax() {
        grad_check(random_values(5, 3), 1, 5, |_, x| {
            x.row_log_softmax().get(0, 2).neg()
        }, 1e-5);
    }

    #[test]
    fn grad_check_normalize_dot() {
        grad_check(random_values(6, 4), 1, 6, |g, x| {
            let target = g.row(vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.3]);
            cosine(x, &target).unwrap()
        }, 1e-5);
    }

    #[test]
    fn grad_check_layer_norm() {
        grad_check(random_values(8, 5), 2, 4, |g, x| {
            let gamma = g.row(vec![1.1, 0.9, 1.3, 0.7]);
            let beta = g.row(vec![0.1, -0.2, 0.0, 0.3]);
            let w = g.tensor(4, 1, vec![0.2, -0.5, 0.3, 0.8]);
            x.layer_norm(&gamma, &beta, 1e-5).matmul(&w).tanh().sum()
        }, 1e-4);
    }

    #[test]
    fn grad_check_layer_norm_params() {
        // perturb gamma/beta instead of the input
        let base = random_values(4, 6);
        grad_check(vec![1.0, 1.0, 0.5, 1.5, 0.0, 0.1, -0.1, 0.2], 2, 4, |g, gb| {
            let x = g.tensor(1, 4, base.clone());
            let gamma = gb.slice_row(0);
            let beta = gb.slice_row(1);
            x.layer_norm(&gamma, &beta, 1e-5).tanh().sum()
        }, 1e-4);
    }

    #[test]
    fn grad_check_slice_concat_mean() {
        grad_check(random_values(12, 7), 3, 4, |g, x| {
            let top = x.slice_row(0);
            let mid = x.slice_cols(1, 2);
            let stacked = g.concat_cols(&[top.slice_cols(0, 2), mid.mean_rows()]);
            let joined = g.concat_rows(&[stacked.clone(), stacked.scale(0.5)]);
            joined.tanh().sum()
        }, 1e-5);
    }

    #[test]
    fn grad_check_transpose_reshape_bias() {
        grad_check(random_values(6, 8), 2, 3, |g, x| {
            let bias = g.row(vec![0.3, -0.1]);
            x.transpose().add_bias_row(&bias).reshape(1, 6).tanh().sum()
        }, 1e-5);
    }

    #[test]
    fn straight_through_forward_is_one_hot() {
        let g = Graph::new();
        let soft = g.row(vec![0.2, 0.5, 0.3]);
        let hard = soft.straight_through().unwrap();
        assert_eq!(hard.value().as_ref(), &vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn straight_through_ties_pick_lowest_index() {
        let g = Graph::new();
        let soft = g.row(vec![0.4, 0.4, 0.2]);
        let hard = soft.straight_through().unwrap();
        assert_eq!(hard.value().as_ref(), &vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_through_rejects_unnormalized() {
        let g = Graph::new();
        let soft = g.row(vec![0.2, 0.5]);
        assert!(matches!(
            soft.straight_through(),
            Err(Error::NotNormalized(_))
        ));
    }

    #[test]
    fn straight_through_gradient_is_identity() {
        let g = Graph::new();
        let logits = g.row(vec![0.3, 1.2, -0.4]);
        let w = g.row(vec![0.7, -0.2, 0.5]);
        let soft = logits.row_softmax();
        let hard_loss = soft.straight_through().unwrap().dot(&w);
        let grads_hard = g.backward(&hard_loss);

        let g2 = Graph::new();
        let logits2 = g2.row(vec![0.3, 1.2, -0.4]);
        let w2 = g2.row(vec![0.7, -0.2, 0.5]);
        let soft_loss = logits2.row_softmax().dot(&w2);
        let grads_soft = g2.backward(&soft_loss);

        let a = grads_hard.get(&logits).unwrap();
        let b = grads_soft.get(&logits2).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn normalize_rejects_zero_vector() {
        let g = Graph::new();
        let zero = g.row(vec![0.0, 0.0]);
        assert!(matches!(zero.normalize(), Err(Error::DegenerateVector(_))));
    }
}
