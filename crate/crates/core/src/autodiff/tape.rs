//! Reverse-mode differentiation over a tape of matrix primitives.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the nodes in exact reverse order and accumulates gradients
//! additively, so a value consumed twice receives both contributions.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{PheError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentLogSoftmax(Var, Vec<usize>),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, (Var, Vec<usize>)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter; zeros when the loss never reached it.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        let (var, shape) = self.params.get(name)?;
        Some(match self.get(*var) {
            Some(g) => g.clone(),
            None => Tensor::new(shape.clone(), vec![0.0; shape.iter().product()])
                .expect("parameter shape"),
        })
    }

    pub fn into_param_grads(self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (var, shape)) in &self.params {
            let g = match self.grads.get(var.0).and_then(Option::as_ref) {
                Some(g) => g.clone(),
                None => Tensor::new(shape.clone(), vec![0.0; shape.iter().product()])
                    .expect("parameter shape"),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

fn segment_count(segments: &[usize]) -> usize {
    segments.iter().max().map_or(0, |m| m + 1)
}

/// Row-wise softmax within segments, each column independent.
fn segment_softmax_forward(x: &Tensor, segments: &[usize]) -> Tensor {
    let cols = x.cols();
    let n_seg = segment_count(segments);
    let mut max = vec![f64::NEG_INFINITY; n_seg * cols];
    for (r, &s) in segments.iter().enumerate() {
        for c in 0..cols {
            let m = &mut max[s * cols + c];
            *m = m.max(x.get(r, c));
        }
    }
    let mut out = Tensor::zeros(x.rows(), cols);
    let mut denom = vec![0.0; n_seg * cols];
    for (r, &s) in segments.iter().enumerate() {
        for c in 0..cols {
            let e = (x.get(r, c) - max[s * cols + c]).exp();
            out.set(r, c, e);
            denom[s * cols + c] += e;
        }
    }
    for (r, &s) in segments.iter().enumerate() {
        for c in 0..cols {
            let v = out.get(r, c) / denom[s * cols + c];
            out.set(r, c, v);
        }
    }
    out
}

fn segment_log_softmax_forward(x: &Tensor, segments: &[usize]) -> Tensor {
    let cols = x.cols();
    let n_seg = segment_count(segments);
    let mut max = vec![f64::NEG_INFINITY; n_seg * cols];
    for (r, &s) in segments.iter().enumerate() {
        for c in 0..cols {
            let m = &mut max[s * cols + c];
            *m = m.max(x.get(r, c));
        }
    }
    let mut denom = vec![0.0; n_seg * cols];
    for (r, &s) in segments.iter().enumerate() {
        for c in 0..cols {
            denom[s * cols + c] += (x.get(r, c) - max[s * cols + c]).exp();
        }
    }
    let mut out = Tensor::zeros(x.rows(), cols);
    for (r, &s) in segments.iter().enumerate() {
        for c in 0..cols {
            let k = s * cols + c;
            out.set(r, c, x.get(r, c) - max[k] - denom[k].ln());
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose parameters are recorded as constants; used for forward
    /// passes that are never differentiated.
    pub fn no_grad() -> Self {
        Tape {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a named trainable leaf. Registering the same name twice
    /// returns the original handle.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let needs = !self.no_grad;
        let v = self.push(value.clone(), Op::Leaf, needs);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into a new node through which no gradient flows.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let g = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), g)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), g)
    }

    pub fn div_scalar(&mut self, a: Var, c: f64) -> Var {
        self.scale(a, 1.0 / c)
    }

    /// Adds a `1×d` row to every row of an `n×d` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        let mut value = self.value(a).clone();
        let cols = value.cols();
        assert_eq!(r.len(), cols, "add_row width");
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        let g = self.any_grad(&[a, row]);
        self.push(value, Op::AddRow(a, row), g)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshaped(rows, cols);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Reshape(a), g)
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let value = self.value(a).gather_rows(&index);
        let g = self.any_grad(&[a]);
        self.push(value, Op::GatherRows(a, index), g)
    }

    /// Sums row `i` of `a` into output row `index[i]`.
    pub fn scatter_add_rows(&mut self, a: Var, index: Vec<usize>, out_rows: usize) -> Var {
        assert_eq!(index.len(), self.value(a).rows(), "scatter index length");
        let value = self.value(a).scatter_add_rows(&index, out_rows);
        let g = self.any_grad(&[a]);
        self.push(value, Op::ScatterAddRows(a, index), g)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let g = self.any_grad(&parts);
        self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts), g)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols height");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + t.cols()].copy_from_slice(t.row(i));
            }
            offset += t.cols();
        }
        let g = self.any_grad(&parts);
        self.push(out, Op::ConcatCols(parts), g)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let g = self.any_grad(&[a]);
        self.push(out, Op::SoftmaxRows(a), g)
    }

    /// Softmax over the rows sharing a segment id, per column.
    pub fn segment_softmax(&mut self, a: Var, segments: Vec<usize>) -> Var {
        assert_eq!(segments.len(), self.value(a).rows(), "segment length");
        let value = segment_softmax_forward(self.value(a), &segments);
        let g = self.any_grad(&[a]);
        self.push(value, Op::SegmentSoftmax(a, segments), g)
    }

    /// Log-softmax over the rows sharing a segment id, per column.
    pub fn segment_log_softmax(&mut self, a: Var, segments: Vec<usize>) -> Var {
        assert_eq!(segments.len(), self.value(a).rows(), "segment length");
        let value = segment_log_softmax_forward(self.value(a), &segments);
        let g = self.any_grad(&[a]);
        self.push(value, Op::SegmentLogSoftmax(a, segments), g)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let g = self.any_grad(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Exp(a), g)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Ln(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let g = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Mean(a), g)
    }

    /// Broadcasts an `n×1` column across `cols` columns (`w · 1ᵀ`).
    pub fn broadcast_cols(&mut self, w: Var, cols: usize) -> Var {
        let ones = self.constant(Tensor::full(1, cols, 1.0));
        self.matmul(w, ones)
    }

    /// Per-row sums as an `n×1` column (`x · 1`).
    pub fn row_sums(&mut self, x: Var) -> Var {
        let cols = self.value(x).cols();
        let ones = self.constant(Tensor::full(cols, 1, 1.0));
        self.matmul(x, ones)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(PheError::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.is_finite() {
            return Err(PheError::NonFinite("loss value".into()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::new(root.value.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(PheError::NonFinite(format!("gradient at tape node {i}")));
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|(k, &v)| (k.clone(), (v, self.nodes[v.0].value.shape().to_vec())))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(bv));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, av.matmul_tn(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs_grad(*row) {
                    let mut acc = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (s, x) in acc.iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, acc).expect("row shape"));
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                let t = Tensor::new(shape, g.data().to_vec()).expect("reshape back");
                self.accumulate(grads, *a, t);
            }
            Op::GatherRows(a, index) => {
                let rows = self.value(*a).rows();
                self.accumulate(grads, *a, g.scatter_add_rows(index, rows));
            }
            Op::ScatterAddRows(a, index) => {
                self.accumulate(grads, *a, g.gather_rows(index));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let cols = g.cols();
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.needs_grad(p) {
                        let data = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::matrix(r, cols, data));
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs_grad(p) {
                        let mut part = Tensor::zeros(g.rows(), c);
                        for i in 0..g.rows() {
                            part.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        self.accumulate(grads, p, part);
                    }
                    offset += c;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        *o = y.get(i, j) * (g.get(i, j) - dot);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = &node.value;
                let cols = y.cols();
                let mut dot = vec![0.0; segment_count(segments) * cols];
                for (r, &s) in segments.iter().enumerate() {
                    for c in 0..cols {
                        dot[s * cols + c] += y.get(r, c) * g.get(r, c);
                    }
                }
                let mut out = Tensor::zeros(y.rows(), cols);
                for (r, &s) in segments.iter().enumerate() {
                    for c in 0..cols {
                        out.set(r, c, y.get(r, c) * (g.get(r, c) - dot[s * cols + c]));
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::SegmentLogSoftmax(a, segments) => {
                let y = &node.value;
                let cols = y.cols();
                let mut gsum = vec![0.0; segment_count(segments) * cols];
                for (r, &s) in segments.iter().enumerate() {
                    for c in 0..cols {
                        gsum[s * cols + c] += g.get(r, c);
                    }
                }
                let mut out = Tensor::zeros(y.rows(), cols);
                for (r, &s) in segments.iter().enumerate() {
                    for c in 0..cols {
                        let p = y.get(r, c).exp();
                        out.set(r, c, g.get(r, c) - p * gsum[s * cols + c]);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let out = g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { gv * slope });
                self.accumulate(grads, *a, out);
            }
            Op::Tanh(a) => {
                let out = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *a, out);
            }
            Op::Exp(a) => {
                let out = g.zip_map(&node.value, |gv, y| gv * y);
                self.accumulate(grads, *a, out);
            }
            Op::Ln(a) => {
                let out = g.zip_map(self.value(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, out);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                let out = Tensor::new(t.shape().to_vec(), vec![g.item(); t.len()]).expect("sum");
                self.accumulate(grads, *a, out);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.item() / t.len() as f64;
                let out = Tensor::new(t.shape().to_vec(), vec![v; t.len()]).expect("mean");
                self.accumulate(grads, *a, out);
            }
        }
    }
}
