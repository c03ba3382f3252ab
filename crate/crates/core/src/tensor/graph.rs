//! The tape.
//!
//! Nodes are appended in creation order, so every input of node `k` has an
//! index below `k`. [`Graph::backward`] walks the tape once in reverse and
//! applies each node's local gradient rule.

use super::kernels;
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

/// Probability clamp used by the binary cross-entropy primitive.
pub const BCE_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LinComb(Vec<(Var, f64)>),
    Relu(Var),
    Sigmoid(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    ColSum(Var),
    RowDot(Var, Var),
    RowCosine(Var, Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    RepeatRows(Var, usize),
    SegmentSum(Var, usize),
    SeqTargetProduct { seq: Var, target: Var, w_item: Var, w_prod: Var, n: usize },
    Bce(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient but is not tied to a store.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`. Binding the same name twice
    /// returns the existing node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.bindings.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        let v = self.push(p.value.clone(), Op::Leaf, true);
        self.bindings.push((name.to_string(), v));
        Ok(v)
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip_with(&self, op: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a[m,n] + b[n]`, adding `b` to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        if tb.numel() != n {
            return Err(Error::dim(format!(
                "add_row: row of {n} vs bias of {}",
                tb.numel()
            )));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::add_into(row, tb.data());
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    /// Scales row `i` of `a[m,n]` by `s[i]`, where `s` holds `m` values.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let (m, n) = (ta.rows(), ta.cols());
        if ts.numel() != m {
            return Err(Error::dim(format!(
                "mul_col: {m} rows vs {} scales",
                ts.numel()
            )));
        }
        let mut data = ta.data().to_vec();
        for (row, &k) in data.chunks_mut(n).zip(ts.data()) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::MulCol(a, s), rg))
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.value(s).item()?;
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * k).collect())?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|x| x * k).collect(),
        };
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|x| x + k).collect(),
        };
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `Σ cᵢ·xᵢ` over equally shaped inputs with constant coefficients.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::dim("lin_comb of no terms"));
        };
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).numel()];
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "lin_comb: shapes {:?} and {:?} differ",
                    shape,
                    t.shape()
                )));
            }
            for (d, x) in data.iter_mut().zip(t.data()) {
                *d += c * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::LinComb(terms.to_vec()), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Row sums of `a[m,n]` as an `[m,1]` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let data = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let out = Tensor {
            shape: vec![m, 1],
            data,
        };
        let rg = self.rg(a);
        self.push(out, Op::RowSum(a), rg)
    }

    /// Column sums of `a[m,n]` as an `[n]` vector.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = vec![0.0; n];
        for row in t.data().chunks(n) {
            kernels::add_into(&mut data, row);
        }
        let out = Tensor {
            shape: vec![n],
            data,
        };
        let rg = self.rg(a);
        self.push(out, Op::ColSum(a), rg)
    }

    /// Per-row dot products of two equally shaped matrices, `[m,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("row_dot", ta, tb)?;
        let n = ta.cols();
        let data: Vec<f64> = ta
            .data()
            .chunks(n)
            .zip(tb.data().chunks(n))
            .map(|(x, y)| kernels::dot(x, y))
            .collect();
        let out = Tensor {
            shape: vec![data.len(), 1],
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    /// Per-row cosine similarity, `[m,1]`. A row with zero norm on either side
    /// yields 0 and passes no gradient.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("row_cosine", ta, tb)?;
        let n = ta.cols();
        let data: Vec<f64> = ta
            .data()
            .chunks(n)
            .zip(tb.data().chunks(n))
            .map(|(x, y)| cosine_parts(x, y).0)
            .collect();
        let out = Tensor {
            shape: vec![data.len(), 1],
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::RowCosine(a, b), rg))
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(n).zip(data.chunks_mut(n)) {
            kernels::softmax_row(src, dst);
        }
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols of nothing"));
        };
        let m = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(Error::dim(format!(
                    "concat_cols: {} rows vs {m}",
                    t.rows()
                )));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let shape = if m == 1 && parts.iter().all(|&p| self.value(p).rank() == 1) {
            vec![total]
        } else {
            vec![m, total]
        };
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows of nothing"));
        };
        let n = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::dim(format!(
                    "concat_rows: {} cols vs {n}",
                    t.cols()
                )));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::matrix(rows, n, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if len == 0 || start + len > n {
            return Err(Error::dim(format!(
                "slice_cols {start}..{} of {n} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for row in t.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let shape = if t.rank() == 1 { vec![len] } else { vec![m, len] };
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if len == 0 || start + len > m {
            return Err(Error::dim(format!(
                "slice_rows {start}..{} of {m} rows",
                start + len
            )));
        }
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::matrix(len, n, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Row lookup: output row `r` is `table[idx[r]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, n) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(Error::dim("gather of no rows"));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= v {
                return Err(Error::dim(format!("gather index {i} out of {v} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), n, data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather(table, idx.to_vec()), rg))
    }

    /// Repeats each row of `a[b,d]` `times` times consecutively: `[b·times, d]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::dim("repeat_rows zero times"));
        }
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(m * n * times);
        for row in t.data().chunks(n) {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let out = Tensor::matrix(m * times, n, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::RepeatRows(a, times), rg))
    }

    /// Sums consecutive groups of `group` rows: `[b·group, d] -> [b, d]`.
    pub fn segment_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if group == 0 || m % group != 0 {
            return Err(Error::dim(format!(
                "segment_sum: {m} rows not divisible into groups of {group}"
            )));
        }
        let b = m / group;
        let mut data = vec![0.0; b * n];
        for (i, row) in t.data().chunks(n).enumerate() {
            kernels::add_into(&mut data[(i / group) * n..(i / group + 1) * n], row);
        }
        let out = Tensor::matrix(b, n, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentSum(a, group), rg))
    }

    /// `seq·W_item + (seq ⊙ target)·W_prod` for a batch of sequences, where
    /// `seq` is `[b·n, d]`, `target` is `[b, d]` (sample `i` owns sequence rows
    /// `i·n .. (i+1)·n`) and both weights are `[d, h]`. Each sample is
    /// evaluated with its own effective weight `W_item + diag(t_i)·W_prod`,
    /// which costs one product per sample instead of two.
    pub fn seq_target_product(&mut self, seq: Var, target: Var, w_item: Var, w_prod: Var, n: usize) -> Result<Var> {
        let (ts, tt, wi, wp) = (self.value(seq), self.value(target), self.value(w_item), self.value(w_prod));
        let (rows, d) = (ts.rows(), ts.cols());
        let (b, h) = (tt.rows(), wi.cols());
        if n == 0 || rows != b * n || tt.cols() != d {
            return Err(Error::dim(format!(
                "seq_target_product: sequence {:?} vs target {:?} with length {n}",
                ts.shape(),
                tt.shape()
            )));
        }
        if wi.rows() != d || wp.shape() != wi.shape() {
            return Err(Error::dim(format!(
                "seq_target_product: weights {:?} and {:?} for width {d}",
                wi.shape(),
                wp.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * h);
        let mut w_eff = vec![0.0; d * h];
        for i in 0..b {
            effective_weight(&mut w_eff, wi.data(), wp.data(), &tt.data()[i * d..(i + 1) * d], h);
            data.extend(kernels::matmul(&ts.data()[i * n * d..(i + 1) * n * d], &w_eff, n, d, h));
        }
        let out = Tensor::matrix(rows, h, data)?;
        let rg = self.rg(seq) || self.rg(target) || self.rg(w_item) || self.rg(w_prod);
        Ok(self.push(
            out,
            Op::SeqTargetProduct {
                seq,
                target,
                w_item,
                w_prod,
                n,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(probs);
        if t.numel() != labels.len() {
            return Err(Error::dim(format!(
                "bce: {} predictions vs {} labels",
                t.numel(),
                labels.len()
            )));
        }
        let n = labels.len() as f64;
        let total: f64 = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            })
            .sum();
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(-total / n),
            Op::Bce(probs, labels.to_vec()),
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => kernels::add_into(existing.data_mut(), &data),
            slot @ None => {
                *slot = Some(Tensor {
                    shape: self.shape(v).to_vec(),
                    data,
                })
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    let da = kernels::matmul_nt(gd, tb.data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = kernels::matmul_tn(ta.data(), gd, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (y.rows(), y.cols());
                self.accumulate(grads, *a, kernels::transpose(gd, r, c));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = gd.iter().zip(tb.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.rg(*b) {
                    let n = y.cols();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        kernels::add_into(&mut db, row);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MulCol(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let n = ta.cols();
                if self.rg(*a) {
                    let mut da = gd.to_vec();
                    for (row, &k) in da.chunks_mut(n).zip(ts.data()) {
                        row.iter_mut().for_each(|x| *x *= k);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*s) {
                    let ds = gd
                        .chunks(n)
                        .zip(ta.data().chunks(n))
                        .map(|(g, x)| kernels::dot(g, x))
                        .collect();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::ScaleBy(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let k = ts.data()[0];
                if self.rg(*a) {
                    self.accumulate(grads, *a, gd.iter().map(|g| g * k).collect());
                }
                if self.rg(*s) {
                    self.accumulate(grads, *s, vec![kernels::dot(gd, ta.data())]);
                }
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * k).collect());
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, gd.iter().map(|g| g * c).collect());
                }
            }
            Op::Relu(a) => {
                let da = gd
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = gd
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &o)| g * o * (1.0 - o))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::RowSum(a) => {
                let n = self.value(*a).cols();
                let da = gd.iter().flat_map(|&g| std::iter::repeat_n(g, n)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::ColSum(a) => {
                let m = self.value(*a).rows();
                let mut da = Vec::with_capacity(m * gd.len());
                for _ in 0..m {
                    da.extend_from_slice(gd);
                }
                self.accumulate(grads, *a, da);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.cols();
                let scaled = |other: &Tensor| -> Vec<f64> {
                    other
                        .data()
                        .chunks(n)
                        .zip(gd)
                        .flat_map(|(row, &g)| row.iter().map(move |x| x * g))
                        .collect()
                };
                if self.rg(*a) {
                    self.accumulate(grads, *a, scaled(tb));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, scaled(ta));
                }
            }
            Op::RowCosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.cols();
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for (i, &g) in gd.iter().enumerate() {
                    let (x, z) = (ta.row(i), tb.row(i));
                    let (c, na, nb) = cosine_parts(x, z);
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let inv = 1.0 / (na * nb);
                    for j in 0..n {
                        da[i * n + j] = g * (z[j] * inv - c * x[j] / (na * na));
                        db[i * n + j] = g * (x[j] * inv - c * z[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut da = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(n).zip(gd.chunks(n)).zip(da.chunks_mut(n)) {
                    let inner = kernels::dot(yr, gr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (y.rows(), y.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, gd[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (n, w) = (ta.cols(), y.cols());
                let mut da = vec![0.0; ta.numel()];
                for (i, gr) in gd.chunks(w).enumerate() {
                    da[i * n + start..i * n + start + w].copy_from_slice(gr);
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let mut da = vec![0.0; ta.numel()];
                da[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, da);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Gather(table, idx) => {
                let tt = self.value(*table);
                let n = tt.cols();
                let mut dt = vec![0.0; tt.numel()];
                for (gr, &i) in gd.chunks(n).zip(idx) {
                    kernels::add_into(&mut dt[i * n..(i + 1) * n], gr);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::RepeatRows(a, times) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let mut da = vec![0.0; ta.numel()];
                for (r, gr) in gd.chunks(n).enumerate() {
                    let src = r / times;
                    kernels::add_into(&mut da[src * n..(src + 1) * n], gr);
                }
                self.accumulate(grads, *a, da);
            }
            Op::SegmentSum(a, group) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let mut da = Vec::with_capacity(ta.numel());
                for gr in gd.chunks(n) {
                    for _ in 0..*group {
                        da.extend_from_slice(gr);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SeqTargetProduct {
                seq,
                target,
                w_item,
                w_prod,
                n,
            } => {
                let (ts, tt, wi, wp) = (self.value(*seq), self.value(*target), self.value(*w_item), self.value(*w_prod));
                let (d, b, h, n) = (ts.cols(), tt.rows(), wi.cols(), *n);
                let need_w = self.rg(*w_item) || self.rg(*w_prod);
                let mut d_item = vec![0.0; d * h];
                let mut d_prod = vec![0.0; d * h];
                let mut d_seq = Vec::with_capacity(if self.rg(*seq) { ts.numel() } else { 0 });
                let mut d_target = Vec::with_capacity(if self.rg(*target) { tt.numel() } else { 0 });
                let mut w_eff = vec![0.0; d * h];
                for i in 0..b {
                    let s_i = &ts.data()[i * n * d..(i + 1) * n * d];
                    let g_i = &gd[i * n * h..(i + 1) * n * h];
                    let t_i = &tt.data()[i * d..(i + 1) * d];
                    if self.rg(*seq) {
                        effective_weight(&mut w_eff, wi.data(), wp.data(), t_i, h);
                        d_seq.extend(kernels::matmul_nt(g_i, &w_eff, n, h, d));
                    }
                    if need_w || self.rg(*target) {
                        // G_i = s_iᵀ·g_i is the gradient of the effective weight
                        let big_g = kernels::matmul_tn(s_i, g_i, n, d, h);
                        for p in 0..d {
                            let row = &big_g[p * h..(p + 1) * h];
                            kernels::add_into(&mut d_item[p * h..(p + 1) * h], row);
                            for (o, &x) in d_prod[p * h..(p + 1) * h].iter_mut().zip(row) {
                                *o += t_i[p] * x;
                            }
                            if self.rg(*target) {
                                d_target.push(kernels::dot(row, &wp.data()[p * h..(p + 1) * h]));
                            }
                        }
                    }
                }
                self.accumulate(grads, *w_item, d_item);
                self.accumulate(grads, *w_prod, d_prod);
                self.accumulate(grads, *seq, d_seq);
                self.accumulate(grads, *target, d_target);
            }
            Op::Bce(p, labels) => {
                let tp = self.value(*p);
                let n = labels.len() as f64;
                let dp = tp
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            -gd[0] * (y / p - (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, dp);
            }
        }
    }
}

/// `(cosine, ‖a‖, ‖b‖)`; cosine is 0 when either norm is 0.
pub(crate) fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = kernels::dot(a, a).sqrt();
    let nb = kernels::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, na, nb);
    }
    ((kernels::dot(a, b) / (na * nb)).clamp(-1.0, 1.0), na, nb)
}

/// `out = W_item + diag(t)·W_prod` for `[d, h]` weights.
fn effective_weight(out: &mut [f64], w_item: &[f64], w_prod: &[f64], t: &[f64], h: usize) {
    for (p, &tp) in t.iter().enumerate() {
        let range = p * h..(p + 1) * h;
        for ((o, &a), &c) in out[range.clone()].iter_mut().zip(&w_item[range.clone()]).zip(&w_prod[range]) {
            *o = a + tp * c;
        }
    }
}
