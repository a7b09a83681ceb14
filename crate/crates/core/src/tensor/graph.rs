//! Recorded computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] borrows the model's [`ParamStore`] immutably while it records the
//! forward pass. [`Graph::backward`] returns the parameter [`Gradients`]; frozen
//! parameters never receive an entry. Every op checks its output for non-finite
//! values and fails with [`TabiiError::NonFinite`].

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng as _;

use crate::error::{Result, TabiiError};
use crate::rng::Rng;
use crate::tensor::matrix::gemm;
use crate::tensor::{Gradients, Matrix, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Allowed-key pattern for one attention group: `allowed[q * seq_len + k]`.
pub type AttentionMask = Rc<Vec<bool>>;

enum NodeValue {
    Owned(Matrix),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm { src: Var, inv_std: Vec<f64> },
    Gather { src: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { src: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    GroupMean { src: Var, group: usize },
    Dropout { src: Var, mask: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    L2NormalizeRows { src: Var, norms: Vec<f64> },
    Clamp { src: Var, lo: f64, hi: f64 },
}

struct Node {
    value: NodeValue,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    dropout_rng: Option<Rng>,
    released: bool,
}

impl<'s> Graph<'s> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            dropout_rng: None,
            released: false,
        }
    }

    /// Training-mode graph; dropout masks are drawn from `rng`.
    pub fn training(store: &'s ParamStore, rng: Rng) -> Self {
        let mut g = Graph::new(store);
        g.dropout_rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            NodeValue::Owned(m) => m,
            NodeValue::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention probabilities recorded by [`Graph::attention`], laid out as
    /// `[group][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn check_live(&self) -> Result<()> {
        if self.released {
            Err(TabiiError::Graph("graph reused after backward released it".into()))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        self.check_live()?;
        if !value.is_finite() {
            return Err(TabiiError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: NodeValue::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, m: Matrix) -> Result<Var> {
        self.push(m, Op::Leaf, false, "constant")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: NodeValue::Param(id),
            op: Op::Param(id),
            requires_grad: self.store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TabiiError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(row) != (1, m) {
            return Err(TabiiError::shape("add_row", format!("{n}x{m} + {:?}", self.shape(row))));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (x, y) in out.row_mut(i).iter_mut().zip(&r) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg, "add_row")
    }

    /// `a (n×m) ⊙ row (1×m)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(row) != (1, m) {
            return Err(TabiiError::shape("mul_row", format!("{n}x{m} * {:?}", self.shape(row))));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (x, y) in out.row_mut(i).iter_mut().zip(&r) {
                *x *= y;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::MulRow(a, row), rg, "mul_row")
    }

    /// `a (n×m) ⊙ col (n×1)`: scales each row by one value.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(col) != (n, 1) {
            return Err(TabiiError::shape("mul_col", format!("{n}x{m} * {:?}", self.shape(col))));
        }
        let mut out = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        for (i, s) in c.iter().enumerate() {
            for x in out.row_mut(i) {
                *x *= s;
            }
        }
        let rg = self.rg(&[a, col]);
        self.push(out, Op::MulCol(a, col), rg, "mul_col")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Shift(a), rg, "add_scalar")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg, "gelu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg, "log")
    }

    /// Row-wise softmax (the reduced axis is the column axis).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.shape();
        let mut out = Matrix::zeros(n, m);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNorm { src: a, inv_std }, rg, "layer_norm")
    }

    /// Embedding lookup / row gather: output row `i` is `src` row `idx[i]`.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let n = self.shape(src).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TabiiError::shape("gather", format!("index {bad} out of {n} rows")));
        }
        let out = self.value(src).select_rows(idx);
        let rg = self.rg(&[src]);
        self.push(out, Op::Gather { src, idx: idx.to_vec() }, rg, "gather")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TabiiError::shape("concat_cols", "no inputs"));
        }
        let n = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != n) {
            return Err(TabiiError::shape("concat_cols", "row counts differ"));
        }
        let width: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(n, width);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            let w = m.cols();
            for i in 0..n {
                out.row_mut(i)[off..off + w].copy_from_slice(m.row(i));
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TabiiError::shape("concat_rows", "no inputs"));
        }
        let m = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != m) {
            return Err(TabiiError::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / m.max(1);
        let out = Matrix::from_vec(rows, m, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.shape(src).1;
        if start >= end || end > m {
            return Err(TabiiError::shape("slice_cols", format!("{start}..{end} of {m}")));
        }
        let out = self.value(src).slice_cols(start, end);
        let rg = self.rg(&[src]);
        self.push(out, Op::SliceCols { src, start }, rg, "slice_cols")
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, src: Var, rows: usize, cols: usize) -> Result<Var> {
        let m = self.value(src);
        if m.len() != rows * cols {
            return Err(TabiiError::shape("reshape", format!("{:?} -> {rows}x{cols}", m.shape())));
        }
        let out = Matrix::from_vec(rows, cols, m.data().to_vec())?;
        let rg = self.rg(&[src]);
        self.push(out, Op::Reshape(src), rg, "reshape")
    }

    pub fn transpose(&mut self, src: Var) -> Result<Var> {
        let out = self.value(src).transpose();
        let rg = self.rg(&[src]);
        self.push(out, Op::Transpose(src), rg, "transpose")
    }

    pub fn sum(&mut self, src: Var) -> Result<Var> {
        let out = Matrix::scalar(self.value(src).sum());
        let rg = self.rg(&[src]);
        self.push(out, Op::Sum(src), rg, "sum")
    }

    pub fn mean(&mut self, src: Var) -> Result<Var> {
        let m = self.value(src);
        if m.is_empty() {
            return Err(TabiiError::shape("mean", "empty input"));
        }
        let out = Matrix::scalar(m.sum() / m.len() as f64);
        let rg = self.rg(&[src]);
        self.push(out, Op::Mean(src), rg, "mean")
    }

    /// Mean over consecutive blocks of `group` rows: `(G·group)×m → G×m`.
    pub fn group_mean(&mut self, src: Var, group: usize) -> Result<Var> {
        let (n, m) = self.shape(src);
        if group == 0 || n % group != 0 {
            return Err(TabiiError::shape("group_mean", format!("{n} rows, group {group}")));
        }
        let g = n / group;
        let x = self.value(src);
        let mut out = Matrix::zeros(g, m);
        for gi in 0..g {
            let o = out.row_mut(gi);
            for r in 0..group {
                for (a, b) in o.iter_mut().zip(x.row(gi * group + r)) {
                    *a += b;
                }
            }
            for a in o.iter_mut() {
                *a /= group as f64;
            }
        }
        let rg = self.rg(&[src]);
        self.push(out, Op::GroupMean { src, group }, rg, "group_mean")
    }

    /// Inverted dropout. Identity on evaluation graphs or when `rate == 0`.
    pub fn dropout(&mut self, src: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TabiiError::InvalidArgument(format!("dropout rate {rate}")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(src);
        };
        if rate == 0.0 {
            return Ok(src);
        }
        let n = self.nodes[src.0].value_len(self.store);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let x = self.value(src);
        let out = Matrix::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(&mask).map(|(a, b)| a * b).collect(),
        )?;
        let rg = self.rg(&[src]);
        self.push(out, Op::Dropout { src, mask }, rg, "dropout")
    }

    /// Scaled dot-product attention over groups of `seq_len` consecutive rows.
    ///
    /// `q`, `k` are `(G·T)×dk` and `v` is `(G·T)×dv`; each is split into `heads`
    /// equal column blocks. `mask`, when given, is an allowed-key pattern of
    /// `T×T` entries shared by every group, or `G·T·T` entries (one pattern per
    /// group); disallowed keys get exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (nq, dk) = self.shape(q);
        let (nv, dv) = self.shape(v);
        if self.shape(k) != (nq, dk) || nv != nq {
            return Err(TabiiError::shape("attention", "q/k/v row counts or widths differ"));
        }
        if seq_len == 0 || nq % seq_len != 0 || heads == 0 || dk % heads != 0 || dv % heads != 0 {
            return Err(TabiiError::shape(
                "attention",
                format!("{nq} rows, seq_len {seq_len}, heads {heads}, dk {dk}, dv {dv}"),
            ));
        }
        let groups = nq / seq_len;
        let tt = seq_len * seq_len;
        let per_group = match mask {
            Some(m) if m.len() == tt => false,
            Some(m) if m.len() == groups * tt => true,
            Some(_) => return Err(TabiiError::shape("attention", "mask size")),
            None => false,
        };
        if let Some(m) = mask {
            if m.chunks(tt).any(|gm| (0..seq_len).any(|i| !gm[i * seq_len..(i + 1) * seq_len].iter().any(|&a| a))) {
                return Err(TabiiError::shape("attention", "query with no allowed key"));
            }
        }
        let (hk, hv) = (dk / heads, dv / heads);
        let scale = 1.0 / (hk as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let t = seq_len;
        let mut probs = vec![0.0; groups * heads * t * t];
        let mut out = Matrix::zeros(nq, dv);
        let mut scores = vec![0.0; t];
        for g in 0..groups {
            for h in 0..heads {
                let base = (g * heads + h) * t * t;
                for i in 0..t {
                    let qi = &qm.row(g * t + i)[h * hk..(h + 1) * hk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        let allowed = mask.map_or(true, |m| m[if per_group { g * tt } else { 0 } + i * t + j]);
                        scores[j] = if allowed {
                            let kj = &km.row(g * t + j)[h * hk..(h + 1) * hk];
                            let s = dot(qi, kj) * scale;
                            max = max.max(s);
                            s
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = if s.is_finite() { (*s - max).exp() } else { 0.0 };
                        z += *s;
                    }
                    let p = &mut probs[base + i * t..base + (i + 1) * t];
                    for (pj, s) in p.iter_mut().zip(&scores) {
                        *pj = s / z;
                    }
                    let orow = &mut out.row_mut(g * t + i)[h * hv..(h + 1) * hv];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj != 0.0 {
                            let vj = &vm.row(g * t + j)[h * hv..(h + 1) * hv];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += pj * x;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            rg,
            "attention",
        )
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])` as a `1×1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, c) = self.shape(logits);
        if targets.len() != n || weights.len() != n {
            return Err(TabiiError::shape("cross_entropy", "target/weight count differs from rows"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TabiiError::shape("cross_entropy", format!("target {bad} with {c} classes")));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for i in 0..n {
            let row = probs.row_mut(i);
            softmax_in_place(row);
            loss -= weights[i] * row[targets[i]].max(f64::MIN_POSITIVE).ln();
        }
        let rg = self.rg(&[logits]);
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Divide each row by its Euclidean norm. A zero-norm row is an error.
    pub fn l2_normalize_rows(&mut self, src: Var) -> Result<Var> {
        let x = self.value(src);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TabiiError::InvalidArgument(format!("row {i} has zero norm")));
            }
            for v in out.row_mut(i) {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[src]);
        self.push(out, Op::L2NormalizeRows { src, norms }, rg, "l2_normalize_rows")
    }

    pub fn clamp(&mut self, src: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(src).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[src]);
        self.push(out, Op::Clamp { src, lo, hi }, rg, "clamp")
    }

    /// `x·W + b` with `W` stored `in×out` and `b` as `1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar `loss`. The graph cannot record or run backward again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_live()?;
        if self.shape(loss) != (1, 1) {
            return Err(TabiiError::Graph(format!(
                "backward requires a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.released = true;
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Matrix,
        grads: &mut [Option<Matrix>],
        out: &mut Gradients,
    ) -> Result<()> {
        let y = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => match out.by_param.get_mut(id) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    out.by_param.insert(*id, g);
                }
            },
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    gemm(&g, false, bm, true, &mut ga, 0.0);
                    self.acc(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Matrix::zeros(bm.rows(), bm.cols());
                    gemm(am, true, &g, false, &mut gb, 0.0);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.requires_grad(*row) {
                    self.acc(grads, *row, column_sums(&g));
                }
                self.acc(grads, *a, g);
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.requires_grad(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.acc(grads, *row, column_sums(&prod));
                }
                if self.requires_grad(*a) {
                    let mut ga = g;
                    for k in 0..ga.rows() {
                        for (x, s) in ga.row_mut(k).iter_mut().zip(r.data()) {
                            *x *= s;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
            }
            Op::MulCol(a, col) => {
                let c = self.value(*col);
                if self.requires_grad(*col) {
                    let am = self.value(*a);
                    let gc: Vec<f64> = (0..g.rows()).map(|k| dot(g.row(k), am.row(k))).collect();
                    self.acc(grads, *col, Matrix::column_vector(gc));
                }
                if self.requires_grad(*a) {
                    let mut ga = g;
                    for k in 0..ga.rows() {
                        let s = c.data()[k];
                        for x in ga.row_mut(k) {
                            *x *= s;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::Shift(a) => self.acc(grads, *a, g),
            Op::Tanh(a) => self.acc(grads, *a, g.zip_map(y, |gx, t| gx * (1.0 - t * t))),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, |gx, v| if v > 0.0 { gx } else { 0.0 }));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, |gx, v| gx * gelu_grad(v)));
            }
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(y, |gx, e| gx * e)),
            Op::Log(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, |gx, v| gx / v));
            }
            Op::Softmax(a) => {
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for k in 0..g.rows() {
                    let (gr, pr) = (g.row(k), y.row(k));
                    let s = dot(gr, pr);
                    for ((o, gx), p) in ga.row_mut(k).iter_mut().zip(gr).zip(pr) {
                        *o = p * (gx - s);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm { src, inv_std } => {
                let m = g.cols() as f64;
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for k in 0..g.rows() {
                    let (gr, xh) = (g.row(k), y.row(k));
                    let mg = gr.iter().sum::<f64>() / m;
                    let mgx = dot(gr, xh) / m;
                    for ((o, gx), h) in ga.row_mut(k).iter_mut().zip(gr).zip(xh) {
                        *o = inv_std[k] * (gx - mg - h * mgx);
                    }
                }
                self.acc(grads, *src, ga);
            }
            Op::Gather { src, idx } => {
                let (n, m) = self.shape(*src);
                let mut gs = Matrix::zeros(n, m);
                for (o, &r) in idx.iter().enumerate() {
                    for (a, b) in gs.row_mut(r).iter_mut().zip(g.row(o)) {
                        *a += b;
                    }
                }
                self.acc(grads, *src, gs);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.requires_grad(p) {
                        self.acc(grads, p, g.slice_cols(off, off + w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.requires_grad(p) {
                        let part = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec())?;
                        self.acc(grads, p, part);
                    }
                    off += r;
                }
            }
            Op::SliceCols { src, start } => {
                let (n, m) = self.shape(*src);
                let mut gs = Matrix::zeros(n, m);
                let w = g.cols();
                for k in 0..n {
                    gs.row_mut(k)[*start..*start + w].copy_from_slice(g.row(k));
                }
                self.acc(grads, *src, gs);
            }
            Op::Reshape(src) => {
                let (r, c) = self.shape(*src);
                self.acc(grads, *src, Matrix::from_vec(r, c, g.into_vec())?);
            }
            Op::Transpose(src) => self.acc(grads, *src, g.transpose()),
            Op::Sum(src) => {
                let (r, c) = self.shape(*src);
                self.acc(grads, *src, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(src) => {
                let (r, c) = self.shape(*src);
                self.acc(grads, *src, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::GroupMean { src, group } => {
                let (n, m) = self.shape(*src);
                let mut gs = Matrix::zeros(n, m);
                let inv = 1.0 / *group as f64;
                for k in 0..n {
                    for (a, b) in gs.row_mut(k).iter_mut().zip(g.row(k / group)) {
                        *a = b * inv;
                    }
                }
                self.acc(grads, *src, gs);
            }
            Op::Dropout { src, mask } => {
                let gd: Vec<f64> = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                self.acc(grads, *src, Matrix::from_vec(g.rows(), g.cols(), gd)?);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *seq_len, *heads, probs, &g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let s = g.item();
                let mut gl = probs.clone();
                for k in 0..gl.rows() {
                    let w = weights[k] * s;
                    let row = gl.row_mut(k);
                    row[targets[k]] -= 1.0;
                    for x in row.iter_mut() {
                        *x *= w;
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::L2NormalizeRows { src, norms } => {
                let mut gs = Matrix::zeros(g.rows(), g.cols());
                for k in 0..g.rows() {
                    let (gr, yr) = (g.row(k), y.row(k));
                    let d = dot(gr, yr);
                    for ((o, gx), yx) in gs.row_mut(k).iter_mut().zip(gr).zip(yr) {
                        *o = (gx - yx * d) / norms[k];
                    }
                }
                self.acc(grads, *src, gs);
            }
            Op::Clamp { src, lo, hi } => {
                let x = self.value(*src);
                self.acc(
                    grads,
                    *src,
                    g.zip_map(x, |gx, v| if v > *lo && v < *hi { gx } else { 0.0 }),
                );
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        t: usize,
        heads: usize,
        probs: &[f64],
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (n, dk) = qm.shape();
        let dv = vm.cols();
        let (hk, hv) = (dk / heads, dv / heads);
        let scale = 1.0 / (hk as f64).sqrt();
        let groups = n / t;
        let mut gq = Matrix::zeros(n, dk);
        let mut gk = Matrix::zeros(n, dk);
        let mut gv = Matrix::zeros(n, dv);
        let mut dp = vec![0.0; t];
        for grp in 0..groups {
            for h in 0..heads {
                let base = (grp * heads + h) * t * t;
                for i in 0..t {
                    let p = &probs[base + i * t..base + (i + 1) * t];
                    let go = &g.row(grp * t + i)[h * hv..(h + 1) * hv];
                    // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
                    for j in 0..t {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vm.row(grp * t + j)[h * hv..(h + 1) * hv];
                        dp[j] = dot(go, vj);
                        let gvj = &mut gv.row_mut(grp * t + j)[h * hv..(h + 1) * hv];
                        for (a, b) in gvj.iter_mut().zip(go) {
                            *a += p[j] * b;
                        }
                    }
                    let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi: Vec<f64> = qm.row(grp * t + i)[h * hk..(h + 1) * hk].to_vec();
                    for j in 0..t {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let kj = &km.row(grp * t + j)[h * hk..(h + 1) * hk];
                        let gqi = &mut gq.row_mut(grp * t + i)[h * hk..(h + 1) * hk];
                        for (a, b) in gqi.iter_mut().zip(kj) {
                            *a += ds * b;
                        }
                        let gkj = &mut gk.row_mut(grp * t + j)[h * hk..(h + 1) * hk];
                        for (a, b) in gkj.iter_mut().zip(&qi) {
                            *a += ds * b;
                        }
                    }
                }
            }
        }
        self.acc(grads, q, gq);
        self.acc(grads, k, gk);
        self.acc(grads, v, gv);
    }
}

impl Node {
    fn value_len(&self, store: &ParamStore) -> usize {
        match &self.value {
            NodeValue::Owned(m) => m.len(),
            NodeValue::Param(id) => store.value(*id).len(),
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for k in 0..g.rows() {
        for (a, b) in out.row_mut(0).iter_mut().zip(g.row(k)) {
            *a += b;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
