use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Storage precision for recorded values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every recorded value is rounded to the nearest binary32.
    F32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Rc<[f64]>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Exp(Var),
    /// Masked entries are exactly zero, so the softmax Jacobian alone handles them.
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Rc<[usize]>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    ScaleRows(Var, Var),
    SliceCols(Var, usize),
    Transpose(Var),
    Focal {
        probs: Var,
        /// Per element: d(loss)/d(prob), already averaged.
        dprob: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape is single-writer. Build one per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
    precision: Precision,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
            precision: Precision::F64,
            param_vars: HashMap::new(),
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::new()
        }
    }

    /// In checked mode (the default) every op verifies that its output is finite.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
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

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        if self.checked && !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from {name}")));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, "constant")
            .expect("constant inputs must be finite")
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// Loads a parameter. Each parameter is recorded at most once per tape so
    /// that its gradient collects every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self
            .push(store.get(id).clone(), Op::Leaf, true, store.name(id))
            .expect("parameters must be finite");
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, p) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{p}")));
        }
        let out = Tensor::as_matrix(m, p, matmul_raw(ta.data(), tb.data(), m, k, p));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng, "matmul")
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check_same(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::as_matrix(ta.rows(), ta.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::shape(format!(
                "add_row: {}x{} + {}x{}",
                ta.rows(),
                ta.cols(),
                tr.rows(),
                tr.cols()
            )));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % c])
            .collect();
        let out = Tensor::as_matrix(ta.rows(), c, data);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng, "add_row")
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| scale * x + shift).collect();
        let out = Tensor::as_matrix(ta.rows(), ta.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::Affine(a, scale), ng, "affine")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    /// Elementwise product with a constant array (used for dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Rc<[f64]>) -> Result<Var> {
        let ta = self.value(a);
        if c.len() != ta.len() {
            return Err(Error::shape(format!("mul_const: {} vs {}", ta.len(), c.len())));
        }
        let data = ta.data().iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::as_matrix(ta.rows(), ta.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::MulConst(a, c), ng, "mul_const")
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape(format!("concat_cols: {} rows vs {rows}", t.rows())));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::as_matrix(rows, cols, data), Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape(format!("concat_rows: {} cols vs {cols}", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::as_matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    /// Column means: `m x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; c];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.ng(a);
        self.push(Tensor::as_matrix(1, c, out), Op::MeanRows(a), ng, "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng, "mean")
    }

    fn unary(&mut self, a: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::as_matrix(ta.rows(), ta.cols(), data);
        let ng = self.ng(a);
        self.push(out, op, ng, name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(a, Op::LeakyRelu(a, slope), "leaky_relu", move |x| if x > 0.0 { x } else { slope * x })
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Elu(a), "elu", |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", f64::exp)
    }

    /// Row-wise softmax. Masked-out entries are exactly zero; each row needs
    /// at least one kept entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let ta = self.value(a);
        let (m, c) = (ta.rows(), ta.cols());
        if let Some(mask) = &mask {
            if mask.len() != ta.len() {
                return Err(Error::shape(format!("softmax mask {} vs {}", mask.len(), ta.len())));
            }
        }
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            let keep = |k: usize| mask.as_ref().is_none_or(|mk| mk[r * c + k]);
            let row = ta.row(r);
            let mut max = f64::NEG_INFINITY;
            for (k, &x) in row.iter().enumerate() {
                if keep(k) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateNeighborhood);
            }
            let mut total = 0.0;
            for (k, &x) in row.iter().enumerate() {
                if keep(k) {
                    let e = (x - max).exp();
                    out[r * c + k] = e;
                    total += e;
                }
            }
            for k in 0..c {
                out[r * c + k] /= total;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::as_matrix(m, c, out), Op::SoftmaxRows(a), ng, "softmax")
    }

    /// Softmax of an `E x 1` column within groups: entries sharing
    /// `groups[e]` are normalized together.
    pub fn segment_softmax(&mut self, a: Var, groups: Rc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols() != 1 || ta.rows() != groups.len() {
            return Err(Error::shape(format!(
                "segment_softmax: {}x{} with {} groups",
                ta.rows(),
                ta.cols(),
                groups.len()
            )));
        }
        let ngroups = groups.iter().copied().max().map_or(0, |g| g + 1);
        let mut max = vec![f64::NEG_INFINITY; ngroups];
        for (e, &g) in groups.iter().enumerate() {
            max[g] = max[g].max(ta.data()[e]);
        }
        let mut total = vec![0.0; ngroups];
        let mut out: Vec<f64> = groups
            .iter()
            .enumerate()
            .map(|(e, &g)| {
                let v = (ta.data()[e] - max[g]).exp();
                total[g] += v;
                v
            })
            .collect();
        for (e, &g) in groups.iter().enumerate() {
            out[e] /= total[g];
        }
        let ng = self.ng(a);
        let rows = out.len();
        self.push(Tensor::as_matrix(rows, 1, out), Op::SegmentSoftmax(a, groups), ng, "segment_softmax")
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, d) = (tx.rows(), tx.cols());
        if tg.len() != d || tb.len() != d {
            return Err(Error::shape(format!(
                "layer_norm: width {d}, gain {}, bias {}",
                tg.len(),
                tb.len()
            )));
        }
        let mut out = vec![0.0; m * d];
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..d {
                let h = if var == 0.0 { 0.0 } else { (row[k] - mean) * rs };
                xhat[r * d + k] = h;
                out[r * d + k] = tg.data()[k] * h + tb.data()[k];
            }
            if var == 0.0 {
                // gradient through a constant row is taken as zero
                rstd[r] = if rs.is_finite() { rs } else { 0.0 };
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Tensor::as_matrix(m, d, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
            "layer_norm",
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= ta.rows() {
                return Err(Error::shape(format!("gather row {i} of {}", ta.rows())));
            }
            data.extend_from_slice(ta.row(i));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather of zero rows"));
        }
        let ng = self.ng(a);
        self.push(Tensor::as_matrix(idx.len(), c, data), Op::GatherRows(a, idx), ng, "gather_rows")
    }

    /// `out[idx[e]] += a[e]` into a fresh `out_rows x c` matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, out_rows: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if idx.len() != ta.rows() {
            return Err(Error::shape(format!("scatter: {} rows, {} indices", ta.rows(), idx.len())));
        }
        let mut out = vec![0.0; out_rows * c];
        for (e, &i) in idx.iter().enumerate() {
            if i >= out_rows {
                return Err(Error::shape(format!("scatter target {i} of {out_rows}")));
            }
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(ta.row(e)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::as_matrix(out_rows, c, out), Op::ScatterAddRows(a, idx), ng, "scatter_add_rows")
    }

    /// Multiplies row `e` of `a` by `w[e]` (`w` is `E x 1`).
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.cols() != 1 || tw.rows() != ta.rows() {
            return Err(Error::shape(format!(
                "scale_rows: {}x{} by {}x{}",
                ta.rows(),
                ta.cols(),
                tw.rows(),
                tw.cols()
            )));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tw.data()[i / c])
            .collect();
        let out = Tensor::as_matrix(ta.rows(), c, data);
        let ng = self.ng(a) || self.ng(w);
        self.push(out, Op::ScaleRows(a, w), ng, "scale_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if len == 0 || start + len > ta.cols() {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {}", ta.cols())));
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let out = Tensor::as_matrix(ta.rows(), len, data);
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng, "slice_cols")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * c];
        for r in 0..m {
            for k in 0..c {
                data[k * m + r] = ta.data()[r * c + k];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::as_matrix(c, m, data), Op::Transpose(a), ng, "transpose")
    }

    /// Records a scalar loss `value` whose derivative with respect to each
    /// element of `probs` is given by `dprob`.
    pub(crate) fn focal_node(&mut self, probs: Var, value: f64, dprob: Vec<f64>) -> Result<Var> {
        debug_assert_eq!(dprob.len(), self.value(probs).len());
        let ng = self.ng(probs);
        self.push(Tensor::scalar(value), Op::Focal { probs, dprob }, ng, "focal")
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| {
            let t = &self.nodes[v.0].value;
            Tensor::as_matrix(t.rows(), t.cols(), data)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, p) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    acc(*a, like(*a, matmul_bt_raw(g.data(), tb.data(), m, p, k)));
                }
                if self.ng(*b) {
                    acc(*b, like(*b, matmul_at_raw(ta.data(), g.data(), m, k, p)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, like(*a, g.data().to_vec()));
                acc(*b, like(*b, g.data().to_vec()));
            }
            Op::Sub(a, b) => {
                acc(*a, like(*a, g.data().to_vec()));
                acc(*b, like(*b, g.data().iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, like(*a, g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect()));
                acc(*b, like(*b, g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect()));
            }
            Op::AddRow(a, row) => {
                acc(*a, like(*a, g.data().to_vec()));
                let c = g.cols();
                let mut colsum = vec![0.0; c];
                for r in 0..g.rows() {
                    for (s, v) in colsum.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                acc(*row, like(*row, colsum));
            }
            Op::Affine(a, s) => acc(*a, like(*a, g.data().iter().map(|v| s * v).collect())),
            Op::MulConst(a, c) => acc(*a, like(*a, g.data().iter().zip(c.iter()).map(|(x, y)| x * y).collect())),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    acc(p, like(p, data));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, like(p, g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let m = ta.rows() as f64;
                let c = ta.cols();
                let data = (0..ta.len()).map(|i| g.data()[i % c] / m).collect();
                acc(*a, like(*a, data));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, like(*a, vec![g.item(); n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, like(*a, vec![g.item() / n as f64; n]));
            }
            Op::Sigmoid(a) => acc(*a, like(*a, g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect())),
            Op::Tanh(a) => acc(*a, like(*a, g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect())),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, like(*a, g.data().iter().zip(x.data()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::LeakyRelu(a, s) => {
                let x = self.value(*a);
                acc(*a, like(*a, g.data().iter().zip(x.data()).map(|(g, x)| if *x > 0.0 { *g } else { s * g }).collect()));
            }
            Op::Elu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((g, x), y)| if *x > 0.0 { *g } else { g * (y + 1.0) })
                    .collect();
                acc(*a, like(*a, data));
            }
            Op::Exp(a) => acc(*a, like(*a, g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect())),
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                let mut data = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        data[r * c + k] = yr[k] * (gr[k] - dot);
                    }
                }
                acc(*a, like(*a, data));
            }
            Op::SegmentSoftmax(a, groups) => {
                let ngroups = groups.iter().copied().max().map_or(0, |g| g + 1);
                let mut dot = vec![0.0; ngroups];
                for (e, &grp) in groups.iter().enumerate() {
                    dot[grp] += y.data()[e] * g.data()[e];
                }
                let data = groups
                    .iter()
                    .enumerate()
                    .map(|(e, &grp)| y.data()[e] * (g.data()[e] - dot[grp]))
                    .collect();
                acc(*a, like(*a, data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain);
                let (m, d) = (y.rows(), y.cols());
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; m * d];
                for r in 0..m {
                    let gr = g.row(r);
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_xh = 0.0;
                    for k in 0..d {
                        dgain[k] += gr[k] * xh[k];
                        dbias[k] += gr[k];
                        let dh = gr[k] * tg.data()[k];
                        mean_dh += dh;
                        mean_dh_xh += dh * xh[k];
                    }
                    mean_dh /= d as f64;
                    mean_dh_xh /= d as f64;
                    for k in 0..d {
                        let dh = gr[k] * tg.data()[k];
                        dx[r * d + k] = rstd[r] * (dh - mean_dh - xh[k] * mean_dh_xh);
                    }
                }
                acc(*x, like(*x, dx));
                acc(*gain, like(*gain, dgain));
                acc(*bias, like(*bias, dbias));
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut data = vec![0.0; ta.len()];
                for (e, &i) in idx.iter().enumerate() {
                    for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(g.row(e)) {
                        *o += v;
                    }
                }
                acc(*a, like(*a, data));
            }
            Op::ScatterAddRows(a, idx) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx.iter() {
                    data.extend_from_slice(g.row(i));
                }
                acc(*a, like(*a, data));
            }
            Op::ScaleRows(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                let c = ta.cols();
                if self.ng(*a) {
                    let data = g.data().iter().enumerate().map(|(i, v)| v * tw.data()[i / c]).collect();
                    acc(*a, like(*a, data));
                }
                if self.ng(*w) {
                    let data = (0..ta.rows())
                        .map(|r| ta.row(r).iter().zip(g.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*w, like(*w, data));
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (c, w) = (ta.cols(), g.cols());
                let mut data = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    data[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                acc(*a, like(*a, data));
            }
            Op::Transpose(a) => {
                let (m, c) = (g.rows(), g.cols());
                let mut data = vec![0.0; m * c];
                for r in 0..m {
                    for k in 0..c {
                        data[k * m + r] = g.data()[r * c + k];
                    }
                }
                acc(*a, like(*a, data));
            }
            Op::Focal { probs, dprob } => {
                let s = g.item();
                acc(*probs, like(*probs, dprob.iter().map(|d| d * s).collect()));
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter of `store`, zeros where a parameter was
    /// never loaded or did not influence the output.
    pub fn for_params(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                tape.param_vars
                    .get(&id)
                    .and_then(|v| self.get(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros_like(store.get(id)))
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
