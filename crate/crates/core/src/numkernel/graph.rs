//! A small reverse-mode tape over 2-D tensors.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological order for back-propagation. Trainable
//! parameters enter the tape through [`Graph::param`]; frozen parameters and
//! data enter as constants and never receive gradients.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numkernel::tensor::{matmul_at_into, matmul_bt_into};
use crate::numkernel::{ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients of a scalar with respect to the trainable parameters it touched.
pub type Gradients = BTreeMap<String, Tensor>;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf(Option<String>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    MeanBlocks(Var, usize),
    TileRows(Var, usize),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64>, seq_len: usize, heads: usize },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, probs: Tensor, labels: Vec<usize> },
    BceWithLogits { logits: Var, probs: Tensor, targets: Vec<f64>, clamped: Vec<bool> },
    Mse { x: Var, target: Tensor },
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
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

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    /// Loads a parameter. Frozen entries come in as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.param(name)?;
        let v = if p.frozen {
            self.push(p.value.clone(), Op::Leaf(None), false)
        } else {
            self.push(p.value.clone(), Op::Leaf(Some(name.to_string())), true)
        };
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// A trainable leaf that is not backed by a store (used for prompts).
    pub fn trainable(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf(Some(name.to_string())), true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let b = self.value(bias);
        let (r, c) = x.dims2();
        if b.len() != c {
            return Err(Error::shape(format!(
                "bias of length {} cannot broadcast over {} columns",
                b.len(),
                c
            )));
        }
        let mut out = x.data().to_vec();
        for i in 0..r {
            for (o, bv) in out[i * c..(i + 1) * c].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let value = Tensor::from_raw(vec![r, c], out);
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = x.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_raw(vec![r, c], out);
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::from_raw(vec![r, len], out);
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols needs equal row counts"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::from_raw(vec![rows, total], out);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        if len == 0 || start + len > r {
            return Err(Error::shape(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let value = Tensor::from_raw(vec![len, c], x.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows needs equal column counts"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        let value = Tensor::from_raw(vec![rows, cols], out);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let value = Tensor::from_raw(vec![1, c], out);
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Averages consecutive groups of `block` rows: `(n*block) x c -> n x c`.
    pub fn mean_blocks(&mut self, a: Var, block: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        if block == 0 || r % block != 0 {
            return Err(Error::shape(format!("{r} rows do not split into blocks of {block}")));
        }
        let n = r / block;
        let mut out = vec![0.0; n * c];
        for i in 0..r {
            let o = &mut out[(i / block) * c..(i / block + 1) * c];
            for (o, v) in o.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= block as f64;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_raw(vec![n, c], out), Op::MeanBlocks(a, block), rg))
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::shape("tile count must be positive"));
        }
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = Vec::with_capacity(r * c * times);
        for _ in 0..times {
            out.extend_from_slice(x.data());
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_raw(vec![r * times, c], out), Op::TileRows(a, times), rg))
    }

    /// Row-major reinterpretation with the same number of entries.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Multi-head scaled dot-product self-attention applied independently to
    /// consecutive blocks of `seq_len` rows. `q`, `k`, `v` are `(n*seq_len) x d`
    /// with `d` divisible by `heads`; the head outputs are concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (r, d) = self.value(q).dims2();
        if self.value(k).shape() != self.value(q).shape() || self.value(v).shape() != self.value(q).shape() {
            return Err(Error::shape("attention needs q, k, v of equal shape"));
        }
        if seq_len == 0 || r % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!(
                "attention over {r}x{d} with blocks of {seq_len} and {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; r * d];
        let mut probs = vec![0.0; (r / seq_len) * heads * seq_len * seq_len];
        let mut p_off = 0;
        for b in 0..r / seq_len {
            let base = b * seq_len;
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq_len {
                    let row = &mut probs[p_off + i * seq_len..p_off + (i + 1) * seq_len];
                    let qi = &qd[(base + i) * d + col..(base + i) * d + col + dh];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kd[(base + j) * d + col..(base + j) * d + col + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    let o = &mut out[(base + i) * d + col..(base + i) * d + col + dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vd[(base + j) * d + col..(base + j) * d + col + dh];
                        for (o, vv) in o.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
                p_off += seq_len * seq_len;
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::from_raw(vec![r, d], out),
            Op::Attention { q, k, v, probs, seq_len, heads },
            rg,
        ))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::numeric("cannot normalize a zero or non-finite row"));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let value = Tensor::from_raw(vec![r, c], out);
        let rg = self.rg(a);
        Ok(self.push(value, Op::L2NormalizeRows { x: a, norms }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer norm gain/bias must match feature width"));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
            inv_std.push(is);
        }
        let value = Tensor::from_raw(vec![r, c], out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: Tensor::from_raw(vec![r, c], xhat),
                inv_std,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over rows of `logits` (already temperature scaled).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (r, c) = z.dims2();
        if labels.len() != r {
            return Err(Error::shape(format!(
                "{} labels for {} logit rows",
                labels.len(),
                r
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::param(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = z.data().to_vec();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &mut probs[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            softmax_in_place(row);
        }
        loss /= r as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs: Tensor::from_raw(vec![r, c], probs),
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// averaged over every entry. Probabilities are clamped to
    /// `[clamp, 1 - clamp]` before the logarithms.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], clamp: f64) -> Result<Var> {
        let z = self.value(logits);
        if targets.len() != z.len() {
            return Err(Error::shape(format!(
                "{} targets for {} logits",
                targets.len(),
                z.len()
            )));
        }
        let n = z.len() as f64;
        let mut probs = Vec::with_capacity(z.len());
        let mut clamped = Vec::with_capacity(z.len());
        let mut loss = 0.0;
        for (&zv, &t) in z.data().iter().zip(targets) {
            let p = sigmoid(zv);
            let pc = p.clamp(clamp, 1.0 - clamp);
            clamped.push(pc != p);
            loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
            probs.push(p);
        }
        let shape = z.shape().to_vec();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::BceWithLogits {
                logits,
                probs: Tensor::from_raw(shape, probs),
                targets: targets.to_vec(),
                clamped,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(Error::shape(format!(
                "mse between {:?} and {:?}",
                xv.shape(),
                target.shape()
            )));
        }
        let loss = xv.squared_distance(target) / xv.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                x,
                target: target.clone(),
            },
            rg,
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::SumSquares(x), rg)
    }

    /// Back-propagates from a scalar node and returns the gradients of every
    /// trainable leaf that influenced it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::numeric("loss is not finite"));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        let mut out = Gradients::new();
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf(Some(name)) => {
                    out.insert(name.clone(), dy);
                }
                Op::Leaf(None) => {}
                op => self.backprop(op, &node.value, &dy, &mut grads)?,
            }
        }
        if out.values().any(|g| !g.is_finite()) {
            return Err(Error::numeric("non-finite gradient"));
        }
        Ok(out)
    }

    fn backprop(&self, op: &Op, y: &Tensor, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k) = av.dims2();
                let m = bv.cols();
                if self.rg(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_bt_into(dy.data(), bv.data(), &mut da, n, m, k);
                    accumulate(grads, *a, Tensor::from_raw(vec![n, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * m];
                    matmul_at_into(av.data(), dy.data(), &mut db, n, k, m);
                    accumulate(grads, *b, Tensor::from_raw(vec![k, m], db));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, dy.scale(-1.0));
                }
            }
            Op::AddRow(a, bias) => {
                if self.rg(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.rg(*bias) {
                    let (r, c) = dy.dims2();
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for (o, v) in db.iter_mut().zip(dy.row(i)) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(grads, *bias, Tensor::from_raw(shape, db));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, dy.scale(*c)),
            Op::Tanh(a) => {
                let dx = dy.zip_map(y, |d, t| d * (1.0 - t * t))?;
                accumulate(grads, *a, dx);
            }
            Op::Gelu(a) => {
                let dx = dy.zip_map(self.value(*a), |d, x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })?;
                accumulate(grads, *a, dx);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = y.dims2();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let dr = dy.row(i);
                    let s: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (dr[j] - s);
                    }
                }
                accumulate(grads, *a, Tensor::from_raw(vec![r, c], dx));
            }
            Op::Transpose(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, dy.transpose().reshape(shape)?);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (r, c) = src.dims2();
                let len = dy.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(dy.row(i));
                }
                accumulate(grads, *a, Tensor::from_raw(src.shape().to_vec(), dx));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2();
                    if self.rg(p) {
                        let mut dx = Vec::with_capacity(r * c);
                        for i in 0..r {
                            dx.extend_from_slice(&dy.row(i)[offset..offset + c]);
                        }
                        let shape = self.value(p).shape().to_vec();
                        accumulate(grads, p, Tensor::from_raw(shape, dx));
                    }
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut dx = vec![0.0; src.len()];
                dx[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                accumulate(grads, *a, Tensor::from_raw(src.shape().to_vec(), dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        let shape = self.value(p).shape().to_vec();
                        let dx = dy.data()[offset..offset + n].to_vec();
                        accumulate(grads, p, Tensor::from_raw(shape, dx));
                    }
                    offset += n;
                }
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let (r, c) = src.dims2();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy.data()[j] / r as f64;
                    }
                }
                accumulate(grads, *a, Tensor::from_raw(src.shape().to_vec(), dx));
            }
            Op::MeanBlocks(a, block) => {
                let src = self.value(*a);
                let (r, c) = src.dims2();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let g = dy.row(i / block);
                    for j in 0..c {
                        dx[i * c + j] = g[j] / *block as f64;
                    }
                }
                accumulate(grads, *a, Tensor::from_raw(src.shape().to_vec(), dx));
            }
            Op::TileRows(a, times) => {
                let src = self.value(*a);
                let n = src.len();
                let mut dx = vec![0.0; n];
                for t in 0..*times {
                    for (o, g) in dx.iter_mut().zip(&dy.data()[t * n..(t + 1) * n]) {
                        *o += g;
                    }
                }
                accumulate(grads, *a, Tensor::from_raw(src.shape().to_vec(), dx));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, dy.clone().reshape(shape)?);
            }
            Op::Attention { q, k, v, probs, seq_len, heads } => {
                let (r, d) = y.dims2();
                let (s, nh) = (*seq_len, *heads);
                let dh = d / nh;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let g = dy.data();
                let mut dq = vec![0.0; r * d];
                let mut dk = vec![0.0; r * d];
                let mut dv = vec![0.0; r * d];
                let mut da = vec![0.0; s];
                let mut p_off = 0;
                for b in 0..r / s {
                    let base = b * s;
                    for h in 0..nh {
                        let col = h * dh;
                        for i in 0..s {
                            let p = &probs[p_off + i * s..p_off + (i + 1) * s];
                            let gi = &g[(base + i) * d + col..(base + i) * d + col + dh];
                            for j in 0..s {
                                let vj = &vd[(base + j) * d + col..(base + j) * d + col + dh];
                                da[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                let dvj = &mut dv[(base + j) * d + col..(base + j) * d + col + dh];
                                for (o, gg) in dvj.iter_mut().zip(gi) {
                                    *o += p[j] * gg;
                                }
                            }
                            let dot: f64 = p.iter().zip(&da).map(|(a, b)| a * b).sum();
                            for j in 0..s {
                                let ds = p[j] * (da[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for t in 0..dh {
                                    dq[(base + i) * d + col + t] += ds * kd[(base + j) * d + col + t];
                                    dk[(base + j) * d + col + t] += ds * qd[(base + i) * d + col + t];
                                }
                            }
                        }
                        p_off += s * s;
                    }
                }
                for (var, data) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.rg(var) {
                        accumulate(grads, var, Tensor::from_raw(vec![r, d], data));
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (r, c) = y.dims2();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let dr = dy.row(i);
                    let proj: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (dr[j] - yr[j] * proj) / norms[i];
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::from_raw(shape, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.dims2();
                let g = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += dy.data()[i * c + j] * xhat.data()[i * c + j];
                            db[j] += dy.data()[i * c + j];
                        }
                    }
                    if self.rg(*gain) {
                        let shape = self.value(*gain).shape().to_vec();
                        accumulate(grads, *gain, Tensor::from_raw(shape, dg));
                    }
                    if self.rg(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(grads, *bias, Tensor::from_raw(shape, db));
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let h = xhat.row(i);
                        let dh: Vec<f64> = (0..c).map(|j| dy.data()[i * c + j] * g[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(grads, *x, Tensor::from_raw(shape, dx));
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let scale = dy.data()[0] / labels.len() as f64;
                let c = probs.cols();
                let mut dz = probs.data().to_vec();
                for (i, &yl) in labels.iter().enumerate() {
                    dz[i * c + yl] -= 1.0;
                }
                for v in &mut dz {
                    *v *= scale;
                }
                let shape = self.value(*logits).shape().to_vec();
                accumulate(grads, *logits, Tensor::from_raw(shape, dz));
            }
            Op::BceWithLogits {
                logits,
                probs,
                targets,
                clamped,
            } => {
                let scale = dy.data()[0] / targets.len() as f64;
                let dz = probs
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(clamped)
                    .map(|((p, t), &cl)| if cl { 0.0 } else { (p - t) * scale })
                    .collect();
                let shape = self.value(*logits).shape().to_vec();
                accumulate(grads, *logits, Tensor::from_raw(shape, dz));
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let scale = 2.0 * dy.data()[0] / xv.len() as f64;
                let dx = xv.zip_map(target, |a, b| (a - b) * scale)?;
                accumulate(grads, *x, dx);
            }
            Op::SumSquares(x) => {
                let scale = 2.0 * dy.data()[0];
                accumulate(grads, *x, self.value(*x).scale(scale));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::grad_check;

    #[test]
    fn block_ops_pass_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(&[6, 4], 1.0, &mut rng), false);
        store.insert("wq", Tensor::randn(&[4, 4], 0.8, &mut rng), false);
        store.insert("wk", Tensor::randn(&[4, 4], 0.8, &mut rng), false);
        store.insert("pos", Tensor::randn(&[3, 4], 1.0, &mut rng), false);
        let report = grad_check(
            |g, p| {
                let x = g.param(p, "x")?;
                let pos = g.param(p, "pos")?;
                let pos = g.tile_rows(pos, 2)?;
                let x = g.add(x, pos)?;
                let wq = g.param(p, "wq")?;
                let wk = g.param(p, "wk")?;
                let q = g.matmul(x, wq)?;
                let k = g.matmul(x, wk)?;
                let a = g.attention(q, k, x, 3, 2)?;
                let m = g.mean_blocks(a, 3)?;
                let flat = g.reshape(m, &[1, 8])?;
                let t = g.tanh(flat);
                Ok(g.sum_squares(t))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
    }

    #[test]
    fn attention_blocks_do_not_mix() {
        let mut g = Graph::new();
        let mut rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(3)
        };
        let x = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let xv = g.constant(x.clone());
        let both = g.attention(xv, xv, xv, 2, 1).unwrap();
        let top = g.constant(Tensor::from_raw(vec![2, 2], x.data()[..4].to_vec()));
        let alone = g.attention(top, top, top, 2, 1).unwrap();
        assert_eq!(&g.value(both).data()[..4], g.value(alone).data());
    }

    #[test]
    fn cross_entropy_two_class_value() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let l = g.cross_entropy(z, &[0]).unwrap();
        // -ln(e / (e + 1))
        assert!((g.scalar(l) - 0.313_261_687_518_222_9).abs() < 1e-12);
    }

    #[test]
    fn bce_at_half_probability() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 3]));
        let l = g.bce_with_logits(z, &[1.0, 0.0, 1.0], 1e-7).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((3.0 * g.scalar(l) - 2.079_441_541_679_836).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_fit_is_bounded_by_clamp() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 3, vec![60.0, -60.0, 60.0]).unwrap());
        let l = g.bce_with_logits(z, &[1.0, 0.0, 1.0], 1e-7).unwrap();
        assert!(g.scalar(l) <= 3.0 * 1e-6);
    }

    #[test]
    fn composite_ops_pass_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.insert("a", Tensor::randn(&[3, 4], 1.0, &mut rng), false);
        store.insert("b", Tensor::randn(&[4, 5], 1.0, &mut rng), false);
        store.insert("bias", Tensor::randn(&[5], 1.0, &mut rng), false);
        store.insert("gain", Tensor::randn(&[5], 1.0, &mut rng), false);
        store.insert("shift", Tensor::randn(&[5], 1.0, &mut rng), false);
        let target = Tensor::randn(&[1, 5], 1.0, &mut rng);
        let report = grad_check(
            |g, p| {
                let a = g.param(p, "a")?;
                let b = g.param(p, "b")?;
                let bias = g.param(p, "bias")?;
                let gain = g.param(p, "gain")?;
                let shift = g.param(p, "shift")?;
                let h = g.matmul(a, b)?;
                let h = g.add_row(h, bias)?;
                let h = g.layer_norm(h, gain, shift, 1e-5)?;
                let h = g.gelu(h);
                let left = g.slice_cols(h, 0, 2)?;
                let right = g.slice_cols(h, 2, 3)?;
                let right = g.tanh(right);
                let h = g.concat_cols(&[right, left])?;
                let s = g.softmax_rows(h);
                let top = g.slice_rows(s, 0, 2)?;
                let bottom = g.slice_rows(h, 2, 1)?;
                let stacked = g.concat_rows(&[bottom, top])?;
                let t = g.transpose(stacked);
                let t = g.transpose(t);
                let n = g.l2_normalize_rows(t)?;
                let m = g.mean_rows(n);
                let l1 = g.mse(m, &target)?;
                let l2 = g.cross_entropy(h, &[0, 3, 4])?;
                let l3 = g.bce_with_logits(s, &[1.0; 15], 1e-7)?;
                let sq = g.sum_squares(m);
                let s1 = g.add(l1, l2)?;
                let s2 = g.sub(l3, sq)?;
                let s2 = g.scale(s2, 0.5);
                g.add(s1, s2)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2, 2], 0.5), true);
        store.insert("x", Tensor::full(&[1, 2], 1.0), false);
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let x = g.param(&store, "x").unwrap();
        let y = g.matmul(x, w).unwrap();
        let l = g.sum_squares(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.contains_key("x"));
        assert!(!grads.contains_key("w"));
    }
}
