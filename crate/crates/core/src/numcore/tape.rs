//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Tanh(usize),
    Scale(usize, f64),
    AddConst(usize),
    ConcatCols(usize, usize),
    NormalizePower {
        input: usize,
        rms: Vec<f64>,
    },
    Sum(usize),
    L1(usize, usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass. Not shared across threads.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(Error::NotOnTape)
        }
    }

    fn grad_of(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A leaf that gradients are not tracked for (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.grad_of(ia) || self.grad_of(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    /// `x[b, n] + bias[n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let xv = &self.nodes[ix].value;
        let bv = &self.nodes[ib].value;
        let (_, n) = xv.expect_matrix("add_bias")?;
        if bv.shape() != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("input {:?}, bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.grad_of(ix) || self.grad_of(ib);
        Ok(self.push(out, Op::AddBias(ix, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let out = av.zip_map(bv, |x, y| x + y);
        let rg = self.grad_of(ia) || self.grad_of(ib);
        Ok(self.push(out, Op::Add(ia, ib), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let out = av.zip_map(bv, |x, y| x * y);
        let rg = self.grad_of(ia) || self.grad_of(ib);
        Ok(self.push(out, Op::Mul(ia, ib), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| v.max(0.0));
        let rg = self.grad_of(ix);
        Ok(self.push(out, Op::Relu(ix), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(f64::tanh);
        let rg = self.grad_of(ix);
        Ok(self.push(out, Op::Tanh(ix), rg))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Result<Var> {
        match act {
            Activation::Identity => Ok(x),
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| v * factor);
        let rg = self.grad_of(ix);
        Ok(self.push(out, Op::Scale(ix, factor), rg))
    }

    /// Adds a constant tensor; no gradient flows into the constant.
    pub fn add_constant(&mut self, x: Var, constant: &Tensor) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        if xv.shape() != constant.shape() {
            return Err(Error::shape(
                "add_constant",
                format!("{:?} + {:?}", xv.shape(), constant.shape()),
            ));
        }
        let out = xv.zip_map(constant, |a, b| a + b);
        let rg = self.grad_of(ix);
        Ok(self.push(out, Op::AddConst(ix), rg))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (ra, ca) = av.expect_matrix("concat_cols")?;
        let (rb, cb) = bv.expect_matrix("concat_cols")?;
        if ra != rb {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} | {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::new(vec![ra, ca + cb], data)?;
        let rg = self.grad_of(ia) || self.grad_of(ib);
        Ok(self.push(out, Op::ConcatCols(ia, ib), rg))
    }

    /// Scales every row to unit mean-square.
    pub fn normalize_power(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let (rows, cols) = xv.expect_matrix("normalize_power")?;
        let mut out = xv.clone();
        let mut rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = out.row_mut(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            if !(ms.is_finite() && ms > 0.0) {
                return Err(Error::DegenerateFrame { row: r });
            }
            let s = ms.sqrt();
            for v in row.iter_mut() {
                *v /= s;
            }
            rms.push(s);
        }
        let rg = self.grad_of(ix);
        Ok(self.push(out, Op::NormalizePower { input: ix, rms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        let rg = self.grad_of(ix);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), rg))
    }

    /// Mean absolute elementwise difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        if av.is_empty() {
            return Err(Error::EmptyDataset("l1_loss on empty tensors"));
        }
        let n = av.len() as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum();
        let rg = self.grad_of(ia) || self.grad_of(ib);
        Ok(self.push(Tensor::scalar(s / n), Op::L1(ia, ib), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let lv = &self.nodes[il].value;
        let (rows, classes) = lv.expect_matrix("cross_entropy")?;
        if rows != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} logit rows, {} labels", labels.len()),
            ));
        }
        if rows == 0 {
            return Err(Error::EmptyDataset("cross_entropy on an empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let probs = lv.softmax_rows();
        let rg = self.grad_of(il);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        let shape = self.nodes[il].value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::full(shape, 1.0));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |target: usize, delta: Tensor| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.grad_of(*a) {
                    acc(*a, g.matmul(&val(*b).transpose().unwrap()).unwrap());
                }
                if self.grad_of(*b) {
                    acc(*b, val(*a).transpose().unwrap().matmul(g).unwrap());
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                if self.grad_of(*b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::vector(db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.grad_of(*a) {
                    acc(*a, g.zip_map(val(*b), |gv, bv| gv * bv));
                }
                if self.grad_of(*b) {
                    acc(*b, g.zip_map(val(*a), |gv, av| gv * av));
                }
            }
            Op::Relu(x) => {
                acc(*x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Tanh(x) => {
                acc(*x, g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y)));
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::AddConst(x) => acc(*x, g.clone()),
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let rows = g.rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor::new(vec![rows, ca], da).unwrap());
                acc(*b, Tensor::new(vec![rows, cb], db).unwrap());
            }
            Op::NormalizePower { input, rms } => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut dx = g.clone();
                for (r, s) in rms.iter().enumerate() {
                    let gy: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (d, yv) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d = (*d - yv * gy) / s;
                    }
                }
                acc(*input, dx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, Tensor::full(val(*x).shape(), gv));
            }
            Op::L1(a, b) => {
                let gv = g.item() / val(*a).len() as f64;
                let da = val(*a).zip_map(val(*b), |x, y| {
                    if x > y {
                        gv
                    } else if x < y {
                        -gv
                    } else {
                        0.0
                    }
                });
                if self.grad_of(*b) {
                    acc(*b, da.map(|v| -v));
                }
                acc(*a, da);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g.item() / labels.len() as f64;
                let mut d = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, d);
            }
        }
    }
}

/// Gradients of one backward pass, addressable by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` has no path to the loss.
    pub fn get(&self, v: Var) -> Result<Option<&Tensor>> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::NotOnTape);
        }
        Ok(self.grads[v.index].as_ref())
    }
}
