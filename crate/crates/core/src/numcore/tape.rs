use std::collections::BTreeMap;

use super::rng::SplitRng;
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{CsdmError, Result};

/// Probability clamp applied before taking logarithms in the BCE loss.
pub const BCE_CLAMP: f64 = 1e-7;

/// Logistic function, stable over the whole `f64` range.
///
/// The result never underflows to zero: arguments below about -708 return
/// the smallest positive normal number instead.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.max(f64::MIN_POSITIVE)
}

/// Binary cross-entropy of one prediction, with `p_hat` clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn bce_loss(p_hat: f64, y: f64) -> Result<f64> {
    if y != 0.0 && y != 1.0 {
        return Err(CsdmError::Validation(format!(
            "label must be 0 or 1, got {y}"
        )));
    }
    let p = p_hat.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    Ok(-y * p.ln() - (1.0 - y) * (1.0 - p).ln())
}

/// Ragged list of index bags, one bag per output row (CSR layout).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bags {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Bags {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            indices: Vec::new(),
        }
    }

    pub fn one_hot(indices: &[usize]) -> Self {
        Self {
            offsets: (0..=indices.len()).collect(),
            indices: indices.to_vec(),
        }
    }

    pub fn from_lists<I: AsRef<[usize]>>(lists: &[I]) -> Self {
        let mut b = Self::new();
        for l in lists {
            b.push(l.as_ref());
        }
        b
    }

    pub fn push(&mut self, bag: &[usize]) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.indices.extend_from_slice(bag);
        self.offsets.push(self.indices.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bag(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather {
        param: ParamId,
        bags: Bags,
        shape: [usize; 2],
    },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Concat(Vec<Var>),
    RowSum(Var),
    Mean(Var),
    Dropout(Var, Vec<f64>),
    FmSecondOrder(Vec<Var>),
    BceWithLogits(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.by_param.iter()
    }

    fn slot(&mut self, id: ParamId, shape: &[usize]) -> &mut Tensor {
        self.by_param
            .entry(id)
            .or_insert_with(|| Tensor::zeros(shape))
    }
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Whole parameter tensor as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Row lookup into a `[vocab, d]` table; each output row is the mean of
    /// the rows named by its bag (a one-element bag is a plain lookup).
    pub fn gather(&mut self, store: &ParamStore, id: ParamId, bags: Bags) -> Result<Var> {
        let p = store.get(id);
        let table = &p.value;
        if table.shape().len() != 2 {
            return Err(CsdmError::dim(
                table.shape(),
                &[0, 0],
                "gather expects a 2-d table",
            ));
        }
        let (vocab, d) = (table.shape()[0], table.shape()[1]);
        if let Some(max) = bags.max_index() {
            if max >= vocab {
                return Err(CsdmError::Lookup {
                    field: p.name.clone(),
                    index: max,
                    vocab,
                });
            }
        }
        let n = bags.len();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let bag = bags.bag(r);
            if bag.is_empty() {
                continue;
            }
            let o = &mut out[r * d..(r + 1) * d];
            for &idx in bag {
                for (ov, tv) in o.iter_mut().zip(table.row(idx)) {
                    *ov += tv;
                }
            }
            let inv = 1.0 / bag.len() as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                param: id,
                bags,
                shape: [vocab, d],
            },
            true,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `x[n, m] + b[m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.shape().len() != 2 || bv.len() != xv.cols() {
            return Err(CsdmError::dim(xv.shape(), bv.shape(), "bias"));
        }
        let mut out = xv.clone();
        let m = xv.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % m];
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    /// Multiplies row `i` of `x[n, m]` by `s[i]`, where `s` has `n` elements.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(s);
        if sv.len() != xv.rows() {
            return Err(CsdmError::dim(xv.shape(), sv.shape(), "row scaling"));
        }
        let m = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= sv.data()[i / m];
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::ScaleRows(x, s), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let ng = self.needs(x);
        self.push(value, Op::Square(x), ng)
    }

    /// Column-wise concatenation of `[n, *]` matrices.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| CsdmError::Validation("concat of nothing".into()))?;
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != n {
                return Err(CsdmError::dim(
                    self.shape(parts[0]),
                    v.shape(),
                    "concat rows",
                ));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(vec![n, total], out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// Sum across columns: `[n, m] -> [n, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let data = (0..n).map(|i| xv.row(i).iter().sum()).collect();
        let value = Tensor::new(vec![n, 1], data).expect("row sum shape");
        let ng = self.needs(x);
        self.push(value, Op::RowSum(x), ng)
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len().max(1) as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`, and the op is
    /// the identity when `training` is false.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut SplitRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CsdmError::Validation(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Dropout(x, mask), ng))
    }

    /// Pairwise inner products of field embeddings, per row:
    /// `sum_{i<j} <v_i, v_j> = (|sum v_i|^2 - sum |v_i|^2) / 2`.
    pub fn fm_second_order(&mut self, fields: &[Var]) -> Result<Var> {
        if fields.len() < 2 {
            return Err(CsdmError::Validation("FM needs at least two fields".into()));
        }
        let shape = self.shape(fields[0]).to_vec();
        for &f in fields {
            if self.shape(f) != shape.as_slice() {
                return Err(CsdmError::dim(&shape, self.shape(f), "FM field shapes"));
            }
        }
        let (n, d) = (self.value(fields[0]).rows(), self.value(fields[0]).cols());
        let mut out = vec![0.0; n];
        let mut sum = vec![0.0; d];
        for (r, o) in out.iter_mut().enumerate() {
            sum.fill(0.0);
            let mut sq = 0.0;
            for &f in fields {
                for (s, &v) in sum.iter_mut().zip(self.value(f).row(r)) {
                    *s += v;
                    sq += v * v;
                }
            }
            *o = 0.5 * (sum.iter().map(|s| s * s).sum::<f64>() - sq);
        }
        let ng = fields.iter().any(|&f| self.needs(f));
        let value = Tensor::new(vec![n, 1], out)?;
        Ok(self.push(value, Op::FmSecondOrder(fields.to_vec()), ng))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(CsdmError::dim(lv.shape(), &[labels.len()], "labels"));
        }
        let mut total = 0.0;
        for (&x, &y) in lv.data().iter().zip(labels) {
            total += bce_loss(sigmoid(x), y)?;
        }
        let value = Tensor::scalar(total / labels.len().max(1) as f64);
        let ng = self.needs(logits);
        Ok(self.push(value, Op::BceWithLogits(logits, labels.to_vec()), ng))
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(CsdmError::dim(
                self.shape(loss),
                &[1],
                "backward needs a scalar",
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.slot(*id, node.value.shape()).add_assign(&g),
                Op::Gather { param, bags, shape } => {
                    let slot = out.slot(*param, shape);
                    let d = shape[1];
                    for r in 0..bags.len() {
                        let bag = bags.bag(r);
                        if bag.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / bag.len() as f64;
                        let gr = g.row(r);
                        for &idx in bag {
                            let dst = &mut slot.data_mut()[idx * d..(idx + 1) * d];
                            for (a, b) in dst.iter_mut().zip(gr) {
                                *a += b * inv;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        acc(&mut grads, *a, matmul_nt(&g, bv));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, matmul_tn(av, &g));
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(*b) {
                        let m = g.cols();
                        let mut db = vec![0.0; m];
                        for r in 0..g.rows() {
                            for (s, v) in db.iter_mut().zip(g.row(r)) {
                                *s += v;
                            }
                        }
                        let shape = self.shape(*b).to_vec();
                        acc(&mut grads, *b, Tensor::new(shape, db)?);
                    }
                    if self.needs(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                    }
                }
                Op::Scale(x, c) => acc(&mut grads, *x, g.map(|v| v * c)),
                Op::ScaleRows(x, s) => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let m = xv.cols();
                    if self.needs(*s) {
                        let ds: Vec<f64> = (0..xv.rows())
                            .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum())
                            .collect();
                        acc(&mut grads, *s, Tensor::new(sv.shape().to_vec(), ds)?);
                    }
                    if self.needs(*x) {
                        let mut dx = g;
                        for (i, v) in dx.data_mut().iter_mut().enumerate() {
                            *v *= sv.data()[i / m];
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Relu(x) => {
                    let dx = g.zip_map(&node.value, |gv, y| if y > 0.0 { gv } else { 0.0 })?;
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                    acc(&mut grads, *x, dx);
                }
                Op::Square(x) => {
                    let dx = g.zip_map(self.value(*x), |gv, v| 2.0 * gv * v)?;
                    acc(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let n = g.rows();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            let mut d = Vec::with_capacity(n * w);
                            for r in 0..n {
                                d.extend_from_slice(&g.row(r)[col..col + w]);
                            }
                            acc(&mut grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                        }
                        col += w;
                    }
                }
                Op::RowSum(x) => {
                    let xv = self.value(*x);
                    let m = xv.cols();
                    let d = Tensor::from_fn(xv.shape(), |i| g.data()[i / m]);
                    acc(&mut grads, *x, d);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gv = g.item() / xv.len().max(1) as f64;
                    acc(&mut grads, *x, Tensor::filled(xv.shape(), gv));
                }
                Op::Dropout(x, mask) => {
                    let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::FmSecondOrder(fields) => {
                    let first = self.value(fields[0]);
                    let (n, d) = (first.rows(), first.cols());
                    let mut sum = Tensor::zeros(&[n, d]);
                    for &f in fields {
                        sum.add_assign(self.value(f));
                    }
                    for &f in fields {
                        if !self.needs(f) {
                            continue;
                        }
                        let fv = self.value(f);
                        let mut df = sum.zip_map(fv, |s, v| s - v)?;
                        for (i, v) in df.data_mut().iter_mut().enumerate() {
                            *v *= g.data()[i / d];
                        }
                        acc(&mut grads, f, df);
                    }
                }
                Op::BceWithLogits(x, labels) => {
                    let xv = self.value(*x);
                    let k = g.item() / labels.len().max(1) as f64;
                    let data = xv
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&l, &y)| k * (sigmoid(l) - y))
                        .collect();
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// `g[n, m] x b[k, m]^T -> [n, k]`.
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (g.rows(), g.cols());
    let k = b.rows();
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let gr = g.row(i);
        for p in 0..k {
            out[i * k + p] = gr.iter().zip(b.row(p)).map(|(x, y)| x * y).sum();
        }
    }
    debug_assert_eq!(b.cols(), m);
    Tensor::new(vec![n, k], out).expect("matmul_nt shape")
}

/// `a[n, k]^T x g[n, m] -> [k, m]`.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let m = g.cols();
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let gr = g.row(i);
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * m..(p + 1) * m];
            for (ov, gv) in o.iter_mut().zip(gr) {
                *ov += av * gv;
            }
        }
    }
    Tensor::new(vec![k, m], out).expect("matmul_tn shape")
}
