//! Reverse-mode differentiation over an append-only tape.
//!
//! Every forward op appends one node holding its output value. Node ids grow
//! monotonically, so insertion order is a topological order and `backward`
//! walks the tape once in reverse.

use super::{Group, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SmoothL1(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Batch statistics participate in the gradient only in train mode.
        train: bool,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Bitmask of parameter groups this value depends on differentiably.
    groups: u8,
}

/// Batch statistics observed by a train-mode standardization, for running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Recorded computation graph.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    frozen: u8,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    t.as_matrix_dims()
        .ok_or_else(|| Error::shape(op, format!("expected rank 1 or 2, got {:?}", t.shape())))
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            frozen: 0,
        }
    }

    /// Parameters of a frozen group enter the tape as constants.
    pub fn freeze(&mut self, group: Group) {
        self.frozen |= group.bit();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Groups that can receive gradient from `v`.
    pub fn groups(&self, v: Var) -> Vec<Group> {
        Group::from_mask(self.nodes[v.0].groups)
    }

    pub fn group_mask(&self, v: Var) -> u8 {
        self.nodes[v.0].groups
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut requires_grad = false;
        let mut groups = 0;
        for v in inputs {
            let n = &self.nodes[v.0];
            if n.requires_grad {
                requires_grad = true;
                groups |= n.groups;
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            groups,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, &[])
    }

    /// Records a copy of `v` with no gradient path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let p = store.param(id);
        let live = p.trainable && self.frozen & p.group.bit() == 0;
        if !p.value.is_finite() {
            return Err(Error::NonFinite { op: "param" });
        }
        self.nodes.push(Node {
            value: p.value.clone(),
            op: if live { Op::Param(id) } else { Op::Leaf },
            requires_grad: live,
            groups: if live { p.group.bit() } else { 0 },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `x W` for `x` of shape `[k]` or `[n, k]` and `W` of shape `[k, m]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, k) = dims2("matmul", xv)?;
        let (k2, m) = match wv.shape() {
            [a, b] => (*a, *b),
            s => {
                return Err(Error::shape(
                    "matmul",
                    format!("weight must be rank 2, got {s:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", xv.shape(), wv.shape()),
            ));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            xv.data(),
            k as isize,
            1,
            wv.data(),
            m as isize,
            1,
            T::zero(),
            &mut out,
            m as isize,
            1,
        );
        let shape = if xv.rank() == 1 { vec![m] } else { vec![n, m] };
        self.push(
            "matmul",
            Tensor::new(shape, out)?,
            Op::MatMul(x, w),
            &[x, w],
        )
    }

    /// Adds vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (_, m) = dims2("add_row", xv)?;
        if bv.len() != m || bv.rank() > 1 {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            row.iter_mut()
                .zip(bv.data())
                .for_each(|(o, &b)| *o = *o + b);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("add_row", value, Op::AddRow(x, b), &[x, b])
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::c(c);
        let value = self.value(a).map(|x| x * c);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "relu",
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| T::one() / (T::one() + (-x).exp()),
            Op::Sigmoid(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// Elementwise smooth L1: `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.unary("smooth_l1", a, smooth_l1, Op::SmoothL1(a))
    }

    pub fn activate(&mut self, kind: Activation, a: Var) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Tanh => self.tanh(a),
            Activation::Softmax => self.softmax(a),
        }
    }

    fn row_softmax(x: &Tensor<T>, log: bool) -> Vec<T> {
        let m = x.last_dim();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(m) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            out.extend(
                row.iter()
                    .map(|&v| if log { v - lse } else { (v - lse).exp() }),
            );
        }
        out
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        let value = Tensor::new(xv.shape().to_vec(), Self::row_softmax(xv, false))?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        let value = Tensor::new(xv.shape().to_vec(), Self::row_softmax(xv, true))?;
        self.push("log_softmax", value, Op::LogSoftmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = v.data().iter().copied().sum::<T>() / T::c(v.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Column-wise mean of an `[n, m]` matrix, giving `[m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (n, m) = dims2("mean_rows", v)?;
        if n == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![T::zero(); m];
        for row in v.data().chunks(m) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o = *o + x);
        }
        let inv = T::one() / T::c(n as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        self.push("mean_rows", Tensor::vector(out), Op::MeanRows(a), &[a])
    }

    /// Horizontal concatenation; all inputs must have the same number of rows.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        let mut any_matrix = false;
        for &p in parts {
            let v = self.value(p);
            let (r, c) = dims2("concat_cols", v)?;
            any_matrix |= v.rank() == 2;
            if *rows.get_or_insert(r) != r {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if any_matrix {
            vec![rows, total]
        } else {
            vec![total]
        };
        self.push(
            "concat_cols",
            Tensor::new(shape, out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let (n, m) = dims2("slice_cols", v)?;
        if start >= end || end > m {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {m}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for row in v.data().chunks(m) {
            out.extend_from_slice(&row[start..end]);
        }
        let shape = if v.rank() == 1 { vec![w] } else { vec![n, w] };
        self.push(
            "slice_cols",
            Tensor::new(shape, out)?,
            Op::SliceCols(a, start, end),
            &[a],
        )
    }

    /// Selects rows of an `[n, m]` matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (n, m) = match v.shape() {
            [n, m] => (*n, *m),
            s => {
                return Err(Error::shape(
                    "gather_rows",
                    format!("expected rank 2, got {s:?}"),
                ))
            }
        };
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            if r >= n {
                return Err(Error::shape("gather_rows", format!("row {r} of {n}")));
            }
            out.extend_from_slice(&v.data()[r * m..(r + 1) * m]);
        }
        let value = Tensor::new(vec![rows.len(), m], out)?;
        self.push("gather_rows", value, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Selects elements by flat index, giving a vector.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            match v.data().get(i) {
                Some(&x) => out.push(x),
                None => return Err(Error::shape("pick", format!("index {i} of {}", v.len()))),
            }
        }
        self.push("pick", Tensor::vector(out), Op::Pick(a, idx.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Per-column standardization of `[B, k]` by batch statistics, then `gamma * . + beta`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        let (b, k) = match xv.shape() {
            [b, k] => (*b, *k),
            s => {
                return Err(Error::shape(
                    "batch_norm",
                    format!("expected [B, k], got {s:?}"),
                ))
            }
        };
        if b < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch standardization needs B >= 2, got {b}"
            )));
        }
        let mut mean = vec![T::zero(); k];
        for row in xv.data().chunks(k) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m = *m + v);
        }
        let inv_b = T::one() / T::c(b as f64);
        mean.iter_mut().for_each(|m| *m = *m * inv_b);
        let mut var = vec![T::zero(); k];
        for row in xv.data().chunks(k) {
            for j in 0..k {
                let d = row[j] - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v * inv_b);
        let stats = BatchStats { mean, var };
        let y = self.standardize(x, gamma, beta, &stats.mean, &stats.var, eps, true)?;
        Ok((y, stats))
    }

    /// Standardization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        self.standardize(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn standardize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (_, k) = dims2("batch_norm", xv)?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != k || bv.len() != k || mean.len() != k || var.len() != k {
            return Err(Error::shape(
                "batch_norm",
                format!("{k} features vs gamma/beta/stats"),
            ));
        }
        let eps = T::c(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(k) {
            for j in 0..k {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        self.push("batch_norm", value, op, &[x, gamma, beta])
    }

    /// Reverse sweep from a scalar `loss`; returns one gradient per parameter in `store`
    /// (zeros for parameters the loss does not reach).
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Grads<T>> {
        let node_grads = self.backward_nodes(loss)?;
        let mut grads: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        for (node, g) in self.nodes.iter().zip(node_grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let slot = grads[id.0].data_mut();
                slot.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b);
            }
        }
        Ok(Grads { grads })
    }

    /// Gradient of `loss` with respect to an arbitrary recorded value.
    pub fn grad_wrt(&self, loss: Var, wrt: Var) -> Result<Tensor<T>> {
        let mut node_grads = self.backward_nodes(loss)?;
        let shape = self.value(wrt).shape().to_vec();
        match node_grads[wrt.0].take() {
            Some(g) => Tensor::new(shape, g),
            None => Ok(Tensor::zeros(&shape)),
        }
    }

    fn backward_nodes(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, g, &mut grads);
        }
        Ok(grads)
    }

    fn live(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k) = xv.as_matrix_dims().expect("checked in forward");
                let m = wv.shape()[1];
                if self.live(*x) {
                    let slot = &mut grads[x.0];
                    let beta = if slot.is_some() { T::one() } else { T::zero() };
                    let buf = slot.get_or_insert_with(|| vec![T::zero(); n * k]);
                    // dx = g W^T
                    T::gemm(
                        n,
                        m,
                        k,
                        &g,
                        m as isize,
                        1,
                        wv.data(),
                        1,
                        m as isize,
                        beta,
                        buf,
                        k as isize,
                        1,
                    );
                }
                if self.live(*w) {
                    let slot = &mut grads[w.0];
                    let beta = if slot.is_some() { T::one() } else { T::zero() };
                    let buf = slot.get_or_insert_with(|| vec![T::zero(); k * m]);
                    // dW = x^T g
                    T::gemm(
                        k,
                        n,
                        m,
                        xv.data(),
                        1,
                        k as isize,
                        &g,
                        m as isize,
                        1,
                        beta,
                        buf,
                        m as isize,
                        1,
                    );
                }
            }
            Op::AddRow(x, b) => {
                if self.live(*b) {
                    let m = self.value(*b).len();
                    let mut gb = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    accumulate(&mut grads[b.0], gb);
                }
                if self.live(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Add(a, b) => {
                if self.live(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.live(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.live(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
                if self.live(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.live(*a) {
                    accumulate(
                        &mut grads[a.0],
                        g.iter().zip(bv).map(|(&d, &v)| d * v).collect(),
                    );
                }
                if self.live(*b) {
                    accumulate(
                        &mut grads[b.0],
                        g.iter().zip(av).map(|(&d, &v)| d * v).collect(),
                    );
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.iter().map(|&d| d * *c).collect());
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(&mut grads[a.0], gx);
            }
            Op::Sigmoid(a) => {
                let gx = g
                    .iter()
                    .zip(y)
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                accumulate(&mut grads[a.0], gx);
            }
            Op::Tanh(a) => {
                let gx = g
                    .iter()
                    .zip(y)
                    .map(|(&d, &t)| d * (T::one() - t * t))
                    .collect();
                accumulate(&mut grads[a.0], gx);
            }
            Op::Exp(a) => {
                let gx = g.iter().zip(y).map(|(&d, &e)| d * e).collect();
                accumulate(&mut grads[a.0], gx);
            }
            Op::Log(a) => {
                let xv = self.value(*a).data();
                let gx = g.iter().zip(xv).map(|(&d, &x)| d / x).collect();
                accumulate(&mut grads[a.0], gx);
            }
            Op::Square(a) => {
                let xv = self.value(*a).data();
                let two = T::c(2.0);
                let gx = g.iter().zip(xv).map(|(&d, &x)| d * two * x).collect();
                accumulate(&mut grads[a.0], gx);
            }
            Op::SmoothL1(a) => {
                let xv = self.value(*a).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&d, &x)| d * smooth_l1_grad(x))
                    .collect();
                accumulate(&mut grads[a.0], gx);
            }
            Op::Softmax(a) => {
                let m = node.value.last_dim();
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(m).zip(y.chunks(m)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&d, &s)| d * s).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&d, &s)| s * (d - dot)));
                }
                accumulate(&mut grads[a.0], gx);
            }
            Op::LogSoftmax(a) => {
                let m = node.value.last_dim();
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(m).zip(y.chunks(m)) {
                    let total: T = grow.iter().copied().sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&d, &ls)| d - ls.exp() * total));
                }
                accumulate(&mut grads[a.0], gx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![g[0] / T::c(n as f64); n]);
            }
            Op::MeanRows(a) => {
                let (n, _) = self.value(*a).as_matrix_dims().expect("checked in forward");
                let inv = T::one() / T::c(n as f64);
                let row: Vec<T> = g.iter().map(|&d| d * inv).collect();
                let mut gx = Vec::with_capacity(n * row.len());
                for _ in 0..n {
                    gx.extend_from_slice(&row);
                }
                accumulate(&mut grads[a.0], gx);
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| {
                        self.value(*p)
                            .as_matrix_dims()
                            .expect("checked in forward")
                            .1
                    })
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if self.live(*p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], gp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (n, m) = self.value(*a).as_matrix_dims().expect("checked in forward");
                let w = end - start;
                let mut gx = vec![T::zero(); n * m];
                for r in 0..n {
                    gx[r * m + start..r * m + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                accumulate(&mut grads[a.0], gx);
            }
            Op::GatherRows(a, rows) => {
                let av = self.value(*a);
                let m = av.shape()[1];
                let mut gx = vec![T::zero(); av.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..m {
                        gx[r * m + j] = gx[r * m + j] + g[i * m + j];
                    }
                }
                accumulate(&mut grads[a.0], gx);
            }
            Op::Pick(a, idx) => {
                let mut gx = vec![T::zero(); self.value(*a).len()];
                for (&i, &d) in idx.iter().zip(&g) {
                    gx[i] = gx[i] + d;
                }
                accumulate(&mut grads[a.0], gx);
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let k = inv_std.len();
                let b = g.len() / k;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); k];
                let mut dbeta = vec![T::zero(); k];
                for (grow, hrow) in g.chunks(k).zip(xhat.chunks(k)) {
                    for j in 0..k {
                        dgamma[j] = dgamma[j] + grow[j] * hrow[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                }
                if self.live(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    if *train {
                        // dx = inv_std / B * (B*dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                        let bt = T::c(b as f64);
                        for j in 0..k {
                            let sum_d = dbeta[j] * gv[j];
                            let sum_dh = dgamma[j] * gv[j];
                            for r in 0..b {
                                let dh = g[r * k + j] * gv[j];
                                gx[r * k + j] =
                                    inv_std[j] / bt * (bt * dh - sum_d - xhat[r * k + j] * sum_dh);
                            }
                        }
                    } else {
                        for r in 0..b {
                            for j in 0..k {
                                gx[r * k + j] = g[r * k + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if self.live(*gamma) {
                    accumulate(&mut grads[gamma.0], dgamma);
                }
                if self.live(*beta) {
                    accumulate(&mut grads[beta.0], dbeta);
                }
            }
        }
    }
}

pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::c(0.5) * x * x
    } else {
        a - T::c(0.5)
    }
}

fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else if x > T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Per-parameter gradients from one backward sweep, indexed like the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Largest absolute gradient entry over the parameters of `group`.
    pub fn max_abs(&self, store: &ParamStore<T>, group: Group) -> f64 {
        store
            .ids_in(group)
            .into_iter()
            .flat_map(|id| self.grads[id.0].data().iter().map(|x| x.f64().abs()))
            .fold(0.0, f64::max)
    }

    pub fn group_norm(&self, store: &ParamStore<T>, group: Group) -> f64 {
        store
            .ids_in(group)
            .into_iter()
            .map(|id| self.grads[id.0].sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales a group's gradients so their joint L2 norm is at most `max_norm`.
    pub fn clip_group(&mut self, store: &ParamStore<T>, group: Group, max_norm: f64) -> f64 {
        let norm = self.group_norm(store, group);
        if norm > max_norm && norm.is_finite() {
            let s = T::c(max_norm / norm);
            for id in store.ids_in(group) {
                self.grads[id.0]
                    .data_mut()
                    .iter_mut()
                    .for_each(|g| *g = *g * s);
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}
