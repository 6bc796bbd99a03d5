//! Append-only gradient tape.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the vector-Jacobian product. `backward` walks the nodes in reverse
//! append order exactly once.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::numerics::kernels;
use crate::numerics::tensor::{cst, numel, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MatMulDims {
    pub batch: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub a_bcast: bool,
    pub b_bcast: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub joints: usize,
    pub groups: usize,
    pub kernel: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var, MatMulDims),
    Gather(Var, Arc<Vec<usize>>),
    Reshape(Var),
    Concat(Vec<Var>, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    Norm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, per_row: bool },
    Conv1d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    SumAxis { x: Var, outer: usize, axis: usize, inner: usize },
    SumAll(Var),
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Reverse-mode tape. One graph per forward/backward pass.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    named: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` was not reached.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradients of every named parameter.
    pub fn named(&self) -> BTreeMap<String, Tensor<T>> {
        self.named.iter().map(|(n, v)| (n.clone(), self.get(*v))).collect()
    }

    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        let named = std::mem::take(&mut self.named);
        named
            .into_iter()
            .map(|(n, v)| {
                let g = self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]));
                (n, g)
            })
            .collect()
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(dim_err(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; gradient is tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Named trainable leaf, reported by [`Gradients::named`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.leaf(value, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn check_suffix(&self, x: Var, b: Var, what: &str) -> Result<usize> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(dim_err(format!("{what}: {bs:?} is not a trailing shape of {xs:?}")));
        }
        Ok(numel(bs))
    }

    /// `x + b` with `b` broadcast over the leading axes of `x`.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let nb = self.check_suffix(x, b, "add_bcast")?;
        let bv = self.value(b).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bv[i % nb]).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, Op::AddSuffix(x, b), &[x, b]))
    }

    /// `x * b` with `b` broadcast over the leading axes of `x`.
    pub fn mul_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let nb = self.check_suffix(x, b, "mul_bcast")?;
        let bv = self.value(b).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * bv[i % nb]).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, Op::MulSuffix(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Batched matrix product over the two trailing axes. Leading axes must
    /// match, or one operand may be a plain matrix that is broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(dim_err(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (la, lb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (lead, a_bcast, b_bcast) = if la == lb {
            (la.to_vec(), false, false)
        } else if lb.is_empty() {
            (la.to_vec(), false, true)
        } else if la.is_empty() {
            (lb.to_vec(), true, false)
        } else {
            return Err(dim_err(format!("matmul: leading dims of {sa:?} and {sb:?} do not broadcast")));
        };
        let dims = MatMulDims {
            batch: numel(&lead),
            p: sa[sa.len() - 2],
            q: sa[sa.len() - 1],
            r: sb[sb.len() - 1],
            a_bcast,
            b_bcast,
        };
        let mut shape = lead;
        shape.extend([dims.p, dims.r]);
        let data = kernels::matmul_fwd(self.value(a).data(), self.value(b).data(), &dims);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::MatMul(a, b, dims), &[a, b]))
    }

    /// `out.flat[i] = x.flat[index[i]]`, shaped `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(dim_err(format!("gather: {} indices for shape {shape:?}", index.len())));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(dim_err(format!("gather: index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Gather(x, index), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let index = crate::numerics::tensor::permute_index(&xs, perm)?;
        let shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        self.gather(x, Arc::new(index), &shape)
    }

    /// Channels `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| dim_err("slice_last on a scalar"))?;
        if start + len > c {
            return Err(dim_err(format!("slice_last: [{start}, {}) exceeds {c}", start + len)));
        }
        let rows = numel(&xs) / c;
        let index: Vec<usize> = (0..rows).flat_map(|r| (start..start + len).map(move |j| r * c + j)).collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        self.gather(x, Arc::new(index), &shape)
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| dim_err("concat of nothing"))?).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(dim_err(format!("concat: {s:?} incompatible with {first:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), widths), parts))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| dim_err("log_softmax on a scalar"))?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.norm(x, gamma, beta, eps, true)
    }

    /// Batch normalization with batch statistics: every channel of the last
    /// axis is normalized over all leading positions.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.norm(x, gamma, beta, eps, false)
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, per_row: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| dim_err("norm on a scalar"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err(format!(
                "norm: gamma {:?} / beta {:?} do not match channel count {c}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (xhat, rstd) = if per_row {
            kernels::normalize_rows(self.value(x).data(), c, cst(eps))
        } else {
            kernels::normalize_cols(self.value(x).data(), c, cst(eps))
        };
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat.iter().enumerate().map(|(i, &h)| h * gv[i % c] + bv[i % c]).collect();
        let out = Tensor::from_vec(&xs, data)?;
        Ok(self.push(out, Op::Norm { x, gamma, beta, xhat, rstd, per_row }, &[x, gamma, beta]))
    }

    /// Grouped convolution along axis 1 of `x: [B, T, V, C_in]`, applied
    /// independently per joint. `w: [groups, k, C_in/groups, C_out/groups]`.
    pub fn conv1d_grouped(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err(format!("conv1d: expected x [B,T,V,C] and w [G,k,ci,co], got {xs:?} and {ws:?}")));
        }
        let (groups, kernel, cin_g, cout_g) = (ws[0], ws[1], ws[2], ws[3]);
        if groups * cin_g != xs[3] {
            return Err(dim_err(format!("conv1d: {groups} groups of {cin_g} channels vs input {:?}", xs)));
        }
        if stride == 0 {
            return Err(dim_err("conv1d: stride must be positive"));
        }
        if kernel > xs[1] + 2 * pad {
            return Err(dim_err(format!(
                "conv1d: kernel {kernel} longer than padded length {}",
                xs[1] + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [groups * cout_g] {
                return Err(dim_err(format!("conv1d: bias {:?} vs {} outputs", self.shape(b), groups * cout_g)));
            }
        }
        let dims = ConvDims {
            batch: xs[0],
            t_in: xs[1],
            t_out: (xs[1] + 2 * pad - kernel) / stride + 1,
            joints: xs[2],
            groups,
            kernel,
            cin_g,
            cout_g,
            stride,
            pad,
        };
        let data = kernels::conv1d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
        );
        let out = Tensor::from_vec(&[dims.batch, dims.t_out, dims.joints, groups * cout_g], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv1d { x, w, b: bias, dims }, &inputs))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(dim_err(format!("sum_axis: axis {axis} out of range for {xs:?}")));
        }
        let outer = numel(&xs[..axis]);
        let inner = numel(&xs[axis + 1..]);
        let n = xs[axis];
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = xs.clone();
        shape.remove(axis);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::SumAxis { x, outer, axis: n, inner }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| dim_err(format!("mean_axis: axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, cst(1.0 / n as f64)))
    }

    /// Sum of all elements as a 0-dim tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, cst(1.0 / n as f64))
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bcast(y, b),
            None => Ok(y),
        }
    }

    /// Accumulate gradients of the 0-dim `loss` into every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(dim_err(format!("backward: loss must be a scalar, got {:?}", self.shape(loss))));
        }
        self.done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.shape(loss), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, gi) in self.vjp(i, &g) {
                if self.nodes[input.0].needs_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            named: self.params.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Vector-Jacobian products of node `i` given its output gradient.
    fn vjp(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<T>| Tensor::from_vec(val(v).shape(), data).expect("vjp shape");
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, zip_map(g, val(*b), |x, y| x * y)));
                }
                if self.wants(*b) {
                    out.push((*b, zip_map(g, val(*a), |x, y| x * y)));
                }
            }
            Op::AddSuffix(x, b) => {
                out.push((*x, g.clone()));
                if self.wants(*b) {
                    let nb = val(*b).numel();
                    let mut gb = vec![T::zero(); nb];
                    for (k, &gv) in g.data().iter().enumerate() {
                        gb[k % nb] += gv;
                    }
                    out.push((*b, like(*b, gb)));
                }
            }
            Op::MulSuffix(x, b) => {
                let bv = val(*b).data();
                let nb = bv.len();
                if self.wants(*x) {
                    let gx = g.data().iter().enumerate().map(|(k, &gv)| gv * bv[k % nb]).collect();
                    out.push((*x, like(*x, gx)));
                }
                if self.wants(*b) {
                    let xv = val(*x).data();
                    let mut gb = vec![T::zero(); nb];
                    for (k, &gv) in g.data().iter().enumerate() {
                        gb[k % nb] += gv * xv[k];
                    }
                    out.push((*b, like(*b, gb)));
                }
            }
            Op::Scale(x, s) => out.push((*x, g.map(|v| v * *s))),
            Op::MatMul(a, b, dims) => {
                if self.wants(*a) {
                    out.push((*a, like(*a, kernels::matmul_grad_a(g.data(), val(*b).data(), dims))));
                }
                if self.wants(*b) {
                    out.push((*b, like(*b, kernels::matmul_grad_b(val(*a).data(), g.data(), dims))));
                }
            }
            Op::Gather(x, index) => {
                let mut gx = vec![T::zero(); val(*x).numel()];
                for (&src, &gv) in index.iter().zip(g.data()) {
                    gx[src] += gv;
                }
                out.push((*x, like(*x, gx)));
            }
            Op::Reshape(x) => out.push((*x, like(*x, g.data().to_vec()))),
            Op::Concat(parts, widths) => {
                let total: usize = widths.iter().sum();
                let rows = g.numel() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, like(p, gp)));
                    }
                    offset += w;
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let mut gx = vec![T::zero(); y.numel()];
                for ((yr, gr), or) in y.data().chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..c {
                        or[k] = yr[k] * (gr[k] - dot);
                    }
                }
                out.push((*x, like(*x, gx)));
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let mut gx = vec![T::zero(); y.numel()];
                for ((yr, gr), or) in y.data().chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let gs: T = gr.iter().copied().sum();
                    for k in 0..c {
                        or[k] = gr[k] - yr[k].exp() * gs;
                    }
                }
                out.push((*x, like(*x, gx)));
            }
            Op::Gelu(x) => {
                let gx = val(*x).data().iter().zip(g.data()).map(|(&v, &gv)| gv * kernels::gelu_grad(v)).collect();
                out.push((*x, like(*x, gx)));
            }
            Op::Norm { x, gamma, beta, xhat, rstd, per_row } => {
                let c = val(*gamma).numel();
                let gam = val(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for (k, (&gv, &h)) in g.data().iter().zip(xhat).enumerate() {
                        gg[k % c] += gv * h;
                        gb[k % c] += gv;
                    }
                    out.push((*gamma, like(*gamma, gg)));
                    out.push((*beta, like(*beta, gb)));
                }
                if self.wants(*x) {
                    let gx = if *per_row {
                        kernels::norm_rows_grad(g.data(), xhat, rstd, gam)
                    } else {
                        kernels::norm_cols_grad(g.data(), xhat, rstd, gam)
                    };
                    out.push((*x, like(*x, gx)));
                }
            }
            Op::Conv1d { x, w, b, dims } => {
                let (gx, gw, gb) = kernels::conv1d_bwd(g.data(), val(*x).data(), val(*w).data(), dims);
                if self.wants(*x) {
                    out.push((*x, like(*x, gx)));
                }
                if self.wants(*w) {
                    out.push((*w, like(*w, gw)));
                }
                if let Some(b) = b {
                    out.push((*b, like(*b, gb)));
                }
            }
            Op::SumAxis { x, outer, axis, inner } => {
                let mut gx = vec![T::zero(); outer * axis * inner];
                for o in 0..*outer {
                    for a in 0..*axis {
                        let base = (o * axis + a) * inner;
                        gx[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, like(*x, gx)));
            }
            Op::SumAll(x) => {
                let gv = g.item();
                out.push((*x, Tensor::full(val(*x).shape(), gv)));
            }
        }
        out
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map shapes")
}
