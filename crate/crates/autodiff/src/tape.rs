use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::{AutodiffError, Result, Tensor};

// Stamps are unique across every tape in the process, so a handle can never
// alias a node of another tape or a node recreated after a reset.
static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    stamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `max(0, v)`; the subgradient at 0 is 0.
    Relu,
    /// `v` for `v >= 0`, `exp(v) - 1` otherwise.
    Elu,
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
    /// `ln(1 + exp(v))`.
    Softplus,
    /// `ELU(v) + 1`, evaluated as `exp(v)` for negative `v` so the result
    /// stays positive until `exp` underflows.
    EluPlusOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Scale { a: usize, factor: f64 },
    AddScalar { a: usize },
    Activation { a: usize, kind: Activation },
    Ln { a: usize },
    Softmax { a: usize },
    Reduce { a: usize, kind: Reduction, axis: usize },
    SumAll { a: usize },
    Bilinear { fmap: usize, pos: usize },
    SliceLast { a: usize, start: usize },
    ConcatLast { parts: Vec<usize> },
    Reshape { a: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, eps: f64 },
}

#[derive(Debug)]
struct Node {
    stamp: u64,
    value: Tensor,
    // Empty until the node is a leaf or takes part in a backward pass.
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Dynamic record of a forward computation.
///
/// Nodes are appended in execution order, which is a topological order of
/// the computation graph; backward walks it once in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
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

    /// Number of resets performed on this tape.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Drops every node; all outstanding handles become stale.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = vec![0.0; value.numel()];
        self.push_node(value, grad, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    /// Accumulated gradient of `v`; zeros when nothing flowed into it.
    pub fn grad(&self, v: Var) -> Result<Cow<'_, [f64]>> {
        let node = self.node(v)?;
        if node.grad.len() == node.value.numel() {
            Ok(Cow::Borrowed(&node.grad))
        } else {
            Ok(Cow::Owned(vec![0.0; node.value.numel()]))
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        match self.nodes.get(v.index) {
            Some(node) if node.stamp == v.stamp => Ok(node),
            _ => Err(AutodiffError::StaleHandle),
        }
    }

    fn push_node(&mut self, value: Tensor, grad: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let stamp = next_stamp();
        self.nodes.push(Node {
            stamp,
            value,
            grad,
            requires_grad,
            op,
        });
        Var {
            index: self.nodes.len() - 1,
            stamp,
        }
    }

    fn push(&mut self, value: Tensor, inputs: &[usize], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(value, Vec::new(), requires_grad, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.value.shape() != nb.value.shape() {
            return Err(AutodiffError::Shape {
                op,
                lhs: na.value.shape().to_vec(),
                rhs: nb.value.shape().to_vec(),
            });
        }
        Ok((a.index, b.index))
    }

    // ---- forward ops -------------------------------------------------------

    /// `[p×q] · [q×r] -> [p×r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; p * r];
        gemm(
            (p, q, r),
            self.nodes[a.index].value.data(),
            false,
            self.nodes[b.index].value.data(),
            false,
            &mut out,
            0.0,
        );
        let value = Tensor::new(&[p, r], out)?;
        Ok(self.push(value, &[a.index, b.index], Op::MatMul { a: a.index, b: b.index }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a)?.to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::Shape {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.nodes[a.index].value.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new(&[cols, rows], out)?;
        Ok(self.push(value, &[a.index], Op::Transpose { a: a.index }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("add", a, b)?;
        let value = self.zip(ia, ib, |x, y| x + y);
        Ok(self.push(value, &[ia, ib], Op::Add { a: ia, b: ib }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("sub", a, b)?;
        let value = self.zip(ia, ib, |x, y| x - y);
        Ok(self.push(value, &[ia, ib], Op::Sub { a: ia, b: ib }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("mul", a, b)?;
        let value = self.zip(ia, ib, |x, y| x * y);
        Ok(self.push(value, &[ia, ib], Op::Mul { a: ia, b: ib }))
    }

    fn zip(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    /// Adds a vector of length `q` to every row of a `[.., q]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a)?, self.shape(row)?);
        let q = sr.iter().product::<usize>();
        if sa.last() != Some(&q) || sr.len() > 1 && sr[..sr.len() - 1].iter().any(|&e| e != 1) {
            return Err(AutodiffError::Shape {
                op: "add_row",
                lhs: sa.to_vec(),
                rhs: sr.to_vec(),
            });
        }
        let r = self.nodes[row.index].value.data();
        let mut out = self.nodes[a.index].value.clone();
        for chunk in out.data_mut().chunks_mut(q) {
            for (o, &v) in chunk.iter_mut().zip(r) {
                *o += v;
            }
        }
        Ok(self.push(out, &[a.index, row.index], Op::AddRow { a: a.index, row: row.index }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.map(a, |x| x * factor)?;
        Ok(self.push(value, &[a.index], Op::Scale { a: a.index, factor }))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, |x| x + c)?;
        Ok(self.push(value, &[a.index], Op::AddScalar { a: a.index }))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let v = &self.node(a)?.value;
        Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect())
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let value = self.map(a, |x| activate(kind, x))?;
        Ok(self.push(value, &[a.index], Op::Activation { a: a.index, kind }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Elu)
    }

    /// Natural logarithm.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::ln)?;
        Ok(self.push(value, &[a.index], Op::Ln { a: a.index }))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let v = &self.node(a)?.value;
        let n = *v.shape().last().unwrap_or(&1);
        if n == 0 {
            return Err(AutodiffError::Shape {
                op: "softmax_lastdim",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        Ok(self.push(out, &[a.index], Op::Softmax { a: a.index }))
    }

    /// Sum or mean along `axis`; the axis is removed from the shape.
    pub fn reduce(&mut self, a: Var, kind: Reduction, axis: usize) -> Result<Var> {
        let shape = self.shape(a)?.to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::Axis {
                op: "reduce",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.nodes[a.index].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if kind == Reduction::Mean {
            for x in &mut out {
                *x /= n as f64;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, &[a.index], Op::Reduce { a: a.index, kind, axis }))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total = self.node(a)?.value.data().iter().sum();
        Ok(self.push(Tensor::scalar(total), &[a.index], Op::SumAll { a: a.index }))
    }

    /// Bilinear lookup of a `[H×W×d]` map at normalized positions.
    ///
    /// `pos` is `[2]` or `[n×2]` holding `(x, y)` pairs in `[-1, 1]`, with `x`
    /// running along the width and `-1`/`+1` landing on the centers of the
    /// first/last cells. Positions are clamped into range; a clamped
    /// coordinate receives no gradient.
    pub fn bilinear_sample(&mut self, fmap: Var, pos: Var) -> Result<Var> {
        let fshape = self.shape(fmap)?.to_vec();
        let pshape = self.shape(pos)?.to_vec();
        let valid_pos = matches!(pshape.as_slice(), [2] | [_, 2]);
        if fshape.len() != 3 || fshape[0] == 0 || fshape[1] == 0 || !valid_pos {
            return Err(AutodiffError::Shape {
                op: "bilinear_sample",
                lhs: fshape,
                rhs: pshape,
            });
        }
        let d = fshape[2];
        let points = self.nodes[pos.index].value.numel() / 2;
        let f = self.nodes[fmap.index].value.data();
        let p = self.nodes[pos.index].value.data();
        let mut out = vec![0.0; points * d];
        for (k, chunk) in out.chunks_mut(d).enumerate() {
            let s = Stencil::new(p[2 * k], p[2 * k + 1], fshape[0], fshape[1]);
            for (c, o) in chunk.iter_mut().enumerate() {
                *o = s.interpolate(|i, j| f[(i * fshape[1] + j) * d + c]);
            }
        }
        let out_shape = if pshape.len() == 1 { vec![d] } else { vec![points, d] };
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            &[fmap.index, pos.index],
            Op::Bilinear {
                fmap: fmap.index,
                pos: pos.index,
            },
        ))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a)?.to_vec();
        let n = *shape.last().unwrap_or(&0);
        if start + len > n {
            return Err(AutodiffError::Shape {
                op: "slice_last",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let src = self.nodes[a.index].value.data();
        let mut out = Vec::with_capacity(src.len() / n.max(1) * len);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, &[a.index], Op::SliceLast { a: a.index, start }))
    }

    /// Concatenates tensors along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::Contract("concat_last of zero tensors".into()))?;
        let lead = self.shape(*first)?;
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p)?;
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(AutodiffError::Shape {
                    op: "concat_last",
                    lhs: self.shape(*first)?.to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.index].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.index).collect();
        Ok(self.push(value, &idx, Op::ConcatLast { parts: idx.clone() }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(a)?.value.clone().reshape(shape)?;
        Ok(self.push(value, &[a.index], Op::Reshape { a: a.index }))
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a)?.to_vec();
        let n = *shape.last().unwrap_or(&0);
        if self.shape(gamma)? != [n] || self.shape(beta)? != [n] || n == 0 {
            return Err(AutodiffError::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma)?.to_vec(),
            });
        }
        let g = self.nodes[gamma.index].value.data();
        let b = self.nodes[beta.index].value.data();
        let mut out = self.nodes[a.index].value.clone();
        for row in out.data_mut().chunks_mut(n) {
            let (mean, rstd) = moments(row, eps);
            for (k, x) in row.iter_mut().enumerate() {
                *x = (*x - mean) * rstd * g[k] + b[k];
            }
        }
        let (ia, ig, ib) = (a.index, gamma.index, beta.index);
        Ok(self.push(out, &[ia, ig, ib], Op::LayerNorm { a: ia, gamma: ig, beta: ib, eps }))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `∂root/∂leaf` into every leaf that requires a gradient.
    ///
    /// Intermediate adjoints are recomputed on every call while leaf
    /// gradients keep accumulating until the tape is reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root)?;
        if !shape.is_empty() {
            return Err(AutodiffError::NonScalarRoot(shape.to_vec()));
        }
        for node in &mut self.nodes {
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                node.grad.clear();
                node.grad.resize(node.value.numel(), 0.0);
            }
        }
        if !self.nodes[root.index].requires_grad {
            return Ok(());
        }
        self.nodes[root.index].grad[0] += 1.0;
        for i in (0..=root.index).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[i].grad);
            if g.iter().any(|&x| x != 0.0) {
                self.propagate(i, &g);
            }
            self.nodes[i].grad = g;
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Runs `f` on the gradient buffer of node `i` if it requires one.
    fn with_grad(&mut self, i: usize, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.wants(i) {
            return;
        }
        let mut buf = std::mem::take(&mut self.nodes[i].grad);
        f(&mut buf, &self.nodes);
        self.nodes[i].grad = buf;
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let (p, q, r) = (sa[0], sa[1], sb[1]);
                // a.grad += g · bᵀ
                self.with_grad(a, |ga, nodes| {
                    gemm((p, r, q), g, false, nodes[b].value.data(), true, ga, 1.0);
                });
                // b.grad += aᵀ · g
                self.with_grad(b, |gb, nodes| {
                    gemm((q, p, r), nodes[a].value.data(), true, g, false, gb, 1.0);
                });
            }
            Op::Transpose { a } => {
                let s = self.nodes[a].value.shape().to_vec();
                let (rows, cols) = (s[0], s[1]);
                self.with_grad(a, |ga, _| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.with_grad(a, |ga, _| axpy(ga, 1.0, g));
                self.with_grad(b, |gb, _| axpy(gb, 1.0, g));
            }
            Op::Sub { a, b } => {
                self.with_grad(a, |ga, _| axpy(ga, 1.0, g));
                self.with_grad(b, |gb, _| axpy(gb, -1.0, g));
            }
            Op::Mul { a, b } => {
                self.with_grad(a, |ga, nodes| {
                    for ((x, &gi), &bv) in ga.iter_mut().zip(g).zip(nodes[b].value.data()) {
                        *x += gi * bv;
                    }
                });
                self.with_grad(b, |gb, nodes| {
                    for ((x, &gi), &av) in gb.iter_mut().zip(g).zip(nodes[a].value.data()) {
                        *x += gi * av;
                    }
                });
            }
            Op::AddRow { a, row } => {
                self.with_grad(a, |ga, _| axpy(ga, 1.0, g));
                self.with_grad(row, |gr, _| {
                    let q = gr.len();
                    for chunk in g.chunks(q) {
                        axpy(gr, 1.0, chunk);
                    }
                });
            }
            Op::Scale { a, factor } => self.with_grad(a, |ga, _| axpy(ga, factor, g)),
            Op::AddScalar { a } | Op::Reshape { a } => self.with_grad(a, |ga, _| axpy(ga, 1.0, g)),
            Op::Activation { a, kind } => {
                self.with_grad(a, |ga, nodes| {
                    let x = nodes[a].value.data();
                    for k in 0..ga.len() {
                        ga[k] += g[k] * activate_grad(kind, x[k]);
                    }
                });
            }
            Op::Ln { a } => {
                self.with_grad(a, |ga, nodes| {
                    for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(nodes[a].value.data()) {
                        *x += gi / v;
                    }
                });
            }
            Op::Softmax { a } => {
                let y = self.nodes[i].value.data().to_vec();
                let n = *self.nodes[i].value.shape().last().unwrap();
                self.with_grad(a, |ga, _| {
                    for ((gr, yr), gar) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for k in 0..n {
                            gar[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::Reduce { a, kind, axis } => {
                let shape = self.nodes[a].value.shape().to_vec();
                let (outer, n, inner) = split_axis(&shape, axis);
                let factor = match kind {
                    Reduction::Sum => 1.0,
                    Reduction::Mean => 1.0 / n as f64,
                };
                self.with_grad(a, |ga, _| {
                    for o in 0..outer {
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            for t in 0..inner {
                                ga[base + t] += factor * g[o * inner + t];
                            }
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                self.with_grad(a, |ga, _| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Bilinear { fmap, pos } => self.bilinear_backward(fmap, pos, g),
            Op::SliceLast { a, start } => {
                let n = *self.nodes[a].value.shape().last().unwrap();
                let len = *self.nodes[i].value.shape().last().unwrap();
                self.with_grad(a, |ga, _| {
                    for (gar, gr) in ga.chunks_mut(n).zip(g.chunks(len)) {
                        axpy(&mut gar[start..start + len], 1.0, gr);
                    }
                });
            }
            Op::ConcatLast { parts } => {
                let total = *self.nodes[i].value.shape().last().unwrap();
                let mut offset = 0;
                for p in parts {
                    let w = *self.nodes[p].value.shape().last().unwrap();
                    self.with_grad(p, |gp, _| {
                        for (gpr, gr) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            axpy(gpr, 1.0, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::LayerNorm { a, gamma, beta, eps } => self.layer_norm_backward(a, gamma, beta, eps, g),
        }
    }

    fn bilinear_backward(&mut self, fmap: usize, pos: usize, g: &[f64]) {
        let fshape = self.nodes[fmap].value.shape().to_vec();
        let (h, w, d) = (fshape[0], fshape[1], fshape[2]);
        let p = self.nodes[pos].value.data().to_vec();
        let points = p.len() / 2;
        self.with_grad(fmap, |gf, _| {
            for k in 0..points {
                let s = Stencil::new(p[2 * k], p[2 * k + 1], h, w);
                for c in 0..d {
                    s.scatter(g[k * d + c], |i, j, v| gf[(i * w + j) * d + c] += v);
                }
            }
        });
        self.with_grad(pos, |gp, nodes| {
            let f = nodes[fmap].value.data();
            for k in 0..points {
                let s = Stencil::new(p[2 * k], p[2 * k + 1], h, w);
                let (mut dx, mut dy) = (0.0, 0.0);
                for c in 0..d {
                    let (ddx, ddy) = s.slopes(|i, j| f[(i * w + j) * d + c]);
                    dx += g[k * d + c] * ddx;
                    dy += g[k * d + c] * ddy;
                }
                gp[2 * k] += dx;
                gp[2 * k + 1] += dy;
            }
        });
    }

    fn layer_norm_backward(&mut self, a: usize, gamma: usize, beta: usize, eps: f64, g: &[f64]) {
        let x = self.nodes[a].value.data().to_vec();
        let gam = self.nodes[gamma].value.data().to_vec();
        let n = gam.len();
        let mut xhat = x.clone();
        let mut rstds = Vec::with_capacity(x.len() / n);
        for row in xhat.chunks_mut(n) {
            let (mean, rstd) = moments(row, eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
            rstds.push(rstd);
        }
        self.with_grad(beta, |gb, _| {
            for gr in g.chunks(n) {
                axpy(gb, 1.0, gr);
            }
        });
        self.with_grad(gamma, |gg, _| {
            for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                for k in 0..n {
                    gg[k] += gr[k] * xr[k];
                }
            }
        });
        self.with_grad(a, |ga, _| {
            for (r, ((gr, xr), gar)) in g.chunks(n).zip(xhat.chunks(n)).zip(ga.chunks_mut(n)).enumerate() {
                let gh: Vec<f64> = gr.iter().zip(&gam).map(|(p, q)| p * q).collect();
                let mean_gh = gh.iter().sum::<f64>() / n as f64;
                let mean_ghx = gh.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                for k in 0..n {
                    gar[k] += rstds[r] * (gh[k] - mean_gh - xr[k] * mean_ghx);
                }
            }
        });
    }
}

fn activate(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Elu => {
            if x >= 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        Activation::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        Activation::Softplus => softplus(x),
        Activation::EluPlusOne => {
            if x >= 0.0 {
                x + 1.0
            } else {
                x.exp()
            }
        }
    }
}

fn activate_grad(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Elu | Activation::EluPlusOne => {
            if x >= 0.0 {
                1.0
            } else {
                x.exp()
            }
        }
        Activation::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Numerically stable `ln(1 + exp(x))`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// `c = op(a) · op(b) + beta · c` with `(m, k, n)` the logical product dims.
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    let av = if a_t {
        ArrayView2::from_shape((k, m), a).expect("lhs extent").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("lhs extent")
    };
    let bv = if b_t {
        ArrayView2::from_shape((n, k), b).expect("rhs extent").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("rhs extent")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("output extent");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

/// Corner indices and weights of one bilinear lookup.
struct Stencil {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    fy: f64,
    fx: f64,
    // d(cell coordinate)/d(normalized coordinate), zero when clamped
    sy: f64,
    sx: f64,
}

impl Stencil {
    fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let (j0, j1, fx, sx) = axis_cell(x, w);
        let (i0, i1, fy, sy) = axis_cell(y, h);
        Self {
            i0,
            i1,
            j0,
            j1,
            fy,
            fx,
            sy,
            sx,
        }
    }

    fn interpolate(&self, at: impl Fn(usize, usize) -> f64) -> f64 {
        let top = lerp(at(self.i0, self.j0), at(self.i0, self.j1), self.fx);
        let bottom = lerp(at(self.i1, self.j0), at(self.i1, self.j1), self.fx);
        lerp(top, bottom, self.fy)
    }

    fn scatter(&self, g: f64, mut add: impl FnMut(usize, usize, f64)) {
        add(self.i0, self.j0, g * (1.0 - self.fy) * (1.0 - self.fx));
        add(self.i0, self.j1, g * (1.0 - self.fy) * self.fx);
        add(self.i1, self.j0, g * self.fy * (1.0 - self.fx));
        add(self.i1, self.j1, g * self.fy * self.fx);
    }

    /// Derivatives of the interpolant w.r.t. the normalized `(x, y)`.
    fn slopes(&self, at: impl Fn(usize, usize) -> f64) -> (f64, f64) {
        let (v00, v01) = (at(self.i0, self.j0), at(self.i0, self.j1));
        let (v10, v11) = (at(self.i1, self.j0), at(self.i1, self.j1));
        let dfx = (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        let dfy = (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        (dfx * self.sx, dfy * self.sy)
    }
}

// Exact at both ends and on constant inputs.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

fn axis_cell(u: f64, extent: usize) -> (usize, usize, f64, f64) {
    if extent == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let inside = (-1.0..=1.0).contains(&u);
    let half = (extent - 1) as f64 / 2.0;
    let c = (u.clamp(-1.0, 1.0) + 1.0) * half;
    let lo = (c.floor() as usize).min(extent - 2);
    let slope = if inside { half } else { 0.0 };
    (lo, lo + 1, c - lo as f64, slope)
}
