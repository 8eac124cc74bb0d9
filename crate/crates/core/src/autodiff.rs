//! Reverse-mode automatic differentiation over a fixed operation set.
//!
//! A [`Tape`] records every operation of one forward evaluation. Nodes are
//! appended in evaluation order, so walking the node list backwards is a
//! reverse topological order and each node is visited exactly once.

use crate::error::{Error, Result};
use crate::tensor::{inverse_permutation, numel, Precision, Tensor};

/// Logit written into masked attention slots. Finite in both precisions, and
/// `exp(MASK_FILL - max)` underflows to exactly zero.
pub const MASK_FILL: f64 = f32::MIN as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with externally supplied (running) statistics.
    Fixed,
}

/// Deliberate backward-rule corruption, used to prove that gradient checks
/// catch a broken rule.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    ScaleReluGrad(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { src: Var, axis: usize, start: usize },
    GatherRows(Var, Vec<Option<usize>>),
    Softmax(Var),
    MaskedFill(Var, Vec<bool>),
    Relu(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a [`Tape::batch_norm`] call in batch mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate (`n - 1` denominator) for running averages.
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    fault: Option<Fault>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not take part in differentiation.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mut value = value;
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        self.precision.round_slice(&mut data);
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op, &[a, b])
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + s);
        let shape = t.shape().to_vec();
        self.push("add_scalar", shape, t.into_data(), Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        let shape = t.shape().to_vec();
        self.push("mul_scalar", shape, t.into_data(), Op::MulScalar(a, s), &[a])
    }

    fn row_broadcast(&mut self, name: &'static str, x: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(row) != [c] {
            return Err(Error::shape(name, self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| f(a, b)))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, data, op, &[x, row])
    }

    /// `x + b` with `b` broadcast over every leading index of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, b, |a, b| a + b, Op::AddRow(x, b))
    }

    /// `x * w` with `w` broadcast over every leading index of `x`.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, w, |a, b| a * b, Op::MulRow(x, w))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push("matmul", vec![n, m], out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matrix product of `(B, n, k)` and `(B, k, m)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * n * m];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm_nn(
                &da[i * n * k..(i + 1) * n * k],
                &db[i * k * m..(i + 1) * k * m],
                &mut out[i * n * m..(i + 1) * n * m],
                n,
                k,
                m,
            );
        }
        self.push("bmm", vec![batch, n, m], out, Op::BatchMatMul(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.value(a).data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(axes)?;
        let shape = t.shape().to_vec();
        self.push("permute", shape, t.into_data(), Op::Permute(a, axes.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::invalid("transpose", format!("expected a matrix, got {:?}", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for p in &parts[1..] {
            let s = self.shape(*p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        self.push("concat", shape, out, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid("narrow", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("narrow", shape, out, Op::Narrow { src: a, axis, start }, &[a])
    }

    /// Splits `a` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if axis >= self.shape(a).len() || total != self.shape(a)[axis] {
            return Err(Error::invalid("split", format!("sizes {sizes:?} along axis {axis} of {:?}", self.shape(a))));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            out.push(self.narrow(a, axis, start, n)?);
            start += n;
        }
        Ok(out)
    }

    /// Selects rows of a `(N, C)` matrix. `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::invalid("gather_rows", format!("expected a matrix, got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if index.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index"));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for i in index {
            match i {
                Some(r) => out.extend_from_slice(&src[r * c..(r + 1) * c]),
                None => out.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        self.push("gather_rows", vec![index.len(), c], out, Op::GatherRows(a, index.to_vec()), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let m = *self.shape(a).last().unwrap();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push("softmax", shape, out, Op::Softmax(a), &[a])
    }

    /// Replaces positions where `mask` is true with [`MASK_FILL`].
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape("masked_fill", self.shape(a), &[mask.len()]));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { MASK_FILL } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("masked_fill", shape, out, Op::MaskedFill(a, mask.to_vec()), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let shape = t.shape().to_vec();
        self.push("relu", shape, t.into_data(), Op::Relu(a), &[a])
    }

    fn reduce_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::invalid(op, format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape: Vec<usize> = s.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((shape, out))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis("sum_axis", a, axis)?;
        self.push("sum_axis", shape, out, Op::SumAxis(a, axis), &[a])
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, mut out) = self.reduce_axis("mean_axis", a, axis)?;
        let n = self.shape(a)[axis] as f64;
        out.iter_mut().for_each(|x| *x /= n);
        self.push("mean_axis", shape, out, Op::MeanAxis(a, axis), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", vec![1], vec![s], Op::SumAll(a), &[a])
    }

    /// Batch normalization of a `(rows, C)` matrix, per column.
    ///
    /// In [`NormMode::Batch`] the statistics come from the rows and are
    /// returned for running-average bookkeeping. In [`NormMode::Fixed`] the
    /// given `running` statistics are used and nothing is returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::invalid("batch_norm", format!("expected (rows, C), got {s:?}")));
        }
        let (rows, c) = (s[0], s[1]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", self.shape(x), self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let (mean, var, stats) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                for row in src.chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in src.chunks(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                let unbiased = var.iter().map(|v| v / (rows.max(2) - 1) as f64).collect();
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Fixed => {
                let (m, v) = running.ok_or_else(|| Error::invalid("batch_norm", "fixed mode needs running statistics"))?;
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", &[c], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(rows * c);
        let mut out = Vec::with_capacity(rows * c);
        for row in src.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mode,
            xhat,
            inv_std,
        };
        let v = self.push("batch_norm", vec![rows, c], out, op, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Layer normalization over the last axis of a `(rows, C)` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::invalid("layer_norm", format!("expected (rows, C), got {s:?}")));
        }
        let (rows, c) = (s[0], s[1]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(rows * c);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * c);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push("layer_norm", vec![rows, c], out, op, &[x, gamma, beta])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// evaluated through log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", vec![1], vec![loss / b as f64], op, &[logits])
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("output must be scalar, got shape {:?}", self.shape(output)),
            ));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut grads = grads;
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            } else if let Some(g) = g {
                self.precision.round_slice(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                acc(*a, g.iter().zip(db).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a), val(*b));
                acc(*a, g.iter().zip(db).map(|(g, y)| g / y).collect());
                acc(*b, g.iter().zip(da.iter().zip(db)).map(|(g, (x, y))| -g * x / (y * y)).collect());
            }
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::MulScalar(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::AddRow(x, b) => {
                let c = shp(*b)[0];
                acc(*x, g.to_vec());
                acc(*b, column_sums(g, c));
            }
            Op::MulRow(x, w) => {
                let c = shp(*w)[0];
                let (dx, dw) = (val(*x), val(*w));
                let gx = g.chunks(c).flat_map(|row| row.iter().zip(dw).map(|(g, w)| g * w)).collect();
                let prod: Vec<f64> = g.iter().zip(dx).map(|(g, x)| g * x).collect();
                acc(*x, gx);
                acc(*w, column_sums(&prod, c));
            }
            Op::MatMul(a, b) => {
                let (n, k, m) = (shp(*a)[0], shp(*a)[1], shp(*b)[1]);
                let mut ga = vec![0.0; n * k];
                gemm_nt(g, val(*b), &mut ga, n, m, k);
                let mut gb = vec![0.0; k * m];
                gemm_tn(val(*a), g, &mut gb, n, k, m);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::BatchMatMul(a, b) => {
                let (batch, n, k, m) = (shp(*a)[0], shp(*a)[1], shp(*a)[2], shp(*b)[2]);
                let (da, db) = (val(*a), val(*b));
                let mut ga = vec![0.0; batch * n * k];
                let mut gb = vec![0.0; batch * k * m];
                for i in 0..batch {
                    let gi = &g[i * n * m..(i + 1) * n * m];
                    gemm_nt(gi, &db[i * k * m..(i + 1) * k * m], &mut ga[i * n * k..(i + 1) * n * k], n, m, k);
                    gemm_tn(&da[i * n * k..(i + 1) * n * k], gi, &mut gb[i * k * m..(i + 1) * k * m], n, k, m);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Permute(a, axes) => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let back = gt.permute(&inverse_permutation(axes)).expect("valid permutation");
                acc(*a, back.into_data());
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = shp(*p)[*axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    acc(*p, gp);
                }
            }
            Op::Narrow { src, axis, start } => {
                let s = shp(*src);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut gs = vec![0.0; s.iter().product()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    let gbase = o * len * inner;
                    gs[base..base + len * inner].copy_from_slice(&g[gbase..gbase + len * inner]);
                }
                acc(*src, gs);
            }
            Op::GatherRows(a, index) => {
                let s = shp(*a);
                let c = s[1];
                let mut ga = vec![0.0; s[0] * c];
                for (i, r) in index.iter().enumerate() {
                    if let Some(r) = r {
                        for j in 0..c {
                            ga[r * c + j] += g[i * c + j];
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::Softmax(a) => {
                let m = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(m).zip(g.chunks(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    ga.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                acc(*a, ga);
            }
            Op::MaskedFill(a, mask) => {
                acc(*a, g.iter().zip(mask).map(|(&g, &m)| if m { 0.0 } else { g }).collect());
            }
            Op::Relu(a) => {
                let scale = match self.fault {
                    Some(Fault::ScaleReluGrad(s)) => s,
                    None => 1.0,
                };
                let x = val(*a);
                acc(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { g * scale } else { 0.0 }).collect());
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let s = shp(*a);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let n = s[*axis];
                let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / n as f64 } else { 1.0 };
                let mut ga = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            ga[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; numel(shp(*a))]),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * hr[j];
                    }
                }
                let gx = match mode {
                    NormMode::Batch => {
                        let r = rows as f64;
                        let mut gx = Vec::with_capacity(rows * c);
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let v = gam[j] * inv_std[j] / r * (r * gr[j] - sum_g[j] - hr[j] * sum_gx[j]);
                                gx.push(v);
                            }
                        }
                        gx
                    }
                    NormMode::Fixed => g
                        .chunks(c)
                        .flat_map(|gr| (0..c).map(move |j| gr[j] * gam[j] * inv_std[j]))
                        .collect(),
                };
                acc(*x, gx);
                acc(*gamma, sum_gx);
                acc(*beta, sum_g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = val(*gamma).len();
                let gam = val(*gamma);
                let mut gx = Vec::with_capacity(xhat.len());
                let mut ggam = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ((gr, hr), is) in g.chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                    let dh: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dhh: f64 = dh.iter().zip(hr).map(|(d, h)| d * h).sum();
                    let n = c as f64;
                    for j in 0..c {
                        gx.push(is / n * (n * dh[j] - sum_dh - hr[j] * sum_dhh));
                        ggam[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                }
                acc(*x, gx);
                acc(*gamma, ggam);
                acc(*beta, gbeta);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = shp(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut gl = probs.clone();
                for (row, &l) in gl.chunks_mut(k).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, gl);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn column_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in g.chunks(c) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

/// `out += a (n×k) · b (k×m)`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// `out += a (n×m) · bᵀ` with `b` stored as (k×m); result (n×k).
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            out[i * k + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += aᵀ · b` with `a` stored as (n×k) and `b` as (n×m); result (k×m).
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let brow = &b[r * m..(r + 1) * m];
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * m..(p + 1) * m].iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// Gradient of a scalar expression with respect to every input.
pub fn gradient<F>(f: F, inputs: &[Tensor], precision: Precision) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(precision);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::invalid("finite_difference_gradient", "expression is not scalar"));
    }
    Ok(tape.value(out).item())
}

/// Central-difference gradient at 64-bit precision:
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every coordinate.
pub fn finite_difference_gradient<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite_difference_gradient", "eps must be positive"));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Elementwise `|a - b| / max(|a|, |b|, 1e-8)`, maximized.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_relative_error on different shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
