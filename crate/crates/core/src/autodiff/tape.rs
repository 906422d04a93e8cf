use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Conv2d(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Mean(Var),
    Sum(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, Vec<(usize, usize, usize)>),
    Reshape(Var),
    Transpose(Var),
    Embedding(Var, Vec<usize>),
    Upsample(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records primitive operations in evaluation order so that gradients can be
/// propagated back from a scalar.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to parameters, keyed by parameter id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.by_param.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    /// Adds `other * weight` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        for (id, g) in &other.by_param {
            let mut scaled = g.clone();
            scaled.scale_assign(weight);
            match self.by_param.get_mut(id) {
                Some(acc) => acc.add_assign(&scaled),
                None => {
                    self.by_param.insert(*id, scaled);
                }
            }
        }
    }

    pub fn insert(&mut self, param: usize, grad: Tensor) {
        self.by_param.insert(param, grad);
    }

    pub fn scale(&mut self, k: f64) {
        self.by_param.values_mut().for_each(|g| g.scale_assign(k));
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

fn check(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn slice_shape(shape: &[usize], ranges: &[(usize, usize, usize)]) -> Result<Vec<usize>> {
    if ranges.len() != shape.len() {
        return Err(Error::shape("slice", format!("{} ranges for rank {}", ranges.len(), shape.len())));
    }
    shape
        .iter()
        .zip(ranges)
        .map(|(&d, &(start, end, step))| {
            if step == 0 || start > end || end > d {
                Err(Error::shape("slice", format!("range {start}..{end} step {step} on dim {d}")))
            } else {
                Ok((end - start).div_ceil(step))
            }
        })
        .collect()
}

/// Calls `f(out_index, in_index)` for every element of a strided slice.
fn for_each_slice(shape: &[usize], ranges: &[(usize, usize, usize)], out_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    for o in 0..total {
        let src: usize = (0..rank).map(|k| (ranges[k].0 + idx[k] * ranges[k].2) * strides[k]).sum();
        f(o, src);
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g (n, m) x b^T` for `b` of shape `(k, m)`.
fn matmul_bt_raw(g: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for (p, o) in out[i * k..(i + 1) * k].iter_mut().enumerate() {
            *o = grow.iter().zip(&b[p * m..(p + 1) * m]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T x g` for `a` of shape `(n, k)` and `g` of shape `(n, m)`.
fn matmul_at_raw(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * m..(p + 1) * m].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Rows of `(ky, kx, c)` patches for a same-padded `k x k` window; padding
/// taps are zero.
fn im2col(src: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; h * w * k * k * c];
    for (row, patch) in out.chunks_exact_mut(k * k * c).enumerate() {
        let (y, x) = (row / w, row % w);
        for ky in 0..k {
            let Some(sy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                continue;
            };
            for kx in 0..k {
                let Some(sx) = (x + kx).checked_sub(pad).filter(|&v| v < w) else {
                    continue;
                };
                patch[(ky * k + kx) * c..][..c].copy_from_slice(&src[(sy * w + sx) * c..][..c]);
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the map.
fn col2im(cols: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; h * w * c];
    for (row, patch) in cols.chunks_exact(k * k * c).enumerate() {
        let (y, x) = (row / w, row % w);
        for ky in 0..k {
            let Some(sy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                continue;
            };
            for kx in 0..k {
                let Some(sx) = (x + kx).checked_sub(pad).filter(|&v| v < w) else {
                    continue;
                };
                for (o, &v) in out[(sy * w + sx) * c..][..c].iter_mut().zip(&patch[(ky * k + kx) * c..][..c]) {
                    *o += v;
                }
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        let value = check(op, value)?;
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op: kind,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records parameter `id` of `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `(n, k) x (k, m) -> (n, m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(&[n, m], matmul_raw(ta.data(), tb.data(), n, k, m))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Stride-1, same-padding convolution of an `(H, W, Cin)` map with a
    /// `(K, K, Cin, Cout)` kernel, `K` odd.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        if ti.rank() != 3 || tk.rank() != 4 || tk.shape()[0] != tk.shape()[1] || tk.shape()[0] % 2 == 0 || tk.shape()[2] != ti.shape()[2] {
            return Err(Error::shape("conv2d", format!("{:?} * {:?}", ti.shape(), tk.shape())));
        }
        let (h, w, ci) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (k, co) = (tk.shape()[0], tk.shape()[3]);
        let out = if k == 1 {
            matmul_raw(ti.data(), tk.data(), h * w, ci, co)
        } else {
            matmul_raw(&im2col(ti.data(), h, w, ci, k), tk.data(), h * w, k * k * ci, co)
        };
        let out = Tensor::new(&[h, w, co], out)?;
        self.push("conv2d", out, Op::Conv2d(input, kernel), &[input, kernel])
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, kind: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(op, out, kind, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a vector of length `n` to every row of a `(.., n)` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = *ta.shape().last().unwrap_or(&0);
        if tr.numel() != n || n == 0 {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", ta.shape(), tr.shape())));
        }
        let r = tr.data();
        let mut data = Vec::with_capacity(ta.numel());
        for row in ta.data().chunks_exact(n) {
            data.extend(row.iter().zip(r).map(|(&v, &b)| v + b));
        }
        let out = Tensor::new(ta.shape(), data)?;
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies each row of an `(r, c)` tensor by the matching entry of an
    /// `r`-element column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if ta.rank() != 2 || tc.numel() != ta.shape()[0] {
            return Err(Error::shape("mul_col", format!("{:?} * {:?}", ta.shape(), tc.shape())));
        }
        let c = ta.shape()[1];
        let s = tc.data();
        let mut data = Vec::with_capacity(ta.numel());
        for (row, &k) in ta.data().chunks_exact(c).zip(s) {
            data.extend(row.iter().map(|&v| v * k));
        }
        let out = Tensor::new(ta.shape(), data)?;
        self.push("mul_col", out, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * k);
        self.push("scale", out, Op::Scale(a, k), &[a])
    }

    /// `a + k` elementwise.
    pub fn shift(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + k);
        self.push("shift", out, Op::Shift(a), &[a])
    }

    /// `1 - a` elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.shift(neg, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = *ta.shape().last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::shape("softmax", format!("{:?}", ta.shape())));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::new(ta.shape(), data)?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Log of the softmax over the last axis, computed without forming the
    /// softmax itself.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = *ta.shape().last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::shape("log_softmax", format!("{:?}", ta.shape())));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(ta.shape(), data)?;
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.numel() as f64);
        self.push("mean", out, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?);
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} on rank {rank}")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != rank || (0..rank).any(|i| i != axis && s[i] != first.shape()[i]) {
                return Err(Error::shape("concat", format!("{s:?} vs {:?}", first.shape())));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Strided slice: one `(start, end, step)` per axis, `end` exclusive.
    pub fn slice(&mut self, a: Var, ranges: &[(usize, usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        let out_shape = slice_shape(ta.shape(), ranges)?;
        let mut data = vec![0.0; out_shape.iter().product()];
        let src = ta.data();
        for_each_slice(ta.shape(), ranges, &out_shape, |o, i| data[o] = src[i]);
        let out = Tensor::new(&out_shape, data)?;
        self.push("slice", out, Op::Slice(a, ranges.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", ta.shape())));
        }
        let (n, m) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::new(&[m, n], transpose_raw(ta.data(), n, m))?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Rows `ids` of a `(V, D)` table; equal to one-hot(ids) x table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 || ids.iter().any(|&i| i >= tt.shape()[0]) {
            return Err(Error::shape("embedding", format!("ids {ids:?} into {:?}", tt.shape())));
        }
        let d = tt.shape()[1];
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        self.push("embedding", out, Op::Embedding(table, ids.to_vec()), &[table])
    }

    /// Nearest-neighbour upsampling of an `(H, W, C)` map by an integer factor.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 3 || factor == 0 {
            return Err(Error::shape("upsample", format!("{:?} x{factor}", ta.shape())));
        }
        let (h, w, c) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let src = ta.data();
        let mut data = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for px in src[(y / factor) * w * c..][..w * c].chunks_exact(c) {
                for _ in 0..factor {
                    data.extend_from_slice(px);
                }
            }
        }
        let out = Tensor::new(&[oh, ow, c], data)?;
        self.push("upsample", out, Op::Upsample(a, factor), &[a])
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Reverse sweep from a scalar node whose upstream gradient is `seed`.
    pub fn backward_with_seed(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), seed));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let g = check("backward", g)?;
                    match out.by_param.get_mut(id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.by_param.insert(*id, g);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.nodes[a.0].tracked {
                        send(*a, Tensor::new(&[n, k], matmul_bt_raw(g.data(), tb.data(), n, m, k))?, &mut grads);
                    }
                    if self.nodes[b.0].tracked {
                        send(*b, Tensor::new(&[k, m], matmul_at_raw(ta.data(), g.data(), n, k, m))?, &mut grads);
                    }
                }
                Op::Conv2d(input, kernel) => {
                    let (ti, tk) = (self.value(*input), self.value(*kernel));
                    let (h, w, ci) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                    let (k, co) = (tk.shape()[0], tk.shape()[3]);
                    let kk = k * k * ci;
                    if self.nodes[kernel.0].tracked {
                        let gk = if k == 1 {
                            matmul_at_raw(ti.data(), g.data(), h * w, ci, co)
                        } else {
                            matmul_at_raw(&im2col(ti.data(), h, w, ci, k), g.data(), h * w, kk, co)
                        };
                        send(*kernel, Tensor::new(tk.shape(), gk)?, &mut grads);
                    }
                    if self.nodes[input.0].tracked {
                        let cols = matmul_bt_raw(g.data(), tk.data(), h * w, co, kk);
                        let gi = if k == 1 { cols } else { col2im(&cols, h, w, ci, k) };
                        send(*input, Tensor::new(ti.shape(), gi)?, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[b.0].tracked {
                        send(*a, g.clone(), &mut grads);
                        send(*b, g, &mut grads);
                    } else {
                        send(*a, g, &mut grads);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[b.0].tracked {
                        send(*b, g.map(|v| -v), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].tracked {
                        let ga = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                        send(*a, Tensor::new(g.shape(), ga)?, &mut grads);
                    }
                    if self.nodes[b.0].tracked {
                        let gb = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                        send(*b, Tensor::new(g.shape(), gb)?, &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].tracked {
                        let ga = g.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect();
                        send(*a, Tensor::new(g.shape(), ga)?, &mut grads);
                    }
                    if self.nodes[b.0].tracked {
                        let gb = g
                            .data()
                            .iter()
                            .zip(ta.data().iter().zip(tb.data()))
                            .map(|(x, (n, d))| -x * n / (d * d))
                            .collect();
                        send(*b, Tensor::new(g.shape(), gb)?, &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    let tr = self.value(*row);
                    let n = tr.numel();
                    let mut gr = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (a, &v) in gr.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    send(*row, Tensor::new(tr.shape(), gr)?, &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::MulCol(a, col) => {
                    let (ta, tc) = (self.value(*a), self.value(*col));
                    let c = ta.shape()[1];
                    let s = tc.data();
                    let mut ga = Vec::with_capacity(g.numel());
                    let mut gc = Vec::with_capacity(tc.numel());
                    for ((gr, xr), &k) in g.data().chunks_exact(c).zip(ta.data().chunks_exact(c)).zip(s) {
                        ga.extend(gr.iter().map(|&v| v * k));
                        gc.push(gr.iter().zip(xr).map(|(v, x)| v * x).sum());
                    }
                    send(*a, Tensor::new(ta.shape(), ga)?, &mut grads);
                    send(*col, Tensor::new(tc.shape(), gc)?, &mut grads);
                }
                Op::Scale(a, k) => send(*a, g.map(|v| v * k), &mut grads),
                Op::Shift(a) | Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    send(*a, g.reshaped(&shape)?, &mut grads);
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let d = g.data().iter().zip(ta.data()).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }).collect();
                    send(*a, Tensor::new(g.shape(), d)?, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let d = g.data().iter().zip(node.value.data()).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                    send(*a, Tensor::new(g.shape(), d)?, &mut grads);
                }
                Op::Tanh(a) => {
                    let d = g.data().iter().zip(node.value.data()).map(|(&gv, &t)| gv * (1.0 - t * t)).collect();
                    send(*a, Tensor::new(g.shape(), d)?, &mut grads);
                }
                Op::Log(a) => {
                    let d = g.data().iter().zip(self.value(*a).data()).map(|(&gv, &x)| gv / x).collect();
                    send(*a, Tensor::new(g.shape(), d)?, &mut grads);
                }
                Op::Softmax(a) => {
                    let n = *g.shape().last().unwrap();
                    let mut d = Vec::with_capacity(g.numel());
                    for (gr, sr) in g.data().chunks(n).zip(node.value.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(sr).map(|(x, y)| x * y).sum();
                        d.extend(gr.iter().zip(sr).map(|(&x, &s)| s * (x - dot)));
                    }
                    send(*a, Tensor::new(g.shape(), d)?, &mut grads);
                }
                Op::LogSoftmax(a) => {
                    let n = *g.shape().last().unwrap();
                    let mut d = Vec::with_capacity(g.numel());
                    for (gr, lr) in g.data().chunks(n).zip(node.value.data().chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        d.extend(gr.iter().zip(lr).map(|(&x, &l)| x - l.exp() * total));
                    }
                    send(*a, Tensor::new(g.shape(), d)?, &mut grads);
                }
                Op::Mean(a) => {
                    let ta = self.value(*a);
                    send(*a, Tensor::full(ta.shape(), g.item() / ta.numel() as f64), &mut grads);
                }
                Op::Sum(a) => {
                    send(*a, Tensor::full(self.value(*a).shape(), g.item()), &mut grads);
                }
                Op::Concat(parts, axis) => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut pieces: Vec<Vec<f64>> = parts.iter().map(|p| Vec::with_capacity(self.value(*p).numel())).collect();
                    let mut off = 0;
                    for _ in 0..outer {
                        for (k, p) in parts.iter().enumerate() {
                            let block = self.value(*p).shape()[*axis] * inner;
                            pieces[k].extend_from_slice(&g.data()[off..off + block]);
                            off += block;
                        }
                    }
                    for (p, data) in parts.iter().zip(pieces) {
                        send(*p, Tensor::new(self.value(*p).shape(), data)?, &mut grads);
                    }
                }
                Op::Slice(a, ranges) => {
                    let ta = self.value(*a);
                    let mut d = vec![0.0; ta.numel()];
                    for_each_slice(ta.shape(), ranges, g.shape(), |o, i| d[i] += g.data()[o]);
                    send(*a, Tensor::new(ta.shape(), d)?, &mut grads);
                }
                Op::Transpose(a) => {
                    let (n, m) = (g.shape()[0], g.shape()[1]);
                    send(*a, Tensor::new(&[m, n], transpose_raw(g.data(), n, m))?, &mut grads);
                }
                Op::Embedding(table, ids) => {
                    let tt = self.value(*table);
                    let d = tt.shape()[1];
                    let mut gt = vec![0.0; tt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g.data()[r * d + j];
                        }
                    }
                    send(*table, Tensor::new(tt.shape(), gt)?, &mut grads);
                }
                Op::Upsample(a, factor) => {
                    let ta = self.value(*a);
                    let (w, c) = (ta.shape()[1], ta.shape()[2]);
                    let mut d = vec![0.0; ta.numel()];
                    for (y, grow) in g.data().chunks_exact(w * factor * c).enumerate() {
                        let drow = &mut d[(y / factor) * w * c..][..w * c];
                        for (dpx, gblock) in drow.chunks_exact_mut(c).zip(grow.chunks_exact(factor * c)) {
                            for gpx in gblock.chunks_exact(c) {
                                for (a, &v) in dpx.iter_mut().zip(gpx) {
                                    *a += v;
                                }
                            }
                        }
                    }
                    send(*a, Tensor::new(ta.shape(), d)?, &mut grads);
                }
            }
        }
        Ok(out)
    }
}
