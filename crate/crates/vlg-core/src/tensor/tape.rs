//! Op recording and reverse-mode replay.
//!
//! Each method on [`Tape`] validates shapes, computes the forward value,
//! and records a node when any input tracks gradients. [`Tape::backward`]
//! walks the records newest-first, carrying per-tensor cotangents in a
//! scratch map and flushing them into the `grad` buffer of every tensor
//! that requires one. Repeated `backward` calls accumulate.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use super::{axis_runs, Tensor, TensorError};

enum Rule {
    MatMul,
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Add,
    Mul,
    Scale { factor: f64 },
    MeanAxis { axis: usize },
    Reshape,
    RowSoftmax,
    Sigmoid,
    Log,
    Square,
    Recip,
    // Per-row 1/sqrt(var + eps), saved at forward time for the backward rule.
    LayerNorm { inv_std: Vec<f64> },
}

struct Node {
    rule: Rule,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Append-only record of differentiable ops. Single-threaded; parallel
/// code builds one tape per worker.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

// out += a @ b, all row-major.
fn mm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out += a @ b^T where a is m x k and b is n x k.
fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

// out += a^T @ b where a is m x k and b is m x n; out is k x n.
fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rule: Rule, inputs: &[&Tensor], data: Vec<f64>, shape: &[usize]) -> Tensor {
        let out = Tensor::from_vec(data, shape).expect("op produced consistent shape");
        if inputs.iter().any(|t| t.requires_grad()) {
            // Flag only; the grad buffer appears lazily during backward.
            out.0.borrow_mut().requires_grad = true;
            self.nodes.push(Node {
                rule,
                inputs: inputs.iter().map(|&t| t.clone()).collect(),
                output: out.clone(),
            });
        }
        out
    }

    /// `a @ b` for rank-2 operands, `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        mm_nn_acc(&a.borrow_data(), &b.borrow_data(), &mut data, m, k, n);
        Ok(self.push(Rule::MatMul, &[a, b], data, &[m, n]))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("rank {} input", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let xd = x.borrow_data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        drop(xd);
        Ok(self.push(Rule::Transpose, &[x], data, &[n, m]))
    }

    /// Concatenation along `axis`; inputs must agree on every other axis.
    pub fn concat(&mut self, xs: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for x in xs {
            let s = x.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, ext, inner) = axis_runs(&shape, axis);
        let mut data = vec![0.0; outer * ext * inner];
        let mut offset = 0;
        for x in xs {
            let xe = x.shape()[axis];
            let xd = x.borrow_data();
            for o in 0..outer {
                let src = &xd[o * xe * inner..(o + 1) * xe * inner];
                let dst_at = o * ext * inner + offset * inner;
                data[dst_at..dst_at + xe * inner].copy_from_slice(src);
            }
            offset += xe;
        }
        Ok(self.push(Rule::Concat { axis }, xs, data, &shape))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(
        &mut self,
        x: &Tensor,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Tensor, TensorError> {
        let s = x.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) along axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, ext, inner) = axis_runs(&s, axis);
        let mut shape = s.clone();
        shape[axis] = len;
        let xd = x.borrow_data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_at = o * ext * inner + start * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&xd[src_at..src_at + len * inner]);
        }
        drop(xd);
        Ok(self.push(Rule::Slice { axis, start, len }, &[x], data, &shape))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a
            .borrow_data()
            .iter()
            .zip(b.borrow_data().iter())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Rule::Add, &[a, b], data, &a.shape()))
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a
            .borrow_data()
            .iter()
            .zip(b.borrow_data().iter())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Rule::Mul, &[a, b], data, &a.shape()))
    }

    /// Multiplication by a compile-time-known scalar constant.
    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor, TensorError> {
        let data = x.borrow_data().iter().map(|v| v * factor).collect();
        Ok(self.push(Rule::Scale { factor }, &[x], data, &x.shape()))
    }

    /// Mean over `axis`; the axis is removed (a rank-1 input reduces to a
    /// scalar of shape `[1]`).
    pub fn mean_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        let s = x.shape();
        if axis >= s.len() {
            return Err(shape_err("mean_axis", format!("axis {axis} of {s:?}")));
        }
        let (outer, ext, inner) = axis_runs(&s, axis);
        let xd = x.borrow_data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &xd[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let scale = 1.0 / ext as f64;
        data.iter_mut().for_each(|v| *v *= scale);
        drop(xd);
        let mut shape: Vec<usize> = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Rule::MeanAxis { axis }, &[x], data, &shape))
    }

    /// Same data under a new shape (element count preserved). Moves no
    /// values and performs no arithmetic; the backward rule is identity.
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
        if shape.is_empty() || shape.iter().product::<usize>() != x.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?} ({} elements)", x.shape(), x.numel()),
            ));
        }
        let data = x.value();
        Ok(self.push(Rule::Reshape, &[x], data, shape))
    }

    /// Numerically stable softmax along the last axis.
    pub fn row_softmax(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let s = x.shape();
        let cols = *s.last().expect("tensors have rank >= 1");
        let mut data = x.value();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(Rule::RowSoftmax, &[x], data, &s))
    }

    /// Elementwise logistic function, stable in both tails.
    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let data = x
            .borrow_data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        Ok(self.push(Rule::Sigmoid, &[x], data, &x.shape()))
    }

    /// Elementwise natural log; the caller keeps inputs positive.
    pub fn log(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let data = x.borrow_data().iter().map(|v| v.ln()).collect();
        Ok(self.push(Rule::Log, &[x], data, &x.shape()))
    }

    /// Elementwise square.
    pub fn square(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let data = x.borrow_data().iter().map(|v| v * v).collect();
        Ok(self.push(Rule::Square, &[x], data, &x.shape()))
    }

    /// Elementwise reciprocal; needed by ratio-form losses (Dice).
    pub fn recip(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let data = x.borrow_data().iter().map(|v| 1.0 / v).collect();
        Ok(self.push(Rule::Recip, &[x], data, &x.shape()))
    }

    /// Per-row normalization over the last axis: `(x - mean) / sqrt(var + eps)`.
    /// Fused op with a dedicated backward rule; only used when the refiner
    /// config opts in.
    pub fn layer_norm(&mut self, x: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
        let s = x.shape();
        let cols = *s.last().expect("tensors have rank >= 1");
        let mut data = x.value();
        let mut inv_std = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        Ok(self.push(Rule::LayerNorm { inv_std }, &[x], data, &s))
    }

    // ── Conveniences composed from the primitives above ──

    /// `a - b`.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, &nb)
    }

    /// Adds a scalar constant to every element.
    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        let cs = Tensor::full(&x.shape(), c);
        self.add(x, &cs)
    }

    /// Mean over all elements, as a `[1]` scalar.
    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let flat = self.reshape(x, &[x.numel()])?;
        self.mean_axis(&flat, 0)
    }

    /// Sum over all elements, as a `[1]` scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let m = self.mean_all(x)?;
        self.scale(&m, x.numel() as f64)
    }

    /// Inner product of two equal-length rank-1 tensors, as a `[1]` scalar.
    pub fn dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel() {
            return Err(shape_err("dot", format!("{:?} . {:?}", a.shape(), b.shape())));
        }
        let n = a.numel();
        let ar = self.reshape(a, &[1, n])?;
        let br = self.reshape(b, &[n, 1])?;
        let p = self.matmul(&ar, &br)?;
        self.reshape(&p, &[1])
    }

    /// Accumulates `∂loss/∂t` into the `grad` buffer of every tensor on
    /// the path from `loss` back to the leaves. Repeated calls add.
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss { numel: loss.numel() });
        }
        let mut cotangents: HashMap<usize, Vec<f64>> = HashMap::new();
        cotangents.insert(loss.ptr(), vec![1.0]);

        // Leaves never appear as node outputs; remember their handles so
        // the residue of the map can be flushed after the walk.
        let mut leaves: HashMap<usize, Tensor> = HashMap::new();
        if loss.requires_grad() {
            leaves.insert(loss.ptr(), loss.clone());
        }

        for node in self.nodes.iter().rev() {
            let Some(dout) = cotangents.remove(&node.output.ptr()) else {
                continue;
            };
            if node.output.requires_grad() {
                node.output.accumulate_grad(&dout);
            }
            node.propagate(&dout, &mut cotangents);
            for input in &node.inputs {
                if input.requires_grad() {
                    leaves.entry(input.ptr()).or_insert_with(|| input.clone());
                }
            }
        }

        for (ptr, buf) in cotangents {
            if let Some(t) = leaves.get(&ptr) {
                t.accumulate_grad(&buf);
            }
        }
        Ok(())
    }
}

fn accumulate(map: &mut HashMap<usize, Vec<f64>>, t: &Tensor, delta: Vec<f64>) {
    if !t.requires_grad() {
        return;
    }
    match map.entry(t.ptr()) {
        Entry::Occupied(mut e) => {
            for (g, d) in e.get_mut().iter_mut().zip(&delta) {
                *g += d;
            }
        }
        Entry::Vacant(e) => {
            e.insert(delta);
        }
    }
}

impl Node {
    fn propagate(&self, dout: &[f64], map: &mut HashMap<usize, Vec<f64>>) {
        match &self.rule {
            Rule::MatMul => {
                let (a, b) = (&self.inputs[0], &self.inputs[1]);
                let (m, k) = {
                    let s = a.shape();
                    (s[0], s[1])
                };
                let n = b.shape()[1];
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    mm_nt_acc(dout, &b.borrow_data(), &mut da, m, n, k);
                    accumulate(map, a, da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    mm_tn_acc(&a.borrow_data(), dout, &mut db, m, k, n);
                    accumulate(map, b, db);
                }
            }
            Rule::Transpose => {
                let x = &self.inputs[0];
                let s = x.shape();
                let (m, n) = (s[0], s[1]);
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = dout[j * m + i];
                    }
                }
                accumulate(map, x, dx);
            }
            Rule::Concat { axis } => {
                let shape = self.output.shape();
                let (outer, ext, inner) = axis_runs(&shape, *axis);
                let mut offset = 0;
                for x in &self.inputs {
                    let xe = x.shape()[*axis];
                    if x.requires_grad() {
                        let mut dx = vec![0.0; outer * xe * inner];
                        for o in 0..outer {
                            let src_at = o * ext * inner + offset * inner;
                            dx[o * xe * inner..(o + 1) * xe * inner]
                                .copy_from_slice(&dout[src_at..src_at + xe * inner]);
                        }
                        accumulate(map, x, dx);
                    }
                    offset += xe;
                }
            }
            Rule::Slice { axis, start, len } => {
                let x = &self.inputs[0];
                let s = x.shape();
                let (outer, ext, inner) = axis_runs(&s, *axis);
                let mut dx = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let dst_at = o * ext * inner + start * inner;
                    dx[dst_at..dst_at + len * inner]
                        .copy_from_slice(&dout[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(map, x, dx);
            }
            Rule::Add => {
                accumulate(map, &self.inputs[0], dout.to_vec());
                accumulate(map, &self.inputs[1], dout.to_vec());
            }
            Rule::Mul => {
                let (a, b) = (&self.inputs[0], &self.inputs[1]);
                if a.requires_grad() {
                    let da = dout
                        .iter()
                        .zip(b.borrow_data().iter())
                        .map(|(d, v)| d * v)
                        .collect();
                    accumulate(map, a, da);
                }
                if b.requires_grad() {
                    let db = dout
                        .iter()
                        .zip(a.borrow_data().iter())
                        .map(|(d, v)| d * v)
                        .collect();
                    accumulate(map, b, db);
                }
            }
            Rule::Scale { factor } => {
                let dx = dout.iter().map(|d| d * factor).collect();
                accumulate(map, &self.inputs[0], dx);
            }
            Rule::MeanAxis { axis } => {
                let x = &self.inputs[0];
                let s = x.shape();
                let (outer, ext, inner) = axis_runs(&s, *axis);
                let w = 1.0 / ext as f64;
                let mut dx = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let src = &dout[o * inner..(o + 1) * inner];
                    for e in 0..ext {
                        let dst = &mut dx[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d = v * w;
                        }
                    }
                }
                accumulate(map, x, dx);
            }
            Rule::Reshape => {
                accumulate(map, &self.inputs[0], dout.to_vec());
            }
            Rule::RowSoftmax => {
                // dx = y * (dy - <dy, y>) per row.
                let y = self.output.borrow_data();
                let cols = *self.output.shape().last().expect("rank >= 1");
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let ds = &dout[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(ds).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &dv) in dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(ys)
                        .zip(ds)
                    {
                        *o = yv * (dv - dot);
                    }
                }
                drop(y);
                accumulate(map, &self.inputs[0], dx);
            }
            Rule::Sigmoid => {
                let y = self.output.borrow_data();
                let dx = dout
                    .iter()
                    .zip(y.iter())
                    .map(|(d, &v)| d * v * (1.0 - v))
                    .collect();
                drop(y);
                accumulate(map, &self.inputs[0], dx);
            }
            Rule::Log => {
                let x = self.inputs[0].borrow_data();
                let dx = dout.iter().zip(x.iter()).map(|(d, v)| d / v).collect();
                drop(x);
                accumulate(map, &self.inputs[0], dx);
            }
            Rule::Square => {
                let x = self.inputs[0].borrow_data();
                let dx = dout
                    .iter()
                    .zip(x.iter())
                    .map(|(d, v)| d * 2.0 * v)
                    .collect();
                drop(x);
                accumulate(map, &self.inputs[0], dx);
            }
            Rule::Recip => {
                let y = self.output.borrow_data();
                let dx = dout
                    .iter()
                    .zip(y.iter())
                    .map(|(d, &v)| -d * v * v)
                    .collect();
                drop(y);
                accumulate(map, &self.inputs[0], dx);
            }
            Rule::LayerNorm { inv_std } => {
                // dx = inv_std * (dy - mean(dy) - y * mean(dy * y)) per row.
                let y = self.output.borrow_data();
                let cols = *self.output.shape().last().expect("rank >= 1");
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let ds = &dout[r * cols..(r + 1) * cols];
                    let mean_d: f64 = ds.iter().sum::<f64>() / cols as f64;
                    let mean_dy: f64 =
                        ys.iter().zip(ds).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    let inv = inv_std[r];
                    for ((o, &yv), &dv) in dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(ys)
                        .zip(ds)
                    {
                        *o = inv * (dv - mean_d - yv * mean_dy);
                    }
                }
                drop(y);
                accumulate(map, &self.inputs[0], dx);
            }
        }
    }
}
