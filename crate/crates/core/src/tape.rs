//! Reverse-mode automatic differentiation over a recorded operation log.
//!
//! A [`Tape`] owns every tensor created during one forward pass together with
//! an ordered log of the operations that produced them (operands always
//! precede their results, so reverse iteration is a valid topological order
//! for gradient accumulation). Handles into the tape are lightweight
//! [`Var`] indices.
//!
//! Broadcasting is limited to what the model needs: row-vector add/multiply
//! over the last axis and scalar scaling. Gradient accumulation is additive;
//! running `backward` twice without a reset doubles every gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// One entry of the computation record.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x + b` with `b` broadcast across rows (`b` has the extent of the last axis).
    AddRowVec(Var, Var),
    /// `x * b` with `b` broadcast across rows.
    MulRowVec(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    ReduceMean { x: Var, axis: usize },
    ReduceSum { x: Var, axis: usize },
    /// Row gather along the first axis; gradient scatter-adds into the table.
    GatherRows { x: Var, ids: Vec<usize> },
    /// `out[i] = x[i, ids[i]]` for a rank-2 input.
    TakePerRow { x: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Zero-mean / unit-variance normalization over the last axis (no affine).
    LayerNorm { x: Var, eps: f64 },
}

/// Tensor store plus computation record.
#[derive(Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
}

/// Iterate row-major lanes along `axis`: calls `f(flat_indices_of_lane)`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![0usize; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (k, slot) in lane.iter_mut().enumerate() {
                *slot = base + k * inner;
            }
            f(&lane);
        }
    }
}

/// Shape with one axis removed; empty result is a scalar.
fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    out.remove(axis);
    out
}

/// Naive row-major matrix product, shared by forward and backward.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.tensors[v.0]
    }

    /// Gradient of `v` if backward has produced one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.tensors[v.0].grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tensors[v.0].shape()
    }

    /// Register an input tensor; its `requires_grad` flag is honored.
    pub fn input(&mut self, t: Tensor) -> Var {
        let id = self.tensors.len();
        self.tensors.push(t);
        self.ops.push(Op::Leaf);
        Var(id)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.input(t)
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn variable(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.input(t)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, operands: &[Var]) -> Result<Var> {
        let mut t = Tensor::new(shape, data).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(m),
            Error::Numeric(m) => Error::Numeric(format!("{}: {m}", op_name(&op))),
            other => other,
        })?;
        t.requires_grad = operands.iter().any(|v| self.tensors[v.0].requires_grad);
        let id = self.tensors.len();
        self.tensors.push(t);
        self.ops.push(op);
        Ok(Var(id))
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, c), &[x])
    }

    fn row_vec_check(&self, x: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        let cols = *xs.last().ok_or_else(|| Error::Shape(format!("{what}: scalar input")))?;
        if bs != [cols] {
            return Err(Error::Shape(format!(
                "{what}: vector {:?} does not match last axis of {:?}",
                bs, xs
            )));
        }
        Ok((self.value(x).numel() / cols, cols))
    }

    /// `y[i, j] = x[i, j] + b[j]` (rank-1 `x` treated as a single row).
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.row_vec_check(x, b, "add_row_vec")?;
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(xv[i * cols + j] + bv[j]);
            }
        }
        self.push(self.shape(x).to_vec(), data, Op::AddRowVec(x, b), &[x, b])
    }

    /// `y[i, j] = x[i, j] * b[j]`.
    pub fn mul_row_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.row_vec_check(x, b, "mul_row_vec")?;
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(xv[i * cols + j] * bv[j]);
            }
        }
        self.push(self.shape(x).to_vec(), data, Op::MulRowVec(x, b), &[x, b])
    }

    /// Standard matrix product for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul expects rank-2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner extents {k} vs {k2}")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose expects rank-2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let data = transpose_raw(self.value(x).data(), r, c);
        self.push(vec![c, r], data, Op::Transpose(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        self.push(self.shape(x).to_vec(), data, Op::Tanh(x), &[x])
    }

    fn axis_check(&self, x: Var, axis: usize, what: &str) -> Result<()> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::Index(format!("{what}: axis {axis} out of range for {s:?}")));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.axis_check(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for_each_lane(&shape, axis, |lane| {
            let max = lane.iter().map(|&i| xv[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in lane {
                let e = (xv[i] - max).exp();
                data[i] = e;
                sum += e;
            }
            for &i in lane {
                data[i] /= sum;
            }
        });
        self.push(shape, data, Op::Softmax { x, axis }, &[x])
    }

    /// `x - logsumexp(x)` along `axis`, stable under large logits.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.axis_check(x, axis, "log_softmax")?;
        let shape = self.shape(x).to_vec();
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for_each_lane(&shape, axis, |lane| {
            let max = lane.iter().map(|&i| xv[i]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = lane.iter().map(|&i| (xv[i] - max).exp()).sum();
            let lse = max + sum.ln();
            for &i in lane {
                data[i] = xv[i] - lse;
            }
        });
        self.push(shape, data, Op::LogSoftmax { x, axis }, &[x])
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.axis_check(x, axis, "reduce_mean")?;
        let shape = self.shape(x).to_vec();
        if shape[axis] == 0 {
            return Err(Error::EmptyReduction(format!("mean over zero-extent axis {axis}")));
        }
        let n = shape[axis] as f64;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(xv.len() / shape[axis]);
        for_each_lane(&shape, axis, |lane| {
            data.push(lane.iter().map(|&i| xv[i]).sum::<f64>() / n);
        });
        self.push(drop_axis(&shape, axis), data, Op::ReduceMean { x, axis }, &[x])
    }

    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.axis_check(x, axis, "reduce_sum")?;
        let shape = self.shape(x).to_vec();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(xv.len() / shape[axis].max(1));
        for_each_lane(&shape, axis, |lane| {
            data.push(lane.iter().map(|&i| xv[i]).sum::<f64>());
        });
        self.push(drop_axis(&shape, axis), data, Op::ReduceSum { x, axis }, &[x])
    }

    /// Gather rows (first-axis slices); ids may repeat.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::Shape("gather_rows on scalar".into()));
        }
        let row = shape[1..].iter().product::<usize>().max(1);
        for &id in ids {
            if id >= shape[0] {
                return Err(Error::Index(format!("row id {id} out of range 0..{}", shape[0])));
            }
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(ids.len() * row);
        for &id in ids {
            data.extend_from_slice(&xv[id * row..(id + 1) * row]);
        }
        let mut out_shape = vec![ids.len()];
        out_shape.extend_from_slice(&shape[1..]);
        self.push(out_shape, data, Op::GatherRows { x, ids: ids.to_vec() }, &[x])
    }

    /// Per-row element pick on a rank-2 tensor: `out[i] = x[i, ids[i]]`.
    pub fn take_per_row(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("take_per_row expects rank-2, got {shape:?}")));
        }
        if ids.len() != shape[0] {
            return Err(Error::Shape(format!(
                "take_per_row: {} ids for {} rows",
                ids.len(),
                shape[0]
            )));
        }
        for &id in ids {
            if id >= shape[1] {
                return Err(Error::Index(format!("column id {id} out of range 0..{}", shape[1])));
            }
        }
        let xv = self.value(x).data();
        let data = ids.iter().enumerate().map(|(i, &j)| xv[i * shape[1] + j]).collect();
        self.push(vec![shape[0]], data, Op::TakePerRow { x, ids: ids.to_vec() }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::Shape("slice_rows on scalar".into()));
        }
        if start + len > shape[0] || len == 0 {
            return Err(Error::Index(format!(
                "slice_rows {start}..{} out of range 0..{}",
                start + len,
                shape[0]
            )));
        }
        let row = shape[1..].iter().product::<usize>().max(1);
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = vec![len];
        out_shape.extend_from_slice(&shape[1..]);
        self.push(out_shape, data, Op::SliceRows { x, start, len }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("slice_cols expects rank-2, got {shape:?}")));
        }
        if start + len > shape[1] || len == 0 {
            return Err(Error::Index(format!(
                "slice_cols {start}..{} out of range 0..{}",
                start + len,
                shape[1]
            )));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(shape[0] * len);
        for i in 0..shape[0] {
            data.extend_from_slice(&xv[i * shape[1] + start..i * shape[1] + start + len]);
        }
        self.push(vec![shape[0], len], data, Op::SliceCols { x, start, len }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let cols = self.shape(parts[0]).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != cols[..] {
                return Err(Error::Shape(format!("concat_rows: {s:?} vs trailing {cols:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&cols);
        self.push(shape, data, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.shape(parts[0]).first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape(format!("concat_cols: {s:?} vs {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p).data();
                data.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![rows, total], data, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Per-vector zero-mean / unit-variance over the last axis, no affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for r in 0..xv.len() / cols {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data[r * cols + j] = (v - mean) * inv;
            }
        }
        self.push(shape, data, Op::LayerNorm { x, eps }, &[x])
    }

    /// Reduce to a scalar: mean over every element.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let mut v = x;
        while !self.shape(v).is_empty() {
            v = self.reduce_mean(v, 0)?;
        }
        Ok(v)
    }

    /// Reduce to a scalar: sum over every element.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut v = x;
        while !self.shape(v).is_empty() {
            v = self.reduce_sum(v, 0)?;
        }
        Ok(v)
    }

    fn acc(&mut self, v: Var, contrib: &[f64]) {
        if !self.tensors[v.0].requires_grad {
            return;
        }
        let numel = self.tensors[v.0].numel();
        let slot = self.tensors[v.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (g, c) in slot.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Reverse-mode accumulation from a scalar loss into every
    /// `requires_grad` tensor reachable from it. Additive across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.tensors[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.tensors[loss.0].requires_grad {
            // Nothing trainable feeds the loss; gradients are vacuous.
            return Ok(());
        }
        // Per-call upstream buffers, so repeated backward calls accumulate
        // exactly once each into the persistent grad slots.
        let mut upstream: Vec<Option<Vec<f64>>> = vec![None; self.tensors.len()];
        upstream[loss.0] = Some(vec![1.0]);
        self.acc(loss, &[1.0]);

        for idx in (0..self.tensors.len()).rev() {
            let g = match upstream[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.ops[idx].clone();
            let send = |tape: &mut Tape, up: &mut Vec<Option<Vec<f64>>>, v: Var, c: Vec<f64>| {
                if !tape.tensors[v.0].requires_grad {
                    return;
                }
                tape.acc(v, &c);
                match &mut up[v.0] {
                    Some(buf) => {
                        for (b, x) in buf.iter_mut().zip(&c) {
                            *b += x;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(self, &mut upstream, a, g.clone());
                    send(self, &mut upstream, b, g);
                }
                Op::Sub(a, b) => {
                    send(self, &mut upstream, a, g.clone());
                    send(self, &mut upstream, b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, self.value(b).data(), |x, y| x * y);
                    let db = zip_map(&g, self.value(a).data(), |x, y| x * y);
                    send(self, &mut upstream, a, da);
                    send(self, &mut upstream, b, db);
                }
                Op::Scale(x, c) => {
                    send(self, &mut upstream, x, g.iter().map(|v| v * c).collect());
                }
                Op::AddRowVec(x, b) => {
                    let cols = self.shape(b)[0];
                    let mut db = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        db[i % cols] += v;
                    }
                    send(self, &mut upstream, x, g);
                    send(self, &mut upstream, b, db);
                }
                Op::MulRowVec(x, b) => {
                    let cols = self.shape(b)[0];
                    let bv = self.value(b).data().to_vec();
                    let xv = self.value(x).data().to_vec();
                    let dx: Vec<f64> =
                        g.iter().enumerate().map(|(i, v)| v * bv[i % cols]).collect();
                    let mut db = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        db[i % cols] += v * xv[i];
                    }
                    send(self, &mut upstream, x, dx);
                    send(self, &mut upstream, b, db);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    let av = self.value(a).data();
                    let bv = self.value(b).data();
                    // da = g . b^T ; db = a^T . g
                    let bt = transpose_raw(bv, k, n);
                    let da = matmul_raw(&g, &bt, m, n, k);
                    let at = transpose_raw(av, m, k);
                    let db = matmul_raw(&at, &g, k, m, n);
                    send(self, &mut upstream, a, da);
                    send(self, &mut upstream, b, db);
                }
                Op::Transpose(x) => {
                    let (c, r) = (self.shape(Var(idx))[0], self.shape(Var(idx))[1]);
                    send(self, &mut upstream, x, transpose_raw(&g, c, r));
                }
                Op::Tanh(x) => {
                    let y = self.value(Var(idx)).data();
                    let dx = zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    send(self, &mut upstream, x, dx);
                }
                Op::Softmax { x, axis } => {
                    let shape = self.shape(Var(idx)).to_vec();
                    let y = self.value(Var(idx)).data().to_vec();
                    let mut dx = vec![0.0; y.len()];
                    for_each_lane(&shape, axis, |lane| {
                        let dot: f64 = lane.iter().map(|&i| g[i] * y[i]).sum();
                        for &i in lane {
                            dx[i] = y[i] * (g[i] - dot);
                        }
                    });
                    send(self, &mut upstream, x, dx);
                }
                Op::LogSoftmax { x, axis } => {
                    let shape = self.shape(Var(idx)).to_vec();
                    let y = self.value(Var(idx)).data().to_vec();
                    let mut dx = vec![0.0; y.len()];
                    for_each_lane(&shape, axis, |lane| {
                        let gsum: f64 = lane.iter().map(|&i| g[i]).sum();
                        for &i in lane {
                            dx[i] = g[i] - y[i].exp() * gsum;
                        }
                    });
                    send(self, &mut upstream, x, dx);
                }
                Op::ReduceMean { x, axis } => {
                    let shape = self.shape(x).to_vec();
                    let n = shape[axis] as f64;
                    let mut dx = vec![0.0; self.value(x).numel()];
                    let mut out_i = 0;
                    for_each_lane(&shape, axis, |lane| {
                        for &i in lane {
                            dx[i] = g[out_i] / n;
                        }
                        out_i += 1;
                    });
                    send(self, &mut upstream, x, dx);
                }
                Op::ReduceSum { x, axis } => {
                    let shape = self.shape(x).to_vec();
                    let mut dx = vec![0.0; self.value(x).numel()];
                    let mut out_i = 0;
                    for_each_lane(&shape, axis, |lane| {
                        for &i in lane {
                            dx[i] = g[out_i];
                        }
                        out_i += 1;
                    });
                    send(self, &mut upstream, x, dx);
                }
                Op::GatherRows { x, ids } => {
                    let row = self.shape(x)[1..].iter().product::<usize>().max(1);
                    let mut dx = vec![0.0; self.value(x).numel()];
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..row {
                            dx[id * row + j] += g[k * row + j];
                        }
                    }
                    send(self, &mut upstream, x, dx);
                }
                Op::TakePerRow { x, ids } => {
                    let cols = self.shape(x)[1];
                    let mut dx = vec![0.0; self.value(x).numel()];
                    for (i, &j) in ids.iter().enumerate() {
                        dx[i * cols + j] += g[i];
                    }
                    send(self, &mut upstream, x, dx);
                }
                Op::SliceRows { x, start, len } => {
                    let row = self.shape(x)[1..].iter().product::<usize>().max(1);
                    let mut dx = vec![0.0; self.value(x).numel()];
                    dx[start * row..(start + len) * row].copy_from_slice(&g);
                    send(self, &mut upstream, x, dx);
                }
                Op::SliceCols { x, start, len } => {
                    let (rows, cols) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        dx[i * cols + start..i * cols + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    send(self, &mut upstream, x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in &parts {
                        let n = self.value(p).numel();
                        let dp = g[offset..offset + n].to_vec();
                        offset += n;
                        send(self, &mut upstream, p, dp);
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = self.shape(Var(idx))[0];
                    let total = self.shape(Var(idx))[1];
                    let mut offset = 0;
                    for &p in &parts {
                        let w = self.shape(p)[1];
                        let mut dp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        send(self, &mut upstream, p, dp);
                    }
                }
                Op::LayerNorm { x, eps } => {
                    let shape = self.shape(x).to_vec();
                    let cols = *shape.last().unwrap();
                    let xv = self.value(x).data().to_vec();
                    let yv = self.value(Var(idx)).data().to_vec();
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..xv.len() / cols {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let yrow = &yv[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = grow.iter().sum::<f64>() / cols as f64;
                        let gydot =
                            grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            dx[r * cols + j] = inv * (grow[j] - gmean - yrow[j] * gydot);
                        }
                    }
                    send(self, &mut upstream, x, dx);
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRowVec(..) => "add_row_vec",
        Op::MulRowVec(..) => "mul_row_vec",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Tanh(..) => "tanh",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::ReduceMean { .. } => "reduce_mean",
        Op::ReduceSum { .. } => "reduce_sum",
        Op::GatherRows { .. } => "gather_rows",
        Op::TakePerRow { .. } => "take_per_row",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::LayerNorm { .. } => "layer_norm",
    }
}
