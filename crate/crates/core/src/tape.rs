//! Wengert tape: eager f32 ops with optional operation recording for
//! reverse-mode gradients.
//!
//! Every op computes immediately and stores its output in the tape arena.
//! When recording is on, the op is also logged so `backward` can replay the
//! log in reverse and accumulate exact vector-Jacobian products. With
//! recording off the same numeric kernels run in the same order, so values
//! are bit-identical between the two modes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Buf {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Buf {
    fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// out = a @ b
    MatMul { a: TensorId, b: TensorId, out: TensorId },
    /// out = a @ b^T
    MatMulBT { a: TensorId, b: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Scale { x: TensorId, c: f32, out: TensorId },
    Copy { x: TensorId, out: TensorId },
    Transpose { x: TensorId, out: TensorId },
    /// out[i] = table[ids[i]]
    GatherRows { table: TensorId, ids: Vec<usize>, out: TensorId },
    /// out = x[start..start+len] (rows)
    SliceRows { x: TensorId, start: usize, out: TensorId },
    /// Row-wise softmax with max subtraction.
    SoftmaxRows { x: TensorId, out: TensorId },
    /// Per row: x * gain / sqrt(mean(x^2) + eps)
    RmsNorm { x: TensorId, gain: TensorId, eps: f32, out: TensorId },
    Silu { x: TensorId, out: TensorId },
    /// Mean negative log softmax probability over positions with a target.
    CrossEntropy { logits: TensorId, targets: Vec<Option<usize>>, out: TensorId },
    /// Scalar pick out = x[row, col].
    Entry { x: TensorId, row: usize, col: usize, out: TensorId },
    SumAll { x: TensorId, out: TensorId },
    /// out = x with out[rows[i], :] = patch[i, :]
    OverwriteRows { x: TensorId, patch: TensorId, rows: Vec<usize>, out: TensorId },
}

pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
    recording: bool,
    backward_done: bool,
}

impl Tape {
    pub fn new(recording: bool) -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            recording,
            backward_done: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    // ---- buffers ---------------------------------------------------------

    fn push_buf(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> TensorId {
        debug_assert_eq!(rows * cols, data.len());
        let id = TensorId(self.bufs.len());
        self.bufs.push(Buf { rows, cols, data });
        self.grads.push(None);
        id
    }

    fn record(&mut self, op: Op) {
        if self.recording {
            self.ops.push(op);
        }
    }

    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let (r, c) = t.dims();
        self.push_buf(r, c, t.data().to_vec())
    }

    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> TensorId {
        self.push_buf(rows, cols, data)
    }

    pub fn scalar(&mut self, v: f32) -> TensorId {
        self.push_buf(1, 1, vec![v])
    }

    pub fn dims(&self, id: TensorId) -> (usize, usize) {
        let b = &self.bufs[id.0];
        (b.rows, b.cols)
    }

    pub fn value(&self, id: TensorId) -> &[f32] {
        &self.bufs[id.0].data
    }

    pub fn value_scalar(&self, id: TensorId) -> f32 {
        self.bufs[id.0].data[0]
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        let b = &self.bufs[id.0];
        Tensor::matrix(b.rows, b.cols, b.data.clone()).expect("buffer shape consistent")
    }

    fn check_id(&self, id: TensorId) -> Result<()> {
        if id.0 >= self.bufs.len() {
            return Err(Error::Usage(format!(
                "tensor id {} not on this tape",
                id.0
            )));
        }
        Ok(())
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::DimMismatch {
                op: "matmul",
                left: vec![m, ka],
                right: vec![kb, n],
            });
        }
        let out_data = matmul_raw(&self.bufs[a.0].data, &self.bufs[b.0].data, m, ka, n);
        let out = self.push_buf(m, n, out_data);
        self.record(Op::MatMul { a, b, out });
        Ok(out)
    }

    /// a @ b^T where a: [m, k] and b: [n, k].
    pub fn matmul_bt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims(a);
        let (n, kb) = self.dims(b);
        if ka != kb {
            return Err(Error::DimMismatch {
                op: "matmul_bt",
                left: vec![m, ka],
                right: vec![n, kb],
            });
        }
        let out_data = matmul_bt_raw(&self.bufs[a.0].data, &self.bufs[b.0].data, m, ka, n);
        let out = self.push_buf(m, n, out_data);
        self.record(Op::MatMulBT { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::DimMismatch {
                op: "add",
                left: vec![ra, ca],
                right: vec![rb, cb],
            });
        }
        let data = zip_map(&self.bufs[a.0].data, &self.bufs[b.0].data, |x, y| x + y);
        let out = self.push_buf(ra, ca, data);
        self.record(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::DimMismatch {
                op: "sub",
                left: vec![ra, ca],
                right: vec![rb, cb],
            });
        }
        let data = zip_map(&self.bufs[a.0].data, &self.bufs[b.0].data, |x, y| x - y);
        let out = self.push_buf(ra, ca, data);
        self.record(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: TensorId, c: f32) -> TensorId {
        let (r, cc) = self.dims(x);
        let data = self.bufs[x.0].data.iter().map(|v| v * c).collect();
        let out = self.push_buf(r, cc, data);
        self.record(Op::Scale { x, c, out });
        out
    }

    pub fn copy(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.dims(x);
        let data = self.bufs[x.0].data.clone();
        let out = self.push_buf(r, c, data);
        self.record(Op::Copy { x, out });
        out
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.dims(x);
        let data = transpose_raw(&self.bufs[x.0].data, r, c);
        let out = self.push_buf(c, r, data);
        self.record(Op::Transpose { x, out });
        out
    }

    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.dims(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather row",
                    got: i,
                    limit: rows,
                });
            }
            data.extend_from_slice(&self.bufs[table.0].data[i * cols..(i + 1) * cols]);
        }
        let out = self.push_buf(ids.len(), cols, data);
        self.record(Op::GatherRows {
            table,
            ids: ids.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.dims(x);
        if start + len > rows {
            return Err(Error::IndexOutOfRange {
                what: "row slice end",
                got: start + len,
                limit: rows,
            });
        }
        let data = self.bufs[x.0].data[start * cols..(start + len) * cols].to_vec();
        let out = self.push_buf(len, cols, data);
        self.record(Op::SliceRows { x, start, out });
        Ok(out)
    }

    /// Softmax along `axis`. Axis 1 normalizes each row (the last axis for
    /// matrices); axis 0 normalizes each column. Rank-1 input uses axis 0 or
    /// 1 interchangeably (single row).
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let (r, _) = self.dims(x);
        match axis {
            1 => Ok(self.softmax_rows(x)),
            0 if r == 1 => Ok(self.softmax_rows(x)),
            0 => {
                let xt = self.transpose(x);
                let st = self.softmax_rows(xt);
                Ok(self.transpose(st))
            }
            _ => Err(Error::InvalidParameter(format!(
                "softmax axis {axis} invalid for rank-2 tensor"
            ))),
        }
    }

    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.dims(x);
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.bufs[x.0].data[i * c..(i + 1) * c];
            softmax_row_raw(row, &mut data[i * c..(i + 1) * c]);
        }
        let out = self.push_buf(r, c, data);
        self.record(Op::SoftmaxRows { x, out });
        out
    }

    pub fn rmsnorm(&mut self, x: TensorId, gain: TensorId, eps: f32) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        let (gr, gc) = self.dims(gain);
        if gr * gc != c {
            return Err(Error::DimMismatch {
                op: "rmsnorm",
                left: vec![r, c],
                right: vec![gr, gc],
            });
        }
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.bufs[x.0].data[i * c..(i + 1) * c];
            rmsnorm_row_raw(row, &self.bufs[gain.0].data, eps, &mut data[i * c..(i + 1) * c]);
        }
        let out = self.push_buf(r, c, data);
        self.record(Op::RmsNorm { x, gain, eps, out });
        Ok(out)
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.dims(x);
        let data = self.bufs[x.0]
            .data
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let out = self.push_buf(r, c, data);
        self.record(Op::Silu { x, out });
        out
    }

    /// Cross-entropy averaged over the positions that carry a target.
    /// Rows of `logits` index positions; `targets[i]` is the class index for
    /// row i or `None` to exclude the row from the loss.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[Option<usize>]) -> Result<TensorId> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::DimMismatch {
                op: "cross_entropy",
                left: vec![r, c],
                right: vec![targets.len()],
            });
        }
        for t in targets.iter().flatten() {
            if *t >= c {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    got: *t,
                    limit: c,
                });
            }
        }
        let n_valid = targets.iter().filter(|t| t.is_some()).count();
        if n_valid == 0 {
            return Err(Error::Usage(
                "cross_entropy requires at least one target".into(),
            ));
        }
        let mut total = 0.0f32;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = &self.bufs[logits.0].data[i * c..(i + 1) * c];
                total += nll_raw(row, *t);
            }
        }
        let out = self.push_buf(1, 1, vec![total / n_valid as f32]);
        self.record(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn entry(&mut self, x: TensorId, row: usize, col: usize) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        if row >= r || col >= c {
            return Err(Error::IndexOutOfRange {
                what: "entry",
                got: row * c + col,
                limit: r * c,
            });
        }
        let v = self.bufs[x.0].data[row * c + col];
        let out = self.push_buf(1, 1, vec![v]);
        self.record(Op::Entry { x, row, col, out });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let v: f32 = self.bufs[x.0].data.iter().sum();
        let out = self.push_buf(1, 1, vec![v]);
        self.record(Op::SumAll { x, out });
        out
    }

    pub fn overwrite_rows(
        &mut self,
        x: TensorId,
        patch: TensorId,
        rows: &[usize],
    ) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        let (pr, pc) = self.dims(patch);
        if pc != c || pr != rows.len() {
            return Err(Error::DimMismatch {
                op: "overwrite_rows",
                left: vec![r, c],
                right: vec![pr, pc],
            });
        }
        let mut data = self.bufs[x.0].data.clone();
        for (i, &row) in rows.iter().enumerate() {
            if row >= r {
                return Err(Error::IndexOutOfRange {
                    what: "overwrite row",
                    got: row,
                    limit: r,
                });
            }
            data[row * c..(row + 1) * c]
                .copy_from_slice(&self.bufs[patch.0].data[i * c..(i + 1) * c]);
        }
        let out = self.push_buf(r, c, data);
        self.record(Op::OverwriteRows {
            x,
            patch,
            rows: rows.to_vec(),
            out,
        });
        Ok(out)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Every recorded tensor receives
    /// the exact gradient of the root; tensors the root does not depend on
    /// read back as zero. A tape supports a single backward pass.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        self.check_id(root)?;
        if !self.recording {
            return Err(Error::Usage(
                "backward on a non-recording tape".into(),
            ));
        }
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; build a new tape to differentiate again".into(),
            ));
        }
        if self.bufs[root.0].numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got {}x{}",
                self.bufs[root.0].rows, self.bufs[root.0].cols
            )));
        }
        self.backward_done = true;
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..self.ops.len()).rev() {
            let op = self.ops[idx].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    fn accum(&mut self, id: TensorId, grad: &[f32]) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => self.grads[id.0] = Some(grad.to_vec()),
        }
    }

    fn take_out_grad(&self, out: TensorId) -> Option<Vec<f32>> {
        self.grads[out.0].clone()
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::MatMul { a, b, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let (m, k) = self.dims(*a);
                    let (_, n) = self.dims(*b);
                    // dA = d @ B^T
                    let da = matmul_bt_raw(&d, &self.bufs[b.0].data, m, n, k);
                    self.accum(*a, &da);
                    // dB = A^T @ d
                    let at = transpose_raw(&self.bufs[a.0].data, m, k);
                    let db = matmul_raw(&at, &d, k, m, n);
                    self.accum(*b, &db);
                }
            }
            Op::MatMulBT { a, b, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let (m, k) = self.dims(*a);
                    let (n, _) = self.dims(*b);
                    // out = A @ B^T; dA = d @ B, dB = d^T @ A
                    let da = matmul_raw(&d, &self.bufs[b.0].data, m, n, k);
                    self.accum(*a, &da);
                    let dt = transpose_raw(&d, m, n);
                    let db = matmul_raw(&dt, &self.bufs[a.0].data, n, m, k);
                    self.accum(*b, &db);
                }
            }
            Op::Add { a, b, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accum(*a, &d);
                    self.accum(*b, &d);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accum(*a, &d);
                    let neg: Vec<f32> = d.iter().map(|v| -v).collect();
                    self.accum(*b, &neg);
                }
            }
            Op::Scale { x, c, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let dx: Vec<f32> = d.iter().map(|v| v * c).collect();
                    self.accum(*x, &dx);
                }
            }
            Op::Copy { x, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accum(*x, &d);
                }
            }
            Op::Transpose { x, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let (r, c) = self.dims(*x);
                    let dx = transpose_raw(&d, c, r);
                    self.accum(*x, &dx);
                }
            }
            Op::GatherRows { table, ids, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let (rows, cols) = self.dims(*table);
                    let mut dt = vec![0.0f32; rows * cols];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[id * cols + j] += d[i * cols + j];
                        }
                    }
                    self.accum(*table, &dt);
                }
            }
            Op::SliceRows { x, start, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let (rows, cols) = self.dims(*x);
                    let (orows, _) = self.dims(*out);
                    let mut dx = vec![0.0f32; rows * cols];
                    dx[start * cols..(start + orows) * cols].copy_from_slice(&d);
                    self.accum(*x, &dx);
                }
            }
            Op::SoftmaxRows { x, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let (r, c) = self.dims(*x);
                    let s = &self.bufs[out.0].data;
                    let mut dx = vec![0.0f32; r * c];
                    for i in 0..r {
                        let srow = &s[i * c..(i + 1) * c];
                        let drow = &d[i * c..(i + 1) * c];
                        let dot: f32 = srow.iter().zip(drow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] = srow[j] * (drow[j] - dot);
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::RmsNorm { x, gain, eps, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let (r, c) = self.dims(*x);
                    let xd = self.bufs[x.0].data.clone();
                    let gd = self.bufs[gain.0].data.clone();
                    let mut dx = vec![0.0f32; r * c];
                    let mut dgain = vec![0.0f32; c];
                    let n = c as f32;
                    for i in 0..r {
                        let xr = &xd[i * c..(i + 1) * c];
                        let dr = &d[i * c..(i + 1) * c];
                        let ms = xr.iter().map(|v| v * v).sum::<f32>() / n;
                        let rms = (ms + eps).sqrt();
                        // dot = sum_j d_j * gain_j * x_j
                        let dot: f32 = (0..c).map(|j| dr[j] * gd[j] * xr[j]).sum();
                        let inv = 1.0 / rms;
                        let cub = inv / (rms * rms);
                        for j in 0..c {
                            dx[i * c + j] = dr[j] * gd[j] * inv - xr[j] * dot * cub / n;
                            dgain[j] += dr[j] * xr[j] * inv;
                        }
                    }
                    self.accum(*x, &dx);
                    self.accum(*gain, &dgain);
                }
            }
            Op::Silu { x, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let dx: Vec<f32> = self.bufs[x.0]
                        .data
                        .iter()
                        .zip(&d)
                        .map(|(&v, &dv)| {
                            let s = sigmoid(v);
                            dv * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    self.accum(*x, &dx);
                }
            }
            Op::CrossEntropy { logits, targets, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let scalar = d[0];
                    let (r, c) = self.dims(*logits);
                    let n_valid = targets.iter().filter(|t| t.is_some()).count() as f32;
                    let ld = self.bufs[logits.0].data.clone();
                    let mut dl = vec![0.0f32; r * c];
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            let row = &ld[i * c..(i + 1) * c];
                            let drow = &mut dl[i * c..(i + 1) * c];
                            softmax_row_raw(row, drow);
                            drow[*t] -= 1.0;
                            for v in drow.iter_mut() {
                                *v *= scalar / n_valid;
                            }
                        }
                    }
                    self.accum(*logits, &dl);
                }
            }
            Op::Entry { x, row, col, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let (r, c) = self.dims(*x);
                    let mut dx = vec![0.0f32; r * c];
                    dx[row * c + col] = d[0];
                    self.accum(*x, &dx);
                }
            }
            Op::SumAll { x, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let n = self.bufs[x.0].numel();
                    let dx = vec![d[0]; n];
                    self.accum(*x, &dx);
                }
            }
            Op::OverwriteRows { x, patch, rows, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let (r, c) = self.dims(*x);
                    let mut dx = d.clone();
                    let mut dp = vec![0.0f32; rows.len() * c];
                    for (i, &row) in rows.iter().enumerate() {
                        dp[i * c..(i + 1) * c].copy_from_slice(&d[row * c..(row + 1) * c]);
                        dx[row * c..(row + 1) * c].fill(0.0);
                    }
                    debug_assert_eq!(dx.len(), r * c);
                    self.accum(*x, &dx);
                    self.accum(*patch, &dp);
                }
            }
        }
    }

    /// Gradient of the backward root with respect to `id`. Zeros when no
    /// gradient flowed to the tensor.
    pub fn grad(&self, id: TensorId) -> Tensor {
        let b = &self.bufs[id.0];
        let data = match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; b.numel()],
        };
        Tensor::matrix(b.rows, b.cols, data).expect("gradient shape consistent")
    }

    pub fn grad_slice(&self, id: TensorId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    // ---- replay ----------------------------------------------------------

    /// Recompute every recorded op from its stored inputs and check the output
    /// buffers match bit-exactly.
    pub fn replay_verify(&self) -> bool {
        for op in &self.ops {
            let (out, fresh) = match op {
                Op::MatMul { a, b, out } => {
                    let (m, k) = self.dims(*a);
                    let (_, n) = self.dims(*b);
                    (*out, matmul_raw(&self.bufs[a.0].data, &self.bufs[b.0].data, m, k, n))
                }
                Op::MatMulBT { a, b, out } => {
                    let (m, k) = self.dims(*a);
                    let (n, _) = self.dims(*b);
                    (*out, matmul_bt_raw(&self.bufs[a.0].data, &self.bufs[b.0].data, m, k, n))
                }
                Op::Add { a, b, out } => (
                    *out,
                    zip_map(&self.bufs[a.0].data, &self.bufs[b.0].data, |x, y| x + y),
                ),
                Op::Sub { a, b, out } => (
                    *out,
                    zip_map(&self.bufs[a.0].data, &self.bufs[b.0].data, |x, y| x - y),
                ),
                Op::Scale { x, c, out } => {
                    (*out, self.bufs[x.0].data.iter().map(|v| v * c).collect())
                }
                Op::Copy { x, out } => (*out, self.bufs[x.0].data.clone()),
                Op::Transpose { x, out } => {
                    let (r, c) = self.dims(*x);
                    (*out, transpose_raw(&self.bufs[x.0].data, r, c))
                }
                Op::GatherRows { table, ids, out } => {
                    let (_, cols) = self.dims(*table);
                    let mut data = Vec::with_capacity(ids.len() * cols);
                    for &i in ids {
                        data.extend_from_slice(&self.bufs[table.0].data[i * cols..(i + 1) * cols]);
                    }
                    (*out, data)
                }
                Op::SliceRows { x, start, out } => {
                    let (_, cols) = self.dims(*x);
                    let (len, _) = self.dims(*out);
                    (
                        *out,
                        self.bufs[x.0].data[start * cols..(start + len) * cols].to_vec(),
                    )
                }
                Op::SoftmaxRows { x, out } => {
                    let (r, c) = self.dims(*x);
                    let mut data = vec![0.0f32; r * c];
                    for i in 0..r {
                        softmax_row_raw(
                            &self.bufs[x.0].data[i * c..(i + 1) * c],
                            &mut data[i * c..(i + 1) * c],
                        );
                    }
                    (*out, data)
                }
                Op::RmsNorm { x, gain, eps, out } => {
                    let (r, c) = self.dims(*x);
                    let mut data = vec![0.0f32; r * c];
                    for i in 0..r {
                        rmsnorm_row_raw(
                            &self.bufs[x.0].data[i * c..(i + 1) * c],
                            &self.bufs[gain.0].data,
                            *eps,
                            &mut data[i * c..(i + 1) * c],
                        );
                    }
                    (*out, data)
                }
                Op::Silu { x, out } => (
                    *out,
                    self.bufs[x.0].data.iter().map(|&v| v * sigmoid(v)).collect(),
                ),
                Op::CrossEntropy { logits, targets, out } => {
                    let (_, c) = self.dims(*logits);
                    let n_valid = targets.iter().filter(|t| t.is_some()).count() as f32;
                    let mut total = 0.0f32;
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            total += nll_raw(&self.bufs[logits.0].data[i * c..(i + 1) * c], *t);
                        }
                    }
                    (*out, vec![total / n_valid])
                }
                Op::Entry { x, row, col, out } => {
                    let (_, c) = self.dims(*x);
                    (*out, vec![self.bufs[x.0].data[row * c + col]])
                }
                Op::SumAll { x, out } => (*out, vec![self.bufs[x.0].data.iter().sum()]),
                Op::OverwriteRows { x, patch, rows, out } => {
                    let (_, c) = self.dims(*x);
                    let mut data = self.bufs[x.0].data.clone();
                    for (i, &row) in rows.iter().enumerate() {
                        data[row * c..(row + 1) * c]
                            .copy_from_slice(&self.bufs[patch.0].data[i * c..(i + 1) * c]);
                    }
                    (*out, data)
                }
            };
            if self.bufs[out.0].data != fresh {
                return false;
            }
        }
        true
    }
}

// ---- raw kernels ----------------------------------------------------------

pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
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
    out
}

pub(crate) fn matmul_bt_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub(crate) fn softmax_row_raw(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn rmsnorm_row_raw(row: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(row).zip(gain) {
        *o = v * inv * g;
    }
}

/// -log softmax(row)[target], computed with max subtraction.
pub(crate) fn nll_raw(row: &[f32], target: usize) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let logsum = row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
    -(row[target] - max - logsum)
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new(false);
        let ident = tape.leaf(&Tensor::identity(3));
        let m = tensor(3, 3, (0..9).map(|v| v as f32).collect());
        let mid = tape.leaf(&m);
        let out = tape.matmul(ident, mid).unwrap();
        assert_eq!(tape.value(out), m.data());
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new(false);
        let z = tape.leaf(&Tensor::zeros(2, 4));
        let m = tape.leaf_matrix(4, 5, (0..20).map(|v| v as f32 - 7.0).collect());
        let out = tape.matmul(z, m).unwrap();
        assert_eq!(tape.dims(out), (2, 5));
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new(false);
        let a = tape.leaf(&Tensor::zeros(2, 3));
        let b = tape.leaf(&Tensor::zeros(4, 5));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_zero_vector() {
        let mut tape = Tape::new(false);
        let x = tape.leaf(&Tensor::vector(vec![0.0; 7]));
        let s = tape.softmax(x, 1).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 7.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_large_logit_no_overflow() {
        let mut tape = Tape::new(false);
        let x = tape.leaf(&Tensor::vector(vec![1000.0, 0.0]));
        let s = tape.softmax(x, 1).unwrap();
        let v = tape.value(s);
        assert!(v[0].is_finite() && v[1].is_finite());
        assert!((v[0] - 1.0).abs() < 1e-6);
        assert!(v[1] < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new(false);
        let x = tape.leaf_matrix(3, 4, (0..12).map(|v| (v as f32).sin() * 3.0).collect());
        let s = tape.softmax(x, 1).unwrap();
        for i in 0..3 {
            let sum: f32 = tape.value(s)[i * 4..(i + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut tape = Tape::new(false);
        let x = tape.leaf_matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s);
        for j in 0..3 {
            let sum = v[j] + v[3 + j];
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn rmsnorm_unit_gain_rms_one_unchanged() {
        let mut tape = Tape::new(false);
        // RMS of [1, -1, 1, -1] is exactly 1.
        let x = tape.leaf(&Tensor::vector(vec![1.0, -1.0, 1.0, -1.0]));
        let g = tape.leaf(&Tensor::vector(vec![1.0; 4]));
        let y = tape.rmsnorm(x, g, 1e-6).unwrap();
        for (a, b) in tape.value(y).iter().zip(tape.value(x)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsnorm_zero_vector_stays_zero() {
        let mut tape = Tape::new(false);
        let x = tape.leaf(&Tensor::vector(vec![0.0; 8]));
        let g = tape.leaf(&Tensor::vector(vec![1.0; 8]));
        let y = tape.rmsnorm(x, g, 1e-6).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::new(true);
        let logits = tape.leaf(&Tensor::zeros(1, 4));
        let loss = tape.cross_entropy(logits, &[Some(2)]).unwrap();
        assert!((tape.value_scalar(loss) - 4.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_hit_near_zero() {
        let mut tape = Tape::new(false);
        let mut row = vec![0.0f32; 5];
        row[3] = 30.0;
        let logits = tape.leaf_matrix(1, 5, row);
        let loss = tape.cross_entropy(logits, &[Some(3)]).unwrap();
        assert!(tape.value_scalar(loss) < 1e-6);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new(false);
        let logits = tape.leaf(&Tensor::zeros(1, 4));
        assert!(matches!(
            tape.cross_entropy(logits, &[Some(4)]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new(true);
        let x = tape.leaf_matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0; 6]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new(true);
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_root_must_be_scalar_and_on_tape() {
        let mut tape = Tape::new(true);
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
        let mut other = Tape::new(true);
        let y = other.leaf(&Tensor::scalar(1.0));
        let _ = y;
        assert!(tape.backward(TensorId(99)).is_err());
    }

    #[test]
    fn unvisited_tensor_grad_is_zero() {
        let mut tape = Tape::new(true);
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(&Tensor::vector(vec![5.0]));
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).data(), &[0.0]);
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // y = sum(2x) + sum(3x) => dy/dx = 5.
        let mut tape = Tape::new(true);
        let x = tape.leaf(&Tensor::vector(vec![1.0, 4.0]));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let c = tape.add(a, b).unwrap();
        let s = tape.sum_all(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[5.0, 5.0]);
    }

    #[test]
    fn overwrite_rows_blocks_gradient_through_replaced_rows() {
        let mut tape = Tape::new(true);
        let x = tape.leaf_matrix(3, 2, vec![1.0; 6]);
        let patch = tape.leaf_matrix(1, 2, vec![9.0, 9.0]);
        let y = tape.overwrite_rows(x, patch, &[1]).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(tape.grad(patch).data(), &[1.0, 1.0]);
    }

    #[test]
    fn replay_reproduces_outputs_bit_exactly() {
        let mut tape = Tape::new(true);
        let x = tape.leaf_matrix(3, 3, (0..9).map(|v| (v as f32).cos()).collect());
        let g = tape.leaf(&Tensor::vector(vec![1.1, 0.9, 1.0]));
        let n = tape.rmsnorm(x, g, 1e-6).unwrap();
        let s = tape.softmax_rows(n);
        let y = tape.matmul(s, x).unwrap();
        let _ = tape.sum_all(y);
        assert!(tape.replay_verify());
    }

    #[test]
    fn recording_flag_does_not_change_values() {
        let data: Vec<f32> = (0..12).map(|v| (v as f32 * 0.7).sin()).collect();
        let run = |rec: bool| -> Vec<f32> {
            let mut tape = Tape::new(rec);
            let x = tape.leaf_matrix(3, 4, data.clone());
            let g = tape.leaf(&Tensor::vector(vec![1.0; 4]));
            let n = tape.rmsnorm(x, g, 1e-6).unwrap();
            let s = tape.softmax_rows(n);
            tape.value(s).to_vec()
        };
        assert_eq!(run(true), run(false));
    }
}
