use std::sync::atomic::{AtomicU64, Ordering};

use super::scan::{scan_backward, scan_forward, ScanDims, ScanRefs};
use crate::error::{ensure, Error, Result};
use crate::numerics::{axpy, dot, matmul_nt_into, Matrix};
use crate::recurrence::sigmoid;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Inputs of [`Tape::delta_product_scan`]. All activations are
/// `(batch * seq_len) x (heads * dim)`; betas and gate are
/// `(batch * seq_len) x heads`.
#[derive(Debug, Clone)]
pub struct ScanInputs {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub betas: Vec<Var>,
    pub gate: Option<Var>,
    pub query: Var,
    pub dims: ScanDims,
}

// The set of primitives is closed: anything not listed here cannot be put on
// a tape, so there is no runtime "unknown primitive" path.
#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Sigmoid(usize),
    Sum(usize),
    RmsNorm {
        x: usize,
        scale: usize,
        group: usize,
        eps: f64,
    },
    L2Normalize {
        x: usize,
        group: usize,
    },
    CausalConv {
        x: usize,
        kernel: usize,
        seq_len: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Scan {
        keys: Vec<usize>,
        values: Vec<usize>,
        betas: Vec<usize>,
        gate: Option<usize>,
        query: usize,
        dims: ScanDims,
        states: Option<Vec<f64>>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records primitive operations and their values for one reverse sweep.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grad_enabled: bool,
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
            grad_enabled: true,
        }
    }

    /// A tape for forward evaluation only; the scan does not keep its states
    /// and [`Tape::backward`] is refused.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        ensure!(
            v.tape == self.id,
            "variable belongs to tape {} but was used on tape {}",
            v.tape,
            self.id
        );
        Ok(v.idx)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn val(&self, i: usize) -> &Matrix {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> Result<&Matrix> {
        Ok(self.val(self.idx(v)?))
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let value = self.val(a).matmul(self.val(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let value = self.val(a).transpose();
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let value = self.val(a).add(self.val(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        ensure!(
            self.val(a).shape() == self.val(b).shape(),
            "mul shape mismatch {:?} vs {:?}",
            self.val(a).shape(),
            self.val(b).shape()
        );
        let value = self.val(a).zip_map(self.val(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let value = self.val(a).scale(c);
        Ok(self.push(value, Op::Scale(a, c)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let value = self.val(a).map(|x| x * sigmoid(x));
        Ok(self.push(value, Op::Silu(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let value = self.val(a).map(sigmoid);
        Ok(self.push(value, Op::Sigmoid(a)))
    }

    /// Sum of all entries as a 1x1 matrix.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let s = self.val(a).data().iter().sum::<f64>();
        Ok(self.push(Matrix::filled(1, 1, s), Op::Sum(a)))
    }

    /// `scale * x / sqrt(eps + mean(x^2))` over consecutive column groups of
    /// width `group`; `scale` is `1 x cols`.
    pub fn rms_norm(&mut self, x: Var, scale: Var, group: usize, eps: f64) -> Result<Var> {
        let (x, scale) = (self.idx(x)?, self.idx(scale)?);
        let (rows, cols) = self.val(x).shape();
        ensure!(
            group >= 1 && cols % group == 0,
            "rms_norm group {group} does not divide {cols} columns"
        );
        ensure!(
            self.val(scale).shape() == (1, cols),
            "rms_norm scale must be 1x{cols}, got {:?}",
            self.val(scale).shape()
        );
        let xs = self.val(x).data();
        let a = self.val(scale).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for g0 in (0..cols).step_by(group) {
                let seg = &xs[r * cols + g0..r * cols + g0 + group];
                let inv = 1.0 / (eps + dot(seg, seg) / group as f64).sqrt();
                for c in 0..group {
                    out[r * cols + g0 + c] = a[g0 + c] * seg[c] * inv;
                }
            }
        }
        let value = Matrix::from_raw(rows, cols, out);
        Ok(self.push(value, Op::RmsNorm { x, scale, group, eps }))
    }

    /// Divides each column group of width `group` by its Euclidean norm.
    /// Groups with norm below `1e-12` are a numerical error.
    pub fn l2_normalize(&mut self, x: Var, group: usize) -> Result<Var> {
        let x = self.idx(x)?;
        let (rows, cols) = self.val(x).shape();
        ensure!(
            group >= 1 && cols % group == 0,
            "l2_normalize group {group} does not divide {cols} columns"
        );
        let mut out = self.val(x).data().to_vec();
        for (i, seg) in out.chunks_mut(group).enumerate() {
            let norm = dot(seg, seg).sqrt();
            if !(norm >= 1e-12) {
                return Err(Error::numerical(format!(
                    "vector norm {norm:e} below 1e-12 before normalization (row {}, group {})",
                    i / (cols / group),
                    i % (cols / group)
                )));
            }
            seg.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(self.push(Matrix::from_raw(rows, cols, out), Op::L2Normalize { x, group }))
    }

    /// Causal depthwise convolution along time. `x` holds `batch` sequences
    /// of `seq_len` rows each; `kernel` is `cols x width` and its last column
    /// multiplies the current token. Positions before the start are zero.
    pub fn causal_conv(&mut self, x: Var, kernel: Var, seq_len: usize) -> Result<Var> {
        let (x, kernel) = (self.idx(x)?, self.idx(kernel)?);
        let (rows, cols) = self.val(x).shape();
        let (kc, width) = self.val(kernel).shape();
        ensure!(kc == cols, "conv kernel has {kc} channels, input has {cols}");
        ensure!(
            seq_len >= 1 && rows % seq_len == 0,
            "conv seq_len {seq_len} does not divide {rows} rows"
        );
        let xs = self.val(x).data();
        let w = self.val(kernel).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let t = r % seq_len;
            for s in 0..width.min(t + 1) {
                // tap (width - 1 - s) reads token t - s
                let src = &xs[(r - s) * cols..(r - s + 1) * cols];
                let tap = width - 1 - s;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    dst[c] += w[c * width + tap] * src[c];
                }
            }
        }
        let value = Matrix::from_raw(rows, cols, out);
        Ok(self.push(value, Op::CausalConv { x, kernel, seq_len }))
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let table = self.idx(table)?;
        let (v, l) = self.val(table).shape();
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("token id {bad} out of vocabulary of size {v}")));
        }
        let mut out = Vec::with_capacity(ids.len() * l);
        for &i in ids {
            out.extend_from_slice(self.val(table).row(i));
        }
        let value = Matrix::from_raw(ids.len(), l, out);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head DeltaProduct recurrence from a zero state; returns the
    /// readouts `H_t^T q_t` as a `(batch * seq_len) x (heads * value_dim)`
    /// matrix.
    pub fn delta_product_scan(&mut self, s: &ScanInputs) -> Result<Var> {
        let dims = s.dims;
        ensure!(!s.keys.is_empty(), "scan needs at least one factor");
        ensure!(
            s.values.len() == s.keys.len() && s.betas.len() == s.keys.len(),
            "scan needs as many values and betas as keys"
        );
        let rows = dims.batch * dims.seq_len;
        let kw = dims.heads * dims.key_dim;
        let vw = dims.heads * dims.value_dim;
        let idx = |vars: &[Var]| vars.iter().map(|v| self.idx(*v)).collect::<Result<Vec<_>>>();
        let keys = idx(&s.keys)?;
        let values = idx(&s.values)?;
        let betas = idx(&s.betas)?;
        let gate = s.gate.map(|g| self.idx(g)).transpose()?;
        let query = self.idx(s.query)?;
        let check = |i: usize, shape: (usize, usize), what: &str| -> Result<()> {
            ensure!(
                self.val(i).shape() == shape,
                "scan {what} has shape {:?}, expected {:?}",
                self.val(i).shape(),
                shape
            );
            Ok(())
        };
        for &k in &keys {
            check(k, (rows, kw), "key")?;
        }
        for &v in &values {
            check(v, (rows, vw), "value")?;
        }
        for &b in &betas {
            check(b, (rows, dims.heads), "beta")?;
        }
        if let Some(g) = gate {
            check(g, (rows, dims.heads), "gate")?;
        }
        check(query, (rows, kw), "query")?;

        let (out, states) = {
            let refs = self.scan_refs(&keys, &values, &betas, gate, query);
            scan_forward(&dims, &refs, self.grad_enabled)
        };
        let value = Matrix::from_raw(rows, vw, out);
        if !value.is_finite() {
            return Err(Error::numerical("scan produced non-finite readouts"));
        }
        Ok(self.push(
            value,
            Op::Scan {
                keys,
                values,
                betas,
                gate,
                query,
                dims,
                states,
            },
        ))
    }

    fn scan_refs(
        &self,
        keys: &[usize],
        values: &[usize],
        betas: &[usize],
        gate: Option<usize>,
        query: usize,
    ) -> ScanRefs<'_> {
        ScanRefs {
            keys: keys.iter().map(|&i| self.val(i).data()).collect(),
            values: values.iter().map(|&i| self.val(i).data()).collect(),
            betas: betas.iter().map(|&i| self.val(i).data()).collect(),
            gate: gate.map(|i| self.val(i).data()),
            query: self.val(query).data(),
        }
    }

    /// Mean cross-entropy of `softmax(logits)` against `targets` over rows
    /// where `mask` is set.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let logits = self.idx(logits)?;
        let (rows, v) = self.val(logits).shape();
        ensure!(
            targets.len() == rows && mask.len() == rows,
            "cross entropy: {rows} rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        );
        let count = mask.iter().filter(|m| **m).count();
        ensure!(count > 0, "cross entropy needs at least one unmasked row");
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            ensure!(targets[r] < v, "target {} out of range {v}", targets[r]);
            let row = self.val(logits).row(r);
            total += log_sum_exp(row) - row[targets[r]];
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::numerical("non-finite cross-entropy loss"));
        }
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        ensure!(self.grad_enabled, "backward called on an inference tape");
        let out = self.idx(output)?;
        ensure!(
            self.val(out).shape() == (1, 1),
            "backward needs a scalar output, got {:?}",
            self.val(out).shape()
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |j: usize, m: Matrix| match &mut grads[j] {
            Some(existing) => existing.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = av.shape();
                let n = bv.cols();
                let mut da = vec![0.0; m * k];
                matmul_nt_into(g.data(), bv.data(), &mut da, m, n, k);
                acc(*a, Matrix::from_raw(m, k, da));
                acc(*b, av.t_matmul_unchecked(g));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.val(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.val(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Silu(a) => acc(
                *a,
                g.zip_map(self.val(*a), |gi, x| {
                    let s = sigmoid(x);
                    gi * s * (1.0 + x * (1.0 - s))
                }),
            ),
            Op::Sigmoid(a) => acc(
                *a,
                g.zip_map(&self.nodes[i].value, |gi, y| gi * y * (1.0 - y)),
            ),
            Op::Sum(a) => {
                let (r, c) = self.val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.data()[0]));
            }
            Op::RmsNorm { x, scale, group, eps } => {
                let xv = self.val(*x);
                let (rows, cols) = xv.shape();
                let a = self.val(*scale).data();
                let mut dx = vec![0.0; rows * cols];
                let mut da = vec![0.0; cols];
                let mut xhat = vec![0.0; *group];
                let mut dxhat = vec![0.0; *group];
                for r in 0..rows {
                    for g0 in (0..cols).step_by(*group) {
                        let base = r * cols + g0;
                        let seg = &xv.data()[base..base + group];
                        let inv = 1.0 / (eps + dot(seg, seg) / *group as f64).sqrt();
                        for c in 0..*group {
                            xhat[c] = seg[c] * inv;
                            let gc = g.data()[base + c];
                            da[g0 + c] += gc * xhat[c];
                            dxhat[c] = gc * a[g0 + c];
                        }
                        let mean = dot(&dxhat, &xhat) / *group as f64;
                        for c in 0..*group {
                            dx[base + c] = inv * (dxhat[c] - xhat[c] * mean);
                        }
                    }
                }
                acc(*x, Matrix::from_raw(rows, cols, dx));
                acc(*scale, Matrix::from_raw(1, cols, da));
            }
            Op::L2Normalize { x, group } => {
                let xv = self.val(*x);
                let y = &self.nodes[i].value;
                let mut dx = vec![0.0; xv.data().len()];
                for ((dxs, xs), (ys, gs)) in dx
                    .chunks_mut(*group)
                    .zip(xv.data().chunks(*group))
                    .zip(y.data().chunks(*group).zip(g.data().chunks(*group)))
                {
                    let norm = dot(xs, xs).sqrt();
                    let proj = dot(ys, gs);
                    for c in 0..*group {
                        dxs[c] = (gs[c] - ys[c] * proj) / norm;
                    }
                }
                acc(*x, Matrix::from_raw(xv.rows(), xv.cols(), dx));
            }
            Op::CausalConv { x, kernel, seq_len } => {
                let xv = self.val(*x);
                let (rows, cols) = xv.shape();
                let wv = self.val(*kernel);
                let width = wv.cols();
                let mut dx = vec![0.0; rows * cols];
                let mut dw = vec![0.0; cols * width];
                for r in 0..rows {
                    let t = r % seq_len;
                    let gr = g.row(r);
                    for s in 0..width.min(t + 1) {
                        let tap = width - 1 - s;
                        let src = xv.row(r - s);
                        for c in 0..cols {
                            dx[(r - s) * cols + c] += wv.data()[c * width + tap] * gr[c];
                            dw[c * width + tap] += src[c] * gr[c];
                        }
                    }
                }
                acc(*x, Matrix::from_raw(rows, cols, dx));
                acc(*kernel, Matrix::from_raw(cols, width, dw));
            }
            Op::Embedding { table, ids } => {
                let (v, l) = self.val(*table).shape();
                let mut dt = Matrix::zeros(v, l);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, g.row(r), dt.row_mut(id));
                }
                acc(*table, dt);
            }
            Op::Scan {
                keys,
                values,
                betas,
                gate,
                query,
                dims,
                states,
            } => {
                let states = states.as_ref().expect("grad-enabled tapes keep scan states");
                let refs = self.scan_refs(keys, values, betas, *gate, *query);
                let sg = scan_backward(dims, &refs, states, g.data());
                let shape = |j: usize| self.val(j).shape();
                for (j, d) in keys.iter().zip(sg.keys) {
                    acc(*j, Matrix::from_raw(shape(*j).0, shape(*j).1, d));
                }
                for (j, d) in values.iter().zip(sg.values) {
                    acc(*j, Matrix::from_raw(shape(*j).0, shape(*j).1, d));
                }
                for (j, d) in betas.iter().zip(sg.betas) {
                    acc(*j, Matrix::from_raw(shape(*j).0, shape(*j).1, d));
                }
                if let (Some(j), Some(d)) = (gate, sg.gate) {
                    acc(*j, Matrix::from_raw(shape(*j).0, shape(*j).1, d));
                }
                acc(*query, Matrix::from_raw(shape(*query).0, shape(*query).1, sg.query));
            }
            Op::SoftmaxCrossEntropy { logits, targets, mask } => {
                let lv = self.val(*logits);
                let (rows, v) = lv.shape();
                let count = mask.iter().filter(|m| **m).count() as f64;
                let scale = g.data()[0] / count;
                let mut dl = vec![0.0; rows * v];
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let row = lv.row(r);
                    let lse = log_sum_exp(row);
                    let out = &mut dl[r * v..(r + 1) * v];
                    for c in 0..v {
                        out[c] = (row[c] - lse).exp() * scale;
                    }
                    out[targets[r]] -= scale;
                }
                acc(*logits, Matrix::from_raw(rows, v, dl));
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Gradients of one reverse sweep, addressed by the forward [`Var`]s.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`; zeros when the output does not depend on it.
    pub fn get(&self, v: Var) -> Result<Matrix> {
        ensure!(v.tape == self.tape, "variable from a different tape");
        let (r, c) = self.shapes[v.idx];
        Ok(self.grads[v.idx].clone().unwrap_or_else(|| Matrix::zeros(r, c)))
    }

    /// Like [`Gradients::get`] but moves the buffer out.
    pub fn take(&mut self, v: Var) -> Result<Matrix> {
        ensure!(v.tape == self.tape, "variable from a different tape");
        let (r, c) = self.shapes[v.idx];
        Ok(self.grads[v.idx].take().unwrap_or_else(|| Matrix::zeros(r, c)))
    }
}
