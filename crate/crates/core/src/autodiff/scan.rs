//! Batched multi-head DeltaProduct scan with a hand-written backward pass.
//!
//! Activations are laid out as `(batch * seq_len) x (heads * dim)` row-major
//! matrices; row `b * seq_len + t` holds token `t` of sequence `b`.

use crate::numerics::{axpy, dot};
use crate::recurrence::{micro_step, readout};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

impl ScanDims {
    fn state_len(&self) -> usize {
        self.key_dim * self.value_dim
    }

    fn row(&self, b: usize, t: usize) -> usize {
        b * self.seq_len + t
    }

    /// Offset of the state after `t` tokens (`t = 0` is the zero state).
    fn state_offset(&self, b: usize, h: usize, t: usize) -> usize {
        ((b * self.heads + h) * (self.seq_len + 1) + t) * self.state_len()
    }
}

pub(crate) struct ScanRefs<'a> {
    pub keys: Vec<&'a [f64]>,
    pub values: Vec<&'a [f64]>,
    pub betas: Vec<&'a [f64]>,
    pub gate: Option<&'a [f64]>,
    pub query: &'a [f64],
}

impl ScanRefs<'_> {
    fn key(&self, dims: &ScanDims, j: usize, row: usize, h: usize) -> &[f64] {
        let w = dims.heads * dims.key_dim;
        &self.keys[j][row * w + h * dims.key_dim..row * w + (h + 1) * dims.key_dim]
    }

    fn value(&self, dims: &ScanDims, j: usize, row: usize, h: usize) -> &[f64] {
        let w = dims.heads * dims.value_dim;
        &self.values[j][row * w + h * dims.value_dim..row * w + (h + 1) * dims.value_dim]
    }

    fn query(&self, dims: &ScanDims, row: usize, h: usize) -> &[f64] {
        let w = dims.heads * dims.key_dim;
        &self.query[row * w + h * dims.key_dim..row * w + (h + 1) * dims.key_dim]
    }

    fn gate(&self, dims: &ScanDims, row: usize, h: usize) -> f64 {
        self.gate.map_or(1.0, |g| g[row * dims.heads + h])
    }
}

/// Returns the readouts `H_t^T q_t` and, when `save` is set, every state
/// including the initial zero state.
pub(crate) fn scan_forward(dims: &ScanDims, x: &ScanRefs, save: bool) -> (Vec<f64>, Option<Vec<f64>>) {
    let d = dims.value_dim;
    let nd = dims.state_len();
    let nh = x.keys.len();
    let mut out = vec![0.0; dims.batch * dims.seq_len * dims.heads * d];
    let mut states = save.then(|| vec![0.0; dims.batch * dims.heads * (dims.seq_len + 1) * nd]);
    let mut s = vec![0.0; nd];
    let mut scratch = vec![0.0; d];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            s.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..dims.seq_len {
                let row = dims.row(b, t);
                let g = x.gate(dims, row, h);
                if g != 1.0 {
                    s.iter_mut().for_each(|v| *v *= g);
                }
                for j in 0..nh {
                    let beta = x.betas[j][row * dims.heads + h];
                    micro_step(&mut s, x.key(dims, j, row, h), x.value(dims, j, row, h), beta, &mut scratch);
                }
                let o = (row * dims.heads + h) * d;
                readout(&s, x.query(dims, row, h), &mut out[o..o + d]);
                if let Some(st) = states.as_mut() {
                    let off = dims.state_offset(b, h, t + 1);
                    st[off..off + nd].copy_from_slice(&s);
                }
            }
        }
    }
    (out, states)
}

pub(crate) struct ScanGrads {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
    pub gate: Option<Vec<f64>>,
    pub query: Vec<f64>,
}

/// Reverse sweep. Per token the micro-step states are recomputed from the
/// saved state of the previous token; with `G = dL/dS'` and
/// `e = S^T k - v` one micro-step contributes
/// `dS = G - beta k (k^T G)`, `dbeta = -k^T G e`, `dv = beta G^T k` and
/// `dk = -beta (G e + S G^T k)`.
pub(crate) fn scan_backward(dims: &ScanDims, x: &ScanRefs, states: &[f64], dout: &[f64]) -> ScanGrads {
    let (n, d) = (dims.key_dim, dims.value_dim);
    let nd = dims.state_len();
    let nh = x.keys.len();
    let rows = dims.batch * dims.seq_len;
    let mut g = ScanGrads {
        keys: vec![vec![0.0; rows * dims.heads * n]; nh],
        values: vec![vec![0.0; rows * dims.heads * d]; nh],
        betas: vec![vec![0.0; rows * dims.heads]; nh],
        gate: x.gate.map(|_| vec![0.0; rows * dims.heads]),
        query: vec![0.0; rows * dims.heads * n],
    };
    let mut dh = vec![0.0; nd];
    // micro[j] is the state before micro-step j of the current token.
    let mut micro = vec![vec![0.0; nd]; nh];
    let mut scratch = vec![0.0; d];
    let mut e = vec![0.0; d];
    let mut w = vec![0.0; d];
    let mut ge = vec![0.0; n];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            dh.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..dims.seq_len).rev() {
                let row = dims.row(b, t);
                let cur = &states[dims.state_offset(b, h, t + 1)..][..nd];
                let prev = &states[dims.state_offset(b, h, t)..][..nd];

                let o = (row * dims.heads + h) * d;
                let dr = &dout[o..o + d];
                let q = x.query(dims, row, h);
                let qo = row * dims.heads * n + h * n;
                for r in 0..n {
                    axpy(q[r], dr, &mut dh[r * d..(r + 1) * d]);
                    g.query[qo + r] += dot(&cur[r * d..(r + 1) * d], dr);
                }

                let gate = x.gate(dims, row, h);
                for (m, p) in micro[0].iter_mut().zip(prev) {
                    *m = gate * p;
                }
                for j in 1..nh {
                    let (done, rest) = micro.split_at_mut(j);
                    rest[0].copy_from_slice(&done[j - 1]);
                    let beta = x.betas[j - 1][row * dims.heads + h];
                    micro_step(&mut rest[0], x.key(dims, j - 1, row, h), x.value(dims, j - 1, row, h), beta, &mut scratch);
                }

                for j in (0..nh).rev() {
                    let s = &micro[j];
                    let k = x.key(dims, j, row, h);
                    let v = x.value(dims, j, row, h);
                    let bidx = row * dims.heads + h;
                    let beta = x.betas[j][bidx];
                    // e = S^T k - v, w = G^T k
                    e.iter_mut().zip(v).for_each(|(a, b)| *a = -b);
                    w.iter_mut().for_each(|a| *a = 0.0);
                    for r in 0..n {
                        axpy(k[r], &s[r * d..(r + 1) * d], &mut e);
                        axpy(k[r], &dh[r * d..(r + 1) * d], &mut w);
                    }
                    for r in 0..n {
                        ge[r] = dot(&dh[r * d..(r + 1) * d], &e);
                    }
                    g.betas[j][bidx] -= dot(k, &ge);
                    let vo = bidx * d;
                    axpy(beta, &w, &mut g.values[j][vo..vo + d]);
                    let ko = bidx * n;
                    for r in 0..n {
                        let sw = dot(&s[r * d..(r + 1) * d], &w);
                        g.keys[j][ko + r] -= beta * (ge[r] + sw);
                    }
                    for r in 0..n {
                        axpy(-beta * k[r], &w, &mut dh[r * d..(r + 1) * d]);
                    }
                }

                if let Some(dg) = g.gate.as_mut() {
                    dg[row * dims.heads + h] += dot(&dh, prev);
                }
                if gate != 1.0 {
                    dh.iter_mut().for_each(|v| *v *= gate);
                }
            }
        }
    }
    g
}
