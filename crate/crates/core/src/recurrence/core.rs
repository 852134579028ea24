use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::hh_algebra::{apply_factor_in_place, HouseholderFactor, HouseholderProduct};
use crate::numerics::{axpy, l2_norm, Matrix};

/// Which range the betas live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EigenvalueMode {
    /// `beta = sigmoid(z)` in `[0, 1]`; transition eigenvalues in `[0, 1]`.
    UnitInterval,
    /// `beta = 2 sigmoid(z)` in `[0, 2]`; eigenvalues in `[-1, 1]`.
    #[default]
    SymmetricInterval,
}

impl EigenvalueMode {
    pub fn beta_max(self) -> f64 {
        match self {
            EigenvalueMode::UnitInterval => 1.0,
            EigenvalueMode::SymmetricInterval => 2.0,
        }
    }

    /// `phi(z)`: the squashing applied to the beta logit.
    pub fn phi(self, z: f64) -> f64 {
        self.beta_max() * sigmoid(z)
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    // exp overflow gives 1/inf = 0, so no branch is needed in f64.
    1.0 / (1.0 + (-z).exp())
}

/// Per-token inputs of one head: `n_h` (key, value, beta) triples and a gate.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    betas: Vec<f64>,
    gate: f64,
}

impl StepInputs {
    /// Checks unit keys (within 1e-6), consistent dimensions, `beta` in
    /// `[0, 2]` and `gate` in `[0, 1]`.
    pub fn new(
        keys: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
        betas: Vec<f64>,
        gate: f64,
    ) -> Result<Self> {
        let nh = keys.len();
        ensure!(nh >= 1, "at least one Householder factor is required");
        ensure!(
            values.len() == nh && betas.len() == nh,
            "n_h mismatch: {} keys, {} values, {} betas",
            nh,
            values.len(),
            betas.len()
        );
        let n = keys[0].len();
        let d = values[0].len();
        ensure!(n >= 1 && d >= 1, "key and value dimensions must be positive");
        for (j, (k, v)) in keys.iter().zip(&values).enumerate() {
            ensure!(
                k.len() == n && v.len() == d,
                "factor {j}: key dim {} / value dim {} differ from {n} / {d}",
                k.len(),
                v.len()
            );
            let norm = l2_norm(k);
            ensure!((norm - 1.0).abs() <= 1e-6, "factor {j}: key norm {norm} is not 1");
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::numerical(format!("factor {j}: non-finite value")));
            }
        }
        ensure!(
            betas.iter().all(|b| (0.0..=2.0).contains(b)),
            "betas must lie in [0, 2]: {betas:?}"
        );
        ensure!((0.0..=1.0).contains(&gate), "gate must lie in [0, 1], got {gate}");
        Ok(Self {
            keys,
            values,
            betas,
            gate,
        })
    }

    /// Checks that every beta is admissible for `mode`.
    pub fn check_mode(&self, mode: EigenvalueMode) -> Result<()> {
        let max = mode.beta_max();
        ensure!(
            self.betas.iter().all(|b| *b <= max),
            "betas {:?} exceed {max} allowed by {mode:?}",
            self.betas
        );
        Ok(())
    }

    pub fn n_h(&self) -> usize {
        self.keys.len()
    }

    pub fn key_dim(&self) -> usize {
        self.keys[0].len()
    }

    pub fn value_dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    /// `A = gate * H_{n_h} ... H_1` as a Householder product.
    pub fn transition(&self) -> Result<HouseholderProduct> {
        let factors = self
            .keys
            .iter()
            .zip(&self.betas)
            .map(|(k, b)| HouseholderFactor::new(*b, k))
            .collect::<Result<Vec<_>>>()?;
        HouseholderProduct::new(self.key_dim(), factors, self.gate)
    }

    /// `B = sum_j (H_{n_h} ... H_{j+1}) beta_j k_j v_j^T`.
    pub fn input_term(&self) -> Matrix {
        let mut b = Matrix::zeros(self.key_dim(), self.value_dim());
        for j in 0..self.n_h() {
            apply_factor_in_place(self.betas[j], &self.keys[j], &mut b);
            b.add_assign(&Matrix::outer(&self.keys[j], &self.values[j]).scale(self.betas[j]));
        }
        b
    }
}

/// The n x d state of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(Matrix);

impl HiddenState {
    pub fn new(h: Matrix) -> Result<Self> {
        if !h.is_finite() {
            return Err(Error::numerical("hidden state has non-finite entries"));
        }
        Ok(Self(h))
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self(Matrix::zeros(n, d))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// One micro-step `S <- S - beta k (k^T S - v^T)` on a flat row-major n x d
/// state. `scratch` must hold `d` entries.
#[inline]
pub(crate) fn micro_step(s: &mut [f64], k: &[f64], v: &[f64], beta: f64, scratch: &mut [f64]) {
    let d = v.len();
    scratch.copy_from_slice(v);
    scratch.iter_mut().for_each(|x| *x = -*x);
    for (r, &kr) in k.iter().enumerate() {
        axpy(kr, &s[r * d..(r + 1) * d], scratch);
    }
    for (r, &kr) in k.iter().enumerate() {
        axpy(-beta * kr, scratch, &mut s[r * d..(r + 1) * d]);
    }
}

fn check_dims(h: &HiddenState, s: &StepInputs) -> Result<()> {
    ensure!(
        h.0.shape() == (s.key_dim(), s.value_dim()),
        "state is {:?} but inputs act on {}x{}",
        h.0.shape(),
        s.key_dim(),
        s.value_dim()
    );
    Ok(())
}

/// `H_i = g A H_{i-1} + B`: scale by the gate, then the `n_h` micro-steps.
pub fn step(h_prev: &HiddenState, s: &StepInputs) -> Result<HiddenState> {
    check_dims(h_prev, s)?;
    let mut h = h_prev.0.scale(s.gate);
    let mut scratch = vec![0.0; s.value_dim()];
    for j in 0..s.n_h() {
        micro_step(h.data_mut(), &s.keys[j], &s.values[j], s.betas[j], &mut scratch);
    }
    HiddenState::new(h)
}

pub fn forward_sequential(h0: &HiddenState, inputs: &[StepInputs]) -> Result<Vec<HiddenState>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut h = h0.clone();
    for s in inputs {
        h = step(&h, s)?;
        out.push(h.clone());
    }
    Ok(out)
}

/// Runs the `n_h`-factor recurrence as a single-factor recurrence over
/// `n_h * t` micro-tokens. Token `i` contributes gates `[g_i, 1, ..., 1]` and
/// only the state after its last micro-token is kept.
pub fn forward_expanded(h0: &HiddenState, inputs: &[StepInputs]) -> Result<Vec<HiddenState>> {
    let Some(first) = inputs.first() else {
        return Ok(Vec::new());
    };
    let nh = first.n_h();
    ensure!(
        inputs.iter().all(|s| s.n_h() == nh),
        "all tokens must use the same n_h"
    );
    if nh == 1 {
        return forward_sequential(h0, inputs);
    }
    let mut expanded = Vec::with_capacity(nh * inputs.len());
    for s in inputs {
        for j in 0..nh {
            expanded.push(StepInputs {
                keys: vec![s.keys[j].clone()],
                values: vec![s.values[j].clone()],
                betas: vec![s.betas[j]],
                gate: if j == 0 { s.gate } else { 1.0 },
            });
        }
    }
    let states = forward_sequential(h0, &expanded)?;
    Ok(states.into_iter().skip(nh - 1).step_by(nh).collect())
}

/// Chunked evaluation order. Each chunk first builds, independently of all
/// other chunks, its prefix transition products `P_i = A_i ... A_start` and
/// the prefix states reached from a zero state `Q_i`. A sequential pass then
/// propagates the chunk-boundary states, and every state is recovered as
/// `H_i = P_i H_start + Q_i`.
pub fn forward_chunked(
    h0: &HiddenState,
    inputs: &[StepInputs],
    chunk: usize,
) -> Result<Vec<HiddenState>> {
    ensure!(chunk >= 1, "chunk size must be at least 1");
    if let Some(s) = inputs.first() {
        check_dims(h0, s)?;
    }
    let (n, d) = h0.0.shape();
    let zero = HiddenState::zeros(n, d);

    struct ChunkPrefix {
        transitions: Vec<Matrix>,
        offsets: Vec<Matrix>,
    }
    let prefixes = inputs
        .chunks(chunk)
        .map(|tokens| {
            let mut transitions = Vec::with_capacity(tokens.len());
            let mut offsets = Vec::with_capacity(tokens.len());
            let mut p = Matrix::identity(n);
            let mut q = zero.clone();
            for s in tokens {
                check_dims(&q, s)?;
                p = s.transition()?.apply(&p)?;
                q = step(&q, s)?;
                transitions.push(p.clone());
                offsets.push(q.0.clone());
            }
            Ok(ChunkPrefix {
                transitions,
                offsets,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut boundaries = Vec::with_capacity(prefixes.len());
    let mut h = h0.0.clone();
    for c in &prefixes {
        boundaries.push(h.clone());
        h = c.transitions.last().expect("chunks are non-empty").matmul(&h)?;
        h.add_assign(c.offsets.last().expect("chunks are non-empty"));
    }

    let mut out = Vec::with_capacity(inputs.len());
    for (c, start) in prefixes.iter().zip(&boundaries) {
        for (p, q) in c.transitions.iter().zip(&c.offsets) {
            let mut hi = p.matmul(start)?;
            hi.add_assign(q);
            out.push(HiddenState::new(hi)?);
        }
    }
    Ok(out)
}

/// `H^T q` for a flat n x d state.
#[inline]
pub(crate) fn readout(h: &[f64], q: &[f64], out: &mut [f64]) {
    let d = out.len();
    out.iter_mut().for_each(|x| *x = 0.0);
    for (r, &qr) in q.iter().enumerate() {
        axpy(qr, &h[r * d..(r + 1) * d], out);
    }
}

/// `||H_t||_F` bound for ungated runs: `||H_0||_F + sum_i ||B_i||_F`.
pub fn stability_bound(h0: &HiddenState, inputs: &[StepInputs]) -> Vec<f64> {
    let mut acc = h0.0.frobenius_norm();
    inputs
        .iter()
        .map(|s| {
            acc += s.input_term().frobenius_norm();
            acc
        })
        .collect()
}
