//! Generalized Householder factors `I - beta k k^T`, their products, the
//! closed-form simplifications for same-key and orthogonal-key products, the
//! complex-eigenvalue region of two-factor products, and the RWKV-7
//! transition family used to show why unbounded transitions blow up.

use crate::error::{ensure, Error, Result};
use crate::numerics::{axpy, dot, eig2x2, l2_norm, spectral_norm, Matrix};

/// Keys whose norm falls below this are rejected instead of normalized.
pub const MIN_KEY_NORM: f64 = 1e-12;

/// One factor `I - beta k k^T` with a unit key and `beta` in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholderFactor {
    beta: f64,
    key: Vec<f64>,
}

impl HouseholderFactor {
    /// Normalizes `key`; fails on near-zero keys or `beta` outside `[0, 2]`.
    pub fn new(beta: f64, key: &[f64]) -> Result<Self> {
        ensure!(
            (0.0..=2.0).contains(&beta),
            "beta must lie in [0, 2], got {beta}"
        );
        ensure!(!key.is_empty(), "key must be non-empty");
        let norm = l2_norm(key);
        if !(norm >= MIN_KEY_NORM) {
            return Err(Error::numerical(format!(
                "key norm {norm:e} below {MIN_KEY_NORM:e}"
            )));
        }
        Ok(Self {
            beta,
            key: key.iter().map(|k| k / norm).collect(),
        })
    }

    /// The swap factor exchanging coordinates `a` and `b` of an `n`-vector:
    /// `beta = 2`, `k = (e_a - e_b) / sqrt(2)`.
    pub fn swap(n: usize, a: usize, b: usize) -> Result<Self> {
        ensure!(a < n && b < n && a != b, "swap({a}, {b}) invalid for n = {n}");
        let mut k = vec![0.0; n];
        k[a] = 1.0;
        k[b] = -1.0;
        Self::new(2.0, &k)
    }

    /// `beta = 0`, i.e. the identity, with key `e_0`.
    pub fn identity(n: usize) -> Result<Self> {
        ensure!(n >= 1, "dimension must be positive");
        let mut k = vec![0.0; n];
        k[0] = 1.0;
        Self::new(0.0, &k)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn key(&self) -> &[f64] {
        &self.key
    }

    pub fn dim(&self) -> usize {
        self.key.len()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::identity(self.dim())
            .sub(&Matrix::outer(&self.key, &self.key).scale(self.beta))
            .expect("square shapes agree")
    }
}

/// `h - beta k (k^T h)`, i.e. `(I - beta k k^T) h`, without forming the n x n
/// factor.
pub fn apply_factor(f: &HouseholderFactor, h: &Matrix) -> Result<Matrix> {
    ensure!(
        f.dim() == h.rows(),
        "key dimension {} does not match state rows {}",
        f.dim(),
        h.rows()
    );
    let mut out = h.clone();
    apply_factor_in_place(f.beta, &f.key, &mut out);
    Ok(out)
}

pub(crate) fn apply_factor_in_place(beta: f64, key: &[f64], h: &mut Matrix) {
    let cols = h.cols();
    let mut kt_h = vec![0.0; cols];
    for (r, &kr) in key.iter().enumerate() {
        axpy(kr, h.row(r), &mut kt_h);
    }
    for (r, &kr) in key.iter().enumerate() {
        axpy(-beta * kr, &kt_h, h.row_mut(r));
    }
}

/// An ordered product of Householder factors scaled by a gate:
/// `gate * H_m ... H_2 H_1` where `factors[0]` is `H_1`, the first factor
/// applied to the state.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholderProduct {
    factors: Vec<HouseholderFactor>,
    gate: f64,
    dim: usize,
}

impl HouseholderProduct {
    pub fn new(dim: usize, factors: Vec<HouseholderFactor>, gate: f64) -> Result<Self> {
        ensure!(dim >= 1, "product dimension must be positive");
        ensure!((0.0..=1.0).contains(&gate), "gate must lie in [0, 1], got {gate}");
        ensure!(
            factors.iter().all(|f| f.dim() == dim),
            "mixed key dimensions in Householder product (expected {dim})"
        );
        Ok(Self { factors, gate, dim })
    }

    pub fn ungated(dim: usize, factors: Vec<HouseholderFactor>) -> Result<Self> {
        Self::new(dim, factors, 1.0)
    }

    pub fn factors(&self) -> &[HouseholderFactor] {
        &self.factors
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Applies the product to `h` factor by factor (first factor first).
    pub fn apply(&self, h: &Matrix) -> Result<Matrix> {
        ensure!(
            h.rows() == self.dim,
            "state has {} rows, product acts on {}",
            h.rows(),
            self.dim
        );
        let mut out = h.scale(self.gate);
        for f in &self.factors {
            apply_factor_in_place(f.beta, &f.key, &mut out);
        }
        Ok(out)
    }
}

/// Dense n x n matrix of the product.
pub fn realize(p: &HouseholderProduct) -> Result<Matrix> {
    p.apply(&Matrix::identity(p.dim))
}

/// Effective `beta*` of a product of same-key factors, folding
/// `b <- b + b' - b b'` left to right.
pub fn collapse_same_key(betas: &[f64]) -> Result<f64> {
    ensure!(!betas.is_empty(), "collapse_same_key needs at least one beta");
    Ok(betas[1..]
        .iter()
        .fold(betas[0], |acc, b| acc + b - acc * b))
}

/// `I - sum_j beta_j k_j k_j^T` for pairwise-orthogonal keys.
pub fn orthogonal_sum_form(factors: &[HouseholderFactor]) -> Result<Matrix> {
    ensure!(!factors.is_empty(), "orthogonal_sum_form needs at least one factor");
    let n = factors[0].dim();
    ensure!(
        factors.iter().all(|f| f.dim() == n),
        "mixed key dimensions"
    );
    for (i, a) in factors.iter().enumerate() {
        for b in &factors[i + 1..] {
            let c = dot(&a.key, &b.key);
            ensure!(
                c.abs() <= 1e-9,
                "keys are not orthogonal (inner product {c:e})"
            );
        }
    }
    let mut out = Matrix::identity(n);
    for f in factors {
        out = out
            .sub(&Matrix::outer(&f.key, &f.key).scale(f.beta))
            .expect("same shape");
    }
    Ok(out)
}

/// Where a two-factor product `(I - b2 k2 k2^T)(I - b1 k1 k1^T)` has complex
/// eigenvalues, as a function of `cos^2` of the angle between the keys.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComplexRegion {
    /// At least one beta is at most 1: the spectrum is real for every angle.
    AlwaysReal,
    /// Complex eigenvalues exactly when `lower < cos^2 < upper`.
    Interval { lower: f64, upper: f64 },
}

impl ComplexRegion {
    /// Predicted realness for a given `cos^2`; the open interval boundaries
    /// count as real.
    pub fn predicts_real(&self, cos2: f64) -> bool {
        match *self {
            ComplexRegion::AlwaysReal => true,
            ComplexRegion::Interval { lower, upper } => !(cos2 > lower && cos2 < upper),
        }
    }
}

pub fn complex_region_bounds(beta1: f64, beta2: f64) -> Result<ComplexRegion> {
    ensure!(
        (0.0..=2.0).contains(&beta1) && (0.0..=2.0).contains(&beta2),
        "betas must lie in [0, 2], got {beta1}, {beta2}"
    );
    if beta1 <= 1.0 || beta2 <= 1.0 {
        return Ok(ComplexRegion::AlwaysReal);
    }
    let (s1, s2) = ((beta1 - 1.0).sqrt(), (beta2 - 1.0).sqrt());
    let denom = beta1 * beta2;
    Ok(ComplexRegion::Interval {
        lower: (s1 - s2).powi(2) / denom,
        upper: (s1 + s2).powi(2) / denom,
    })
}

/// RWKV-7 transition `diag(w) - c k (k * a)^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rwkv7Matrix {
    w: Vec<f64>,
    k: Vec<f64>,
    a: Vec<f64>,
    c: f64,
}

impl Rwkv7Matrix {
    pub fn new(w: Vec<f64>, k: Vec<f64>, a: Vec<f64>, c: f64) -> Result<Self> {
        let n = w.len();
        ensure!(n >= 1, "dimension must be positive");
        ensure!(
            k.len() == n && a.len() == n,
            "dimension mismatch: w {}, k {}, a {}",
            n,
            k.len(),
            a.len()
        );
        ensure!(
            w.iter().chain(&a).all(|v| (0.0..=1.0).contains(v)),
            "w and a entries must lie in [0, 1]"
        );
        ensure!(c == 1.0 || c == 2.0, "c must be 1 or 2, got {c}");
        let norm = l2_norm(&k);
        ensure!((norm - 1.0).abs() <= 1e-9, "k must be a unit vector (norm {norm})");
        Ok(Self { w, k, a, c })
    }
}

pub fn rwkv7_realize(m: &Rwkv7Matrix) -> Matrix {
    let ka: Vec<f64> = m.k.iter().zip(&m.a).map(|(k, a)| k * a).collect();
    Matrix::diag(&m.w)
        .sub(&Matrix::outer(&m.k, &ka).scale(m.c))
        .expect("square shapes agree")
}

/// Output of [`rwkv7_instability_demo`].
#[derive(Debug, Clone)]
pub struct InstabilityReport {
    /// Spectral radius of the two-step product `A A'`.
    pub spectral_radius: f64,
    /// `norm_trace[i]` is the spectral norm of `A_{i+1} ... A_1`.
    pub norm_trace: Vec<f64>,
}

/// The pair `(A, A')` of RWKV-7 transitions (`c = 1`, `w = 1`, angle pi/3)
/// whose alternating product has spectral radius `(27 + sqrt(153)) / 32`.
pub fn rwkv7_unstable_pair() -> (Rwkv7Matrix, Rwkv7Matrix) {
    let theta = std::f64::consts::FRAC_PI_3;
    let (s, c) = theta.sin_cos();
    let a = Rwkv7Matrix::new(vec![1.0, 1.0], vec![s, c], vec![0.0, 1.0], 1.0)
        .expect("valid construction");
    let a_prime = Rwkv7Matrix::new(vec![1.0, 1.0], vec![c, s], vec![1.0, 0.0], 1.0)
        .expect("valid construction");
    (a, a_prime)
}

/// Alternates `A' , A, A', A, ...` (odd steps `A'`, even steps `A`) and
/// records the spectral norm of the running product after every step.
pub fn rwkv7_instability_demo(steps: usize) -> Result<InstabilityReport> {
    ensure!(
        steps >= 2 && steps.is_multiple_of(2),
        "steps must be even and at least 2, got {steps}"
    );
    let (a, a_prime) = rwkv7_unstable_pair();
    let (a, a_prime) = (rwkv7_realize(&a), rwkv7_realize(&a_prime));
    let spectral_radius = eig2x2(&a.matmul(&a_prime)?)?.spectral_radius();
    let mut product = Matrix::identity(2);
    let mut norm_trace = Vec::with_capacity(steps);
    for i in 1..=steps {
        let step = if i % 2 == 0 { &a } else { &a_prime };
        product = step.matmul(&product)?;
        norm_trace.push(spectral_norm(&product)?);
    }
    Ok(InstabilityReport {
        spectral_radius,
        norm_trace,
    })
}
