use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::permutation::{perm_to_swaps, Permutation};
use crate::error::{ensure, Error, Result};
use crate::hh_algebra::{realize, HouseholderFactor};
use crate::numerics::{dot, spectral_norm, Matrix};
use crate::recurrence::{step, HiddenState, StepInputs};

/// Reachable states must sit within this distance of a table entry.
pub const STATE_TOL: f64 = 1e-6;

/// Decoder tables whose entries are closer than `MARGIN_FACTOR * STATE_TOL`
/// are rejected at build time.
pub const MARGIN_FACTOR: f64 = 10.0;

const MATRIX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstructionKind {
    /// One layer, `n_h = n - 1`, tracking `S_n`.
    Symmetric { n: usize },
    /// One layer, `n_h = 2`, counting modulo `d`.
    ModCounter { d: usize },
    /// Two layers, `n_h = 1`, tracking `D_m`.
    Dihedral { m: usize },
}

impl fmt::Display for ConstructionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstructionKind::Symmetric { n } => write!(f, "S{n}_one_layer"),
            ConstructionKind::ModCounter { d } => write!(f, "mod{d}_counter"),
            ConstructionKind::Dihedral { m } => write!(f, "D{m}_two_layer"),
        }
    }
}

/// A hand-built DeltaProduct model with a table decoder.
///
/// Token ids: `S_n` uses the index into [`Permutation::all`]; `D_m` uses
/// `r_i = i` and `s_i = m + i`; the counter ignores its tokens.
#[derive(Debug, Clone)]
pub struct ConstructedModel {
    kind: ConstructionKind,
    body: Body,
}

#[derive(Debug, Clone)]
enum Body {
    Symmetric {
        elements: Vec<Permutation>,
        inputs: Vec<StepInputs>,
    },
    Counter {
        input: StepInputs,
        states: Vec<[f64; 2]>,
    },
    Dihedral {
        m: usize,
        /// Per token: rotation-parity head, reflection-parity head.
        parity: Vec<[StepInputs; 2]>,
        /// Per token and rotation parity after the token.
        reflect: Vec<[StepInputs; 2]>,
        /// `c_i` at odd and `d_i` at even multiples of `pi / m`.
        c: Vec<[f64; 2]>,
        d: Vec<[f64; 2]>,
    },
}

/// States of every (layer, head) after each token: `[layer][head][t]`.
pub type StateTrace = Vec<Vec<Vec<HiddenState>>>;
/// Step inputs of every (layer, head) at each token: `[layer][head][t]`.
pub type InputTrace = Vec<Vec<Vec<StepInputs>>>;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn householder_inputs(factors: &[HouseholderFactor], d: usize) -> Result<StepInputs> {
    StepInputs::new(
        factors.iter().map(|f| f.key().to_vec()).collect(),
        vec![vec![0.0; d]; factors.len()],
        factors.iter().map(|f| f.beta()).collect(),
        1.0,
    )
}

/// Key of the reflection `H(alpha)` that maps angle `phi` to `alpha - phi`.
fn reflection_key(alpha: f64) -> Vec<f64> {
    vec![-(alpha / 2.0).sin(), (alpha / 2.0).cos()]
}

fn polar(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

fn dist(a: &[f64], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn min_separation(points: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.min(dist(a, b));
        }
    }
    best
}

fn check_margin(points: &[[f64; 2]]) -> Result<()> {
    let sep = min_separation(points);
    ensure!(
        sep >= MARGIN_FACTOR * STATE_TOL,
        "decoder states separated by {sep:e}, below {:e}",
        MARGIN_FACTOR * STATE_TOL
    );
    Ok(())
}

/// Index of the nearest table entry; fails if it is further than [`STATE_TOL`].
fn nearest(h: &[f64], table: &[[f64; 2]]) -> Result<usize> {
    let (idx, d) = table
        .iter()
        .enumerate()
        .map(|(i, p)| (i, dist(h, p)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("decoder table is non-empty");
    if d > STATE_TOL {
        return Err(Error::numerical(format!(
            "state {h:?} is {d:e} away from every decoder entry"
        )));
    }
    Ok(idx)
}

fn scalar_bit(h: &HiddenState) -> Result<usize> {
    let x = h.matrix().data()[0];
    let bit = x.round();
    if (x - bit).abs() > STATE_TOL || !(bit == 0.0 || bit == 1.0) {
        return Err(Error::numerical(format!("parity state {x} is not a bit")));
    }
    Ok(bit as usize)
}

fn is_permutation_matrix(a: &Matrix) -> bool {
    let n = a.rows();
    (0..n).all(|r| {
        let row = a.row(r);
        let ones = row.iter().filter(|x| (*x - 1.0).abs() <= MATRIX_TOL).count();
        let zeros = row.iter().filter(|x| x.abs() <= MATRIX_TOL).count();
        ones == 1 && zeros == n - 1
    }) && (0..n).all(|c| a.col(c).iter().filter(|x| (*x - 1.0).abs() <= MATRIX_TOL).count() == 1)
}

fn is_orthogonal(a: &Matrix) -> Result<bool> {
    let ata = a.transpose().matmul(a)?;
    Ok(ata.max_abs_diff(&Matrix::identity(a.cols())) <= MATRIX_TOL)
}

/// One layer with `n_h = n - 1` tracking `S_n`: each permutation is written
/// as at most `n - 1` swap factors, padded with `beta = 0` identities, and
/// acts on `H_0 = (1, .., n)^T`.
pub fn build_sn_one_layer(n: usize) -> Result<ConstructedModel> {
    ensure!((2..=7).contains(&n), "S_n construction needs 2 <= n <= 7, got {n}");
    let elements = Permutation::all(n);
    let inputs = elements
        .iter()
        .map(|p| {
            let mut factors = perm_to_swaps(p)
                .into_iter()
                .map(|(a, b)| HouseholderFactor::swap(n, a, b))
                .collect::<Result<Vec<_>>>()?;
            while factors.len() < n - 1 {
                factors.push(HouseholderFactor::identity(n)?);
            }
            householder_inputs(&factors, 1)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = ConstructedModel {
        kind: ConstructionKind::Symmetric { n },
        body: Body::Symmetric { elements, inputs },
    };
    model.check_transitions()?;
    Ok(model)
}

/// Two reflections composing to a rotation by `2 pi / d` in a 2D state.
pub fn build_mod_counter(d: usize) -> Result<ConstructedModel> {
    ensure!(d >= 2, "modulus must be at least 2, got {d}");
    let half = PI / d as f64;
    let factors = [
        HouseholderFactor::new(2.0, &[1.0, 0.0])?,
        HouseholderFactor::new(2.0, &[half.cos(), half.sin()])?,
    ];
    let input = householder_inputs(&factors, 1)?;
    let states: Vec<[f64; 2]> = (0..d).map(|k| polar(2.0 * PI * k as f64 / d as f64)).collect();
    check_margin(&states)?;
    let model = ConstructedModel {
        kind: ConstructionKind::ModCounter { d },
        body: Body::Counter { input, states },
    };
    model.check_transitions()?;
    Ok(model)
}

/// Layer 1 holds two scalar parity heads (rotations seen, reflections seen),
/// toggled by `beta = 2`, `k = 1`, `v = 1/2`. Layer 2 applies one reflection
/// `H(theta)` per token, selected by the token and the rotation parity.
///
/// The model computes the running product `y_{t-1} . x_t`; see
/// [`ConstructedModel::prefix_products`] for the task's order.
pub fn build_dihedral_two_layer(m: usize) -> Result<ConstructedModel> {
    ensure!(m >= 2, "dihedral construction needs m >= 2, got {m}");
    let mf = m as f64;
    let toggle = || StepInputs::new(vec![vec![1.0]], vec![vec![0.5]], vec![2.0], 1.0);
    let keep = || StepInputs::new(vec![vec![1.0]], vec![vec![0.0]], vec![0.0], 1.0);
    let mut parity = Vec::with_capacity(2 * m);
    let mut reflect = Vec::with_capacity(2 * m);
    for token in 0..2 * m {
        let is_rot = token < m;
        let i = (token % m) as f64;
        parity.push(if is_rot { [toggle()?, keep()?] } else { [keep()?, toggle()?] });
        // theta(x, a) where `a` is one minus the rotation parity before x.
        let theta = |a: usize| -> f64 {
            match (is_rot, a) {
                (true, 1) => (1.0 - 2.0 * i) * PI / mf,
                (true, _) => (1.0 + 2.0 * i) * PI / mf,
                (false, 1) => -2.0 * i * PI / mf,
                (false, _) => (2.0 + 2.0 * i) * PI / mf,
            }
        };
        let make = |p: usize| -> Result<StepInputs> {
            let a = if is_rot { p } else { 1 - p };
            StepInputs::new(vec![unit(reflection_key(theta(a)))], vec![vec![0.0]], vec![2.0], 1.0)
        };
        reflect.push([make(0)?, make(1)?]);
    }
    let d: Vec<[f64; 2]> = (0..m).map(|i| polar(2.0 * PI * i as f64 / mf)).collect();
    let c: Vec<[f64; 2]> = (0..m).map(|i| polar((1.0 - 2.0 * i as f64) * PI / mf)).collect();
    let all: Vec<[f64; 2]> = c.iter().chain(&d).copied().collect();
    check_margin(&all)?;
    let model = ConstructedModel {
        kind: ConstructionKind::Dihedral { m },
        body: Body::Dihedral {
            m,
            parity,
            reflect,
            c,
            d,
        },
    };
    model.check_transitions()?;
    Ok(model)
}

impl ConstructedModel {
    pub fn kind(&self) -> ConstructionKind {
        self.kind
    }

    pub fn name(&self) -> String {
        self.kind.to_string()
    }

    /// Number of distinct input tokens.
    pub fn alphabet_size(&self) -> usize {
        match &self.body {
            Body::Symmetric { elements, .. } => elements.len(),
            Body::Counter { .. } => 1,
            Body::Dihedral { m, .. } => 2 * m,
        }
    }

    pub fn layers(&self) -> usize {
        match self.body {
            Body::Dihedral { .. } => 2,
            _ => 1,
        }
    }

    pub fn n_h(&self) -> usize {
        match self.kind {
            ConstructionKind::Symmetric { n } => n - 1,
            ConstructionKind::ModCounter { .. } => 2,
            ConstructionKind::Dihedral { .. } => 1,
        }
    }

    /// Initial state of every head, per layer.
    pub fn initial_states(&self) -> Vec<Vec<HiddenState>> {
        let col = |v: &[f64]| HiddenState::new(Matrix::column(v)).expect("finite initial state");
        match &self.body {
            Body::Symmetric { elements, .. } => {
                let n = elements[0].size();
                let u0: Vec<f64> = (1..=n).map(|x| x as f64).collect();
                vec![vec![col(&u0)]]
            }
            Body::Counter { .. } => vec![vec![col(&[1.0, 0.0])]],
            Body::Dihedral { .. } => vec![vec![col(&[0.0]), col(&[0.0])], vec![col(&[1.0, 0.0])]],
        }
    }

    /// Every transition the model can apply, realized densely.
    pub fn transitions(&self) -> Result<Vec<Matrix>> {
        let inputs: Vec<&StepInputs> = match &self.body {
            Body::Symmetric { inputs, .. } => inputs.iter().collect(),
            Body::Counter { input, .. } => vec![input],
            Body::Dihedral { parity, reflect, .. } => parity.iter().chain(reflect).flatten().collect(),
        };
        inputs.into_iter().map(|s| realize(&s.transition()?)).collect()
    }

    fn check_transitions(&self) -> Result<()> {
        for a in self.transitions()? {
            let norm = spectral_norm(&a)?;
            ensure!(norm <= 1.0 + MATRIX_TOL, "transition has operator norm {norm}");
            let ok = match self.body {
                Body::Symmetric { .. } => is_permutation_matrix(&a),
                _ => is_orthogonal(&a)?,
            };
            ensure!(ok, "transition is not {}", match self.body {
                Body::Symmetric { .. } => "a permutation matrix",
                _ => "orthogonal",
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if matches!(self.body, Body::Counter { .. }) {
            return Ok(());
        }
        let size = self.alphabet_size();
        match tokens.iter().find(|&&t| t >= size) {
            Some(t) => Err(Error::contract(format!("token {t} outside alphabet of size {size}"))),
            None => Ok(()),
        }
    }

    /// Step inputs per layer and head. Layer 2 of the dihedral model reads the
    /// layer-1 parity, so its inputs depend on the prefix.
    pub fn step_inputs(&self, tokens: &[usize]) -> Result<InputTrace> {
        self.check_tokens(tokens)?;
        Ok(match &self.body {
            Body::Symmetric { inputs, .. } => vec![vec![tokens.iter().map(|&x| inputs[x].clone()).collect()]],
            Body::Counter { input, .. } => vec![vec![vec![input.clone(); tokens.len()]]],
            Body::Dihedral { parity, reflect, m, .. } => {
                let mut rot = 0;
                let mut layer2 = Vec::with_capacity(tokens.len());
                for &x in tokens {
                    if x < *m {
                        rot ^= 1;
                    }
                    layer2.push(reflect[x][rot].clone());
                }
                let heads = (0..2)
                    .map(|h| tokens.iter().map(|&x| parity[x][h].clone()).collect())
                    .collect();
                vec![heads, vec![layer2]]
            }
        })
    }

    /// Runs the recurrences and returns the state of every head after each
    /// token.
    pub fn states(&self, tokens: &[usize]) -> Result<StateTrace> {
        let inputs = self.step_inputs(tokens)?;
        let init = self.initial_states();
        inputs
            .iter()
            .zip(&init)
            .map(|(layer, h0s)| {
                layer
                    .iter()
                    .zip(h0s)
                    .map(|(seq, h0)| {
                        let mut h = h0.clone();
                        seq.iter()
                            .map(|s| {
                                h = step(&h, s)?;
                                Ok(h.clone())
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    /// Decoded output at every position in the model's native order: left
    /// prefix products for `S_n`, `t mod d` for the counter, and the running
    /// product `y_{t-1} . x_t` for `D_m`.
    pub fn run(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let states = self.states(tokens)?;
        match &self.body {
            Body::Symmetric { elements, .. } => {
                let n = elements[0].size();
                states[0][0]
                    .iter()
                    .map(|h| {
                        let mut mapping = vec![usize::MAX; n];
                        for (q, &v) in h.matrix().data().iter().enumerate() {
                            let p = v.round();
                            if (v - p).abs() > STATE_TOL || p < 1.0 || p > n as f64 {
                                return Err(Error::numerical(format!("state entry {v} is not a position label")));
                            }
                            mapping[p as usize - 1] = q;
                        }
                        let perm = Permutation::new(mapping)
                            .map_err(|_| Error::numerical("decoded state is not a permutation"))?;
                        Ok(elements.binary_search(&perm).expect("all permutations are listed"))
                    })
                    .collect()
            }
            Body::Counter { states: table, .. } => states[0][0]
                .iter()
                .map(|h| nearest(h.matrix().data(), table))
                .collect(),
            Body::Dihedral { m, c, d, .. } => {
                let m = *m;
                let all: Vec<[f64; 2]> = c.iter().chain(d).copied().collect();
                (0..tokens.len())
                    .map(|t| {
                        let refl = scalar_bit(&states[0][1][t])?;
                        let i = nearest(states[1][0][t].matrix().data(), &all)? % m;
                        Ok(if refl == 0 { i } else { m + (m - i) % m })
                    })
                    .collect()
            }
        }
    }

    /// Left prefix products `x_t . .. . x_1`, the group word convention. For
    /// `D_m` this feeds inverse tokens and inverts the running product, since
    /// `(x_t .. x_1)^-1 = x_1^-1 .. x_t^-1`.
    pub fn prefix_products(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            ConstructionKind::Dihedral { m } => {
                self.check_tokens(tokens)?;
                let inv: Vec<usize> = tokens.iter().map(|&x| dihedral_inverse(m, x)).collect();
                Ok(self.run(&inv)?.into_iter().map(|y| dihedral_inverse(m, y)).collect())
            }
            _ => self.run(tokens),
        }
    }
}

/// `r_i^-1 = r_{-i}`, `s_i^-1 = s_i`.
pub(crate) fn dihedral_inverse(m: usize, x: usize) -> usize {
    if x < m {
        (m - x) % m
    } else {
        x
    }
}
