use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ConstructedModel, ConstructionKind};
use super::permutation::Permutation;
use crate::error::{ensure, Result};
use crate::training::Predictor;

/// Maps a token sequence to the expected output at every position.
pub type Oracle = Box<dyn Fn(&[usize]) -> Vec<usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub construction: String,
    pub trials: usize,
    pub length: usize,
    pub pass: bool,
    pub matched_trials: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trial_matches: Vec<bool>,
}

/// Left prefix products of permutations, by explicit composition.
pub fn symmetric_oracle(n: usize) -> Oracle {
    let elements = Permutation::all(n);
    Box::new(move |xs| {
        let mut y = Permutation::identity(n);
        xs.iter()
            .map(|&x| {
                y = elements[x].compose(&y).expect("same size");
                elements.binary_search(&y).expect("all permutations are listed")
            })
            .collect()
    })
}

/// `t mod d` after the `t`-th token.
pub fn counter_oracle(d: usize) -> Oracle {
    Box::new(move |xs| (1..=xs.len()).map(|t| t % d).collect())
}

/// `D_m` elements as affine maps `z -> e z + k` over `Z_m`: `r_k = (+1, k)`,
/// `s_k = (-1, k)`. Faithful for every `m >= 2`.
fn dihedral_mul(m: usize, a: usize, b: usize) -> usize {
    let (ea, ka) = (a < m, a % m);
    let (eb, kb) = (b < m, b % m);
    let k = if ea { ka + kb } else { ka + m - kb } % m;
    if ea == eb {
        k
    } else {
        m + k
    }
}

/// Left prefix products `x_t . .. . x_1` in `D_m`.
pub fn dihedral_oracle(m: usize) -> Oracle {
    Box::new(move |xs| {
        let mut y = 0;
        xs.iter()
            .map(|&x| {
                y = dihedral_mul(m, x, y);
                y
            })
            .collect()
    })
}

/// Running products `y_{t-1} . x_t` in `D_m`.
pub fn dihedral_running_oracle(m: usize) -> Oracle {
    Box::new(move |xs| {
        let mut y = 0;
        xs.iter()
            .map(|&x| {
                y = dihedral_mul(m, y, x);
                y
            })
            .collect()
    })
}

/// Oracle for [`ConstructedModel::prefix_products`].
pub fn oracle_for(kind: ConstructionKind) -> Oracle {
    match kind {
        ConstructionKind::Symmetric { n } => symmetric_oracle(n),
        ConstructionKind::ModCounter { d } => counter_oracle(d),
        ConstructionKind::Dihedral { m } => dihedral_oracle(m),
    }
}

/// Compares [`ConstructedModel::prefix_products`] with `oracle` on `trials`
/// uniformly random words of `length` tokens.
pub fn verify_construction(
    model: &ConstructedModel,
    oracle: &dyn Fn(&[usize]) -> Vec<usize>,
    trials: usize,
    length: usize,
    seed: u64,
) -> Result<VerifyReport> {
    ensure!(trials >= 1 && length >= 1, "trials and length must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = model.alphabet_size();
    let mut trial_matches = Vec::with_capacity(trials);
    for _ in 0..trials {
        let word: Vec<usize> = (0..length).map(|_| rng.gen_range(0..size)).collect();
        trial_matches.push(model.prefix_products(&word)? == oracle(&word));
    }
    let matched_trials = trial_matches.iter().filter(|m| **m).count();
    Ok(VerifyReport {
        construction: model.name(),
        trials,
        length,
        pass: matched_trials == trials,
        matched_trials,
        trial_matches,
    })
}

/// Tokens outside the alphabet (e.g. BOS) act as the identity.
impl Predictor for ConstructedModel {
    fn predict(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
        let size = self.alphabet_size();
        seqs.iter()
            .map(|s| {
                let word: Vec<usize> = s.iter().map(|&x| if x < size { x } else { 0 }).collect();
                self.prefix_products(&word)
            })
            .collect()
    }
}
