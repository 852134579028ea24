use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::Matrix;

/// Bijection on `{0..n-1}`; `mapping[p]` is the image of `p`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl TryFrom<Vec<usize>> for Permutation {
    type Error = crate::Error;

    fn try_from(mapping: Vec<usize>) -> Result<Self> {
        Self::new(mapping)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, m) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{m}")?;
        }
        write!(f, "]")
    }
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        ensure!(n >= 1, "permutation of an empty set");
        let mut seen = vec![false; n];
        for &m in &mapping {
            ensure!(m < n && !seen[m], "mapping {mapping:?} is not a bijection");
            seen[m] = true;
        }
        Ok(Self(mapping))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn transposition(n: usize, a: usize, b: usize) -> Result<Self> {
        ensure!(a < n && b < n, "transposition ({a} {b}) outside 0..{n}");
        let mut m: Vec<usize> = (0..n).collect();
        m.swap(a, b);
        Ok(Self(m))
    }

    pub fn size(&self) -> usize {
        self.0.len()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.0
    }

    pub fn apply(&self, p: usize) -> usize {
        self.0[p]
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &m)| i == m)
    }

    /// `self ∘ other`: `other` acts first.
    pub fn compose(&self, other: &Permutation) -> Result<Permutation> {
        ensure!(self.size() == other.size(), "composing permutations of sizes {} and {}", self.size(), other.size());
        Ok(Self(other.0.iter().map(|&p| self.0[p]).collect()))
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.size()];
        for (p, &m) in self.0.iter().enumerate() {
            inv[m] = p;
        }
        Self(inv)
    }

    /// Cycles with at least two elements, each starting at its smallest
    /// element, ordered by that element.
    pub fn cycles(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.size()];
        let mut out = vec![];
        for start in 0..self.size() {
            if seen[start] {
                continue;
            }
            let mut cycle = vec![];
            let mut p = start;
            while !seen[p] {
                seen[p] = true;
                cycle.push(p);
                p = self.0[p];
            }
            if cycle.len() > 1 {
                out.push(cycle);
            }
        }
        out
    }

    pub fn is_even(&self) -> bool {
        self.cycles().iter().map(|c| c.len() - 1).sum::<usize>() % 2 == 0
    }

    /// `P` with `P e_p = e_{mapping[p]}`.
    pub fn to_matrix(&self) -> Matrix {
        let n = self.size();
        let mut m = Matrix::zeros(n, n);
        for (p, &q) in self.0.iter().enumerate() {
            m[(q, p)] = 1.0;
        }
        m
    }

    /// All permutations of `n` elements in lexicographic order of their
    /// mappings.
    pub fn all(n: usize) -> Vec<Permutation> {
        let mut cur: Vec<usize> = (0..n).collect();
        let mut out = vec![Self(cur.clone())];
        // next lexicographic permutation
        loop {
            let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
                return out;
            };
            let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("suffix has a larger entry");
            cur.swap(i - 1, j);
            cur[i..].reverse();
            out.push(Self(cur.clone()));
        }
    }
}

/// Transpositions, in the order they are applied, whose composition is `p`.
/// Each cycle `(c0 c1 .. c_{k-1})` (smallest element first) becomes
/// `(c_{k-2} c_{k-1}), .., (c0 c1)`, so at most `n - 1` swaps are used.
pub fn perm_to_swaps(p: &Permutation) -> Vec<(usize, usize)> {
    let mut swaps = vec![];
    for cycle in p.cycles() {
        for w in cycle.windows(2).rev() {
            swaps.push((w[0], w[1]));
        }
    }
    swaps
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn compose_swaps(n: usize, swaps: &[(usize, usize)]) -> Permutation {
        swaps.iter().fold(Permutation::identity(n), |acc, &(a, b)| {
            Permutation::transposition(n, a, b).unwrap().compose(&acc).unwrap()
        })
    }

    #[test]
    fn identity_and_single_swap() {
        assert!(perm_to_swaps(&Permutation::identity(4)).is_empty());
        let t = Permutation::new(vec![1, 0]).unwrap();
        assert_eq!(perm_to_swaps(&t), vec![(0, 1)]);
    }

    #[test]
    fn four_cycle_uses_three_swaps() {
        let c = Permutation::new(vec![1, 2, 3, 0]).unwrap();
        let swaps = perm_to_swaps(&c);
        assert_eq!(swaps.len(), 3);
        assert_eq!(compose_swaps(4, &swaps), c);
    }

    #[test]
    fn rejects_non_bijections() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
        assert!(Permutation::new(vec![]).is_err());
    }

    #[test]
    fn enumerates_all_in_order() {
        let all = Permutation::all(4);
        assert_eq!(all.len(), 24);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(all.iter().filter(|p| p.is_even()).count(), 12);
    }

    #[test]
    fn matrix_composes_like_functions() {
        let a = Permutation::new(vec![2, 0, 1]).unwrap();
        let b = Permutation::new(vec![1, 0, 2]).unwrap();
        let ab = a.to_matrix().matmul(&b.to_matrix()).unwrap();
        assert_eq!(ab, a.compose(&b).unwrap().to_matrix());
    }

    fn arb_perm() -> impl Strategy<Value = Permutation> {
        (1usize..9).prop_flat_map(|n| Just((0..n).collect::<Vec<_>>()).prop_shuffle()).prop_map(|m| Permutation::new(m).unwrap())
    }

    proptest! {
        #[test]
        fn swaps_reproduce_permutation(p in arb_perm()) {
            let swaps = perm_to_swaps(&p);
            prop_assert!(swaps.len() < p.size());
            prop_assert_eq!(compose_swaps(p.size(), &swaps), p.clone());
            prop_assert!(p.compose(&p.inverse()).unwrap().is_identity());
        }
    }
}
