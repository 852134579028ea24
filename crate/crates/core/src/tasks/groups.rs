use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constructions::Permutation;
use crate::error::{ensure, Error, Result};

/// Finite groups with a word-problem generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GroupName {
    /// Symmetric group on 3, 4 or 5 points.
    Symmetric(usize),
    A5,
    Cyclic(usize),
    Dihedral(usize),
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupName::Symmetric(n) => write!(f, "S{n}"),
            GroupName::A5 => write!(f, "A5"),
            GroupName::Cyclic(m) => write!(f, "Z{m}"),
            GroupName::Dihedral(m) => write!(f, "D{m}"),
        }
    }
}

impl FromStr for GroupName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Contract(format!("unknown group {s:?} (expected S3, S4, S5, A5, Z<m> or D<m>)"));
        if s == "A5" {
            return Ok(GroupName::A5);
        }
        let (head, num) = s.split_at(s.len().min(1));
        let k: usize = num.parse().map_err(|_| bad())?;
        match head {
            "S" if (3..=5).contains(&k) => Ok(GroupName::Symmetric(k)),
            "Z" if k >= 2 => Ok(GroupName::Cyclic(k)),
            "D" if k >= 3 => Ok(GroupName::Dihedral(k)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for GroupName {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GroupName> for String {
    fn from(g: GroupName) -> Self {
        g.to_string()
    }
}

/// A finite group realized as permutations, with a multiplication table.
/// Element 0 is always the identity.
#[derive(Debug, Clone)]
pub struct Group {
    name: GroupName,
    elements: Vec<Permutation>,
    labels: Vec<String>,
    table: Vec<Vec<usize>>,
}

impl Group {
    pub fn new(name: GroupName) -> Result<Self> {
        let (elements, labels): (Vec<Permutation>, Vec<String>) = match name {
            GroupName::Symmetric(n) => Permutation::all(n).into_iter().map(|p| (p.clone(), p.to_string())).unzip(),
            GroupName::A5 => Permutation::all(5)
                .into_iter()
                .filter(|p| p.is_even())
                .map(|p| (p.clone(), p.to_string()))
                .unzip(),
            GroupName::Cyclic(m) => (0..m).map(|k| (rotation(m, k), format!("r{k}"))).unzip(),
            GroupName::Dihedral(m) => (0..m)
                .map(|k| (rotation(m, k), format!("r{k}")))
                .chain((0..m).map(|k| (reflection(m, k), format!("s{k}"))))
                .unzip(),
        };
        ensure!(elements[0].is_identity(), "group {name} does not start with the identity");
        let index: HashMap<&Permutation, usize> = elements.iter().enumerate().map(|(i, p)| (p, i)).collect();
        let mut table = vec![vec![0; elements.len()]; elements.len()];
        for (a, pa) in elements.iter().enumerate() {
            for (b, pb) in elements.iter().enumerate() {
                let c = pa.compose(pb)?;
                table[a][b] = *index
                    .get(&c)
                    .ok_or_else(|| Error::Contract(format!("{name} is not closed under composition")))?;
            }
        }
        Ok(Self {
            name,
            elements,
            labels,
            table,
        })
    }

    pub fn name(&self) -> GroupName {
        self.name
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn element(&self, i: usize) -> &Permutation {
        &self.elements[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Index of `a ∘ b` (`b` acts first).
    pub fn mul(&self, a: usize, b: usize) -> usize {
        self.table[a][b]
    }

    /// Prefix products `y_i = x_i ∘ x_{i-1} ∘ .. ∘ x_1`.
    pub fn prefix_products(&self, xs: &[usize]) -> Vec<usize> {
        let mut y = 0;
        xs.iter()
            .map(|&x| {
                y = self.mul(x, y);
                y
            })
            .collect()
    }
}

/// `r_k: i -> i + k (mod m)`.
pub fn rotation(m: usize, k: usize) -> Permutation {
    Permutation::new((0..m).map(|i| (i + k) % m).collect()).expect("rotation is a bijection")
}

/// `s_k: i -> k - i (mod m)`.
pub fn reflection(m: usize, k: usize) -> Permutation {
    Permutation::new((0..m).map(|i| (k + m - i) % m).collect()).expect("reflection is a bijection")
}
