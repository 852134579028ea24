use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    Digit(usize),
    Plus,
    Minus,
    Times,
    Equals,
    Open,
    Close,
}

/// Sampling knobs for bracketed expressions. At each node of the recursive
/// expansion the sampler wraps the sub-expression in brackets with
/// probability `p_paren`, writes a negated bracket `(-x)` with probability
/// `p_negate`, and otherwise splits the token budget at a uniform point
/// around a uniform binary operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExprSampler {
    pub p_paren: f64,
    pub p_negate: f64,
}

impl Default for ExprSampler {
    fn default() -> Self {
        Self {
            p_paren: 0.25,
            p_negate: 0.1,
        }
    }
}

impl ExprSampler {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.p_paren >= 0.0 && self.p_negate >= 0.0 && self.p_paren + self.p_negate <= 1.0,
            "expression sampler probabilities {self:?} must be non-negative and sum to at most 1"
        );
        Ok(())
    }
}

const OPS: [Symbol; 3] = [Symbol::Plus, Symbol::Minus, Symbol::Times];

/// Operands and binary operators alternating, with the largest odd length
/// that fits `budget`.
pub fn sample_flat(rng: &mut impl Rng, modulus: usize, budget: usize) -> Result<Vec<Symbol>> {
    ensure!(budget >= 1, "no room for an expression");
    let len = if budget % 2 == 1 { budget } else { budget - 1 };
    Ok((0..len)
        .map(|i| {
            if i % 2 == 0 {
                Symbol::Digit(rng.gen_range(0..modulus))
            } else {
                OPS[rng.gen_range(0..3)]
            }
        })
        .collect())
}

/// Bracketed expression with the largest length not exceeding `budget`
/// that the enabled constructions can produce (every length but 2 when
/// negation is enabled).
pub fn sample_nested(rng: &mut impl Rng, modulus: usize, budget: usize, knobs: &ExprSampler) -> Result<Vec<Symbol>> {
    ensure!(budget >= 1, "no room for an expression");
    knobs.validate()?;
    let table = Feasible::new(budget, knobs);
    let len = (1..=budget).rev().find(|&b| table.ok(b)).expect("length 1 is always feasible");
    let mut out = Vec::with_capacity(len);
    expand(rng, modulus, len, knobs, &table, &mut out);
    Ok(out)
}

/// `ok[b]`: some expression of exactly `b` tokens can be generated.
struct Feasible {
    ok: Vec<bool>,
    wrap: bool,
    negate: bool,
}

impl Feasible {
    fn new(max: usize, knobs: &ExprSampler) -> Self {
        let mut t = Self {
            ok: vec![false; max + 1],
            wrap: knobs.p_paren > 0.0,
            negate: knobs.p_negate > 0.0,
        };
        for b in 1..=max {
            t.ok[b] = b == 1 || t.can_wrap(b) || t.can_negate(b) || !t.splits(b).is_empty();
        }
        t
    }

    fn ok(&self, b: usize) -> bool {
        self.ok[b]
    }

    fn can_wrap(&self, b: usize) -> bool {
        self.wrap && b >= 3 && self.ok[b - 2]
    }

    fn can_negate(&self, b: usize) -> bool {
        self.negate && b >= 4 && self.ok[b - 3]
    }

    fn splits(&self, b: usize) -> Vec<usize> {
        if b < 3 {
            return vec![];
        }
        (1..=b - 2).filter(|&l| self.ok[l] && self.ok[b - 1 - l]).collect()
    }
}

fn expand(rng: &mut impl Rng, modulus: usize, b: usize, knobs: &ExprSampler, t: &Feasible, out: &mut Vec<Symbol>) {
    if b == 1 {
        out.push(Symbol::Digit(rng.gen_range(0..modulus)));
        return;
    }
    let splits = t.splits(b);
    let mut weights = [
        if t.can_wrap(b) { knobs.p_paren } else { 0.0 },
        if t.can_negate(b) { knobs.p_negate } else { 0.0 },
        if splits.is_empty() { 0.0 } else { 1.0 - knobs.p_paren - knobs.p_negate },
    ];
    if weights.iter().sum::<f64>() <= 0.0 {
        // only a zero-weight construction fits this exact length
        weights = [t.can_wrap(b), t.can_negate(b), !splits.is_empty()].map(|ok| if ok { 1.0 } else { 0.0 });
    }
    let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
    let choice = weights
        .iter()
        .position(|&w| {
            u -= w;
            w > 0.0 && u < 0.0
        })
        .unwrap_or_else(|| weights.iter().rposition(|&w| w > 0.0).expect("b is feasible"));
    match choice {
        0 => {
            out.push(Symbol::Open);
            expand(rng, modulus, b - 2, knobs, t, out);
            out.push(Symbol::Close);
        }
        1 => {
            out.push(Symbol::Open);
            out.push(Symbol::Minus);
            expand(rng, modulus, b - 3, knobs, t, out);
            out.push(Symbol::Close);
        }
        _ => {
            let l = splits[rng.gen_range(0..splits.len())];
            expand(rng, modulus, l, knobs, t, out);
            out.push(OPS[rng.gen_range(0..3)]);
            expand(rng, modulus, b - 1 - l, knobs, t, out);
        }
    }
}

/// Value modulo `modulus` with `*` binding tighter than `+`/`-`, left
/// associativity, and a leading `-` after `(` negating the first operand.
/// Shunting-yard evaluation.
pub fn evaluate(expr: &[Symbol], modulus: usize) -> Result<usize> {
    let m = modulus as i64;
    let prec = |s: Symbol| match s {
        Symbol::Times => 2,
        Symbol::Plus | Symbol::Minus => 1,
        _ => 0,
    };
    let apply = |vals: &mut Vec<i64>, op: Symbol| -> Result<()> {
        let (Some(b), Some(a)) = (vals.pop(), vals.pop()) else {
            return Err(crate::Error::Contract("operator without operands".into()));
        };
        let r = match op {
            Symbol::Plus => a + b,
            Symbol::Minus => a - b,
            Symbol::Times => a * b,
            _ => unreachable!("only binary operators are applied"),
        };
        vals.push(r.rem_euclid(m));
        Ok(())
    };
    let mut vals: Vec<i64> = vec![];
    let mut ops: Vec<Symbol> = vec![];
    let mut prev: Option<Symbol> = None;
    for &s in expr {
        match s {
            Symbol::Digit(d) => {
                ensure!(d < modulus, "digit {d} outside 0..{modulus}");
                vals.push(d as i64);
            }
            Symbol::Open => ops.push(Symbol::Open),
            Symbol::Close => {
                while let Some(op) = ops.pop() {
                    if op == Symbol::Open {
                        break;
                    }
                    apply(&mut vals, op)?;
                }
            }
            Symbol::Minus if prev == Some(Symbol::Open) => {
                // unary: (-x ..) == (0 - x ..)
                vals.push(0);
                ops.push(Symbol::Minus);
            }
            Symbol::Plus | Symbol::Minus | Symbol::Times => {
                while let Some(&top) = ops.last() {
                    if top != Symbol::Open && prec(top) >= prec(s) {
                        ops.pop();
                        apply(&mut vals, top)?;
                    } else {
                        break;
                    }
                }
                ops.push(s);
            }
            Symbol::Equals => return Err(crate::Error::Contract("'=' inside expression".into())),
        }
        prev = Some(s);
    }
    while let Some(op) = ops.pop() {
        ensure!(op != Symbol::Open, "unbalanced brackets");
        apply(&mut vals, op)?;
    }
    ensure!(vals.len() == 1, "malformed expression");
    Ok(vals[0] as usize)
}
