//! Seeded dataset generators with exact targets.
//!
//! Every instance starts with a beginning-of-sequence token whose position
//! is masked. Masked positions carry the padding id as target.

mod groups;
mod modarith;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub use groups::{reflection, rotation, Group, GroupName};
pub use modarith::{evaluate as evaluate_expression, sample_flat, sample_nested, ExprSampler, Symbol};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    #[serde(rename = "mask")]
    pub loss_mask: Vec<bool>,
}

impl TaskInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Length without the leading BOS token.
    pub fn input_len(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskFamily {
    GroupWord {
        group: GroupName,
    },
    Parity,
    ModarithNobrackets {
        #[serde(default = "default_modulus")]
        modulus: usize,
    },
    ModarithBrackets {
        #[serde(default = "default_modulus")]
        modulus: usize,
        #[serde(default)]
        sampler: ExprSampler,
    },
}

fn default_modulus() -> usize {
    5
}

/// Token alphabet plus the BOS id. `symbols` is the input alphabet;
/// BOS is `symbols.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub symbols: Vec<String>,
    pub bos: usize,
    pub pad: usize,
}

impl Vocab {
    fn new(symbols: Vec<String>, pad: Option<usize>) -> Self {
        let bos = symbols.len();
        Self {
            symbols,
            bos,
            pad: pad.unwrap_or(bos),
        }
    }

    /// Model vocabulary size: alphabet plus BOS.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: TaskFamily,
    /// Inclusive range of input lengths (BOS excluded) used for training.
    pub train_length: [usize; 2],
    pub eval_lengths: Vec<usize>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.train_length;
        ensure!(lo >= 1 && lo <= hi, "train_length [{lo}, {hi}] must satisfy 1 <= lo <= hi");
        ensure!(self.eval_lengths.iter().all(|&l| l >= 1), "eval lengths must be >= 1");
        match &self.family {
            TaskFamily::GroupWord { .. } | TaskFamily::Parity => {}
            TaskFamily::ModarithNobrackets { modulus } => {
                ensure!((2..=10).contains(modulus), "modulus {modulus} must be in 2..=10");
                ensure!(lo >= 2, "modular arithmetic needs length >= 2");
            }
            TaskFamily::ModarithBrackets { modulus, sampler } => {
                ensure!((2..=10).contains(modulus), "modulus {modulus} must be in 2..=10");
                ensure!(lo >= 2, "modular arithmetic needs length >= 2");
                sampler.validate()?;
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Ok(match &self.family {
            TaskFamily::GroupWord { group } => Vocab::new(Group::new(*group)?.labels().to_vec(), None),
            TaskFamily::Parity => Vocab::new(vec!["0".into(), "1".into()], None),
            TaskFamily::ModarithNobrackets { modulus } => arith_vocab(*modulus, false),
            TaskFamily::ModarithBrackets { modulus, .. } => arith_vocab(*modulus, true),
        })
    }

    /// Accuracy of uniform guessing over the target classes.
    pub fn chance_accuracy(&self) -> Result<f64> {
        Ok(match &self.family {
            TaskFamily::GroupWord { group } => 1.0 / Group::new(*group)?.order() as f64,
            TaskFamily::Parity => 0.5,
            TaskFamily::ModarithNobrackets { modulus } | TaskFamily::ModarithBrackets { modulus, .. } => {
                1.0 / *modulus as f64
            }
        })
    }

    /// `count` instances with input lengths drawn uniformly from `lengths`.
    pub fn generate(&self, seed: u64, count: usize, lengths: [usize; 2]) -> Result<Vec<TaskInstance>> {
        match &self.family {
            TaskFamily::GroupWord { group } => {
                let g = Group::new(*group)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                ensure!(lengths[0] >= 1 && lengths[0] <= lengths[1], "bad length range {lengths:?}");
                (0..count)
                    .map(|_| {
                        let len = rng.gen_range(lengths[0]..=lengths[1]);
                        Ok(group_instance(&g, &mut rng, len))
                    })
                    .collect()
            }
            TaskFamily::Parity => gen_parity(seed, count, lengths),
            TaskFamily::ModarithNobrackets { modulus } => {
                gen_modarith(*modulus, seed, count, lengths, false, &ExprSampler::default())
            }
            TaskFamily::ModarithBrackets { modulus, sampler } => {
                gen_modarith(*modulus, seed, count, lengths, true, sampler)
            }
        }
    }
}

fn arith_vocab(modulus: usize, brackets: bool) -> Vocab {
    let mut s: Vec<String> = (0..modulus).map(|d| d.to_string()).collect();
    s.extend(["+", "-", "*", "="].map(String::from));
    if brackets {
        s.extend(["(", ")"].map(String::from));
    }
    s.push("[PAD]".into());
    let pad = s.len() - 1;
    Vocab::new(s, Some(pad))
}

fn arith_id(sym: Symbol, modulus: usize) -> usize {
    match sym {
        Symbol::Digit(d) => d,
        Symbol::Plus => modulus,
        Symbol::Minus => modulus + 1,
        Symbol::Times => modulus + 2,
        Symbol::Equals => modulus + 3,
        Symbol::Open => modulus + 4,
        Symbol::Close => modulus + 5,
    }
}

fn group_instance(g: &Group, rng: &mut impl Rng, len: usize) -> TaskInstance {
    let xs: Vec<usize> = (0..len).map(|_| rng.gen_range(0..g.order())).collect();
    let bos = g.order();
    let mut tokens = vec![bos];
    tokens.extend(&xs);
    let mut targets = vec![bos];
    targets.extend(g.prefix_products(&xs));
    let mut loss_mask = vec![true; len + 1];
    loss_mask[0] = false;
    TaskInstance {
        tokens,
        targets,
        loss_mask,
    }
}

/// Uniform i.i.d. group elements of a fixed length; targets are prefix
/// products `x_i ∘ .. ∘ x_1` at every position.
pub fn gen_group_word(group: &Group, seed: u64, count: usize, length: usize) -> Result<Vec<TaskInstance>> {
    ensure!(length >= 1, "length must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| group_instance(group, &mut rng, length)).collect())
}

/// Random bit strings with running parity targets.
pub fn gen_parity(seed: u64, count: usize, lengths: [usize; 2]) -> Result<Vec<TaskInstance>> {
    ensure!(lengths[0] >= 1 && lengths[0] <= lengths[1], "bad length range {lengths:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let len = rng.gen_range(lengths[0]..=lengths[1]);
            let bits: Vec<usize> = (0..len).map(|_| rng.gen_range(0..2)).collect();
            parity_instance(&bits)
        })
        .collect())
}

pub fn parity_instance(bits: &[usize]) -> TaskInstance {
    let bos = 2;
    let mut tokens = vec![bos];
    tokens.extend(bits);
    let mut targets = vec![bos];
    let mut acc = 0;
    for &b in bits {
        acc ^= b;
        targets.push(acc);
    }
    let mut loss_mask = vec![true; bits.len() + 1];
    loss_mask[0] = false;
    TaskInstance {
        tokens,
        targets,
        loss_mask,
    }
}

/// Expressions followed by `=`; the only unmasked position is the `=`
/// token, whose target is the value modulo `modulus`. A sampled length
/// `L` leaves `L - 1` tokens for the expression, which is filled as far as
/// the grammar allows.
pub fn gen_modarith(
    modulus: usize,
    seed: u64,
    count: usize,
    lengths: [usize; 2],
    brackets: bool,
    sampler: &ExprSampler,
) -> Result<Vec<TaskInstance>> {
    ensure!(lengths[0] <= lengths[1], "bad length range {lengths:?}");
    ensure!(lengths[0] >= 2, "length {} leaves no room for an expression", lengths[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = arith_vocab(modulus, brackets);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(lengths[0]..=lengths[1]);
            let expr = if brackets {
                sample_nested(&mut rng, modulus, len - 1, sampler)?
            } else {
                sample_flat(&mut rng, modulus, len - 1)?
            };
            arith_instance(&expr, modulus, &vocab)
        })
        .collect()
}

fn arith_instance(expr: &[Symbol], modulus: usize, vocab: &Vocab) -> Result<TaskInstance> {
    let value = modarith::evaluate(expr, modulus)?;
    let mut tokens = vec![vocab.bos];
    tokens.extend(expr.iter().map(|&s| arith_id(s, modulus)));
    tokens.push(arith_id(Symbol::Equals, modulus));
    let n = tokens.len();
    let mut targets = vec![vocab.pad; n];
    targets[n - 1] = value;
    let mut loss_mask = vec![false; n];
    loss_mask[n - 1] = true;
    Ok(TaskInstance {
        tokens,
        targets,
        loss_mask,
    })
}

/// `(acc - acc_rand) / (1 - acc_rand)`, clamped below at 0.
pub fn scaled_accuracy(acc: f64, acc_rand: f64) -> Result<f64> {
    ensure!((0.0..1.0).contains(&acc_rand), "chance accuracy {acc_rand} outside [0, 1)");
    ensure!((0.0..=1.0).contains(&acc), "accuracy {acc} outside [0, 1]");
    Ok(((acc - acc_rand) / (1.0 - acc_rand)).max(0.0))
}

/// Writes one JSON object per line and a `<stem>.vocab.json` sidecar.
pub fn write_jsonl(path: &Path, instances: &[TaskInstance], vocab: &Vocab) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = path.with_extension("vocab.json");
    let text = serde_json::to_string_pretty(vocab)?;
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = vec![];
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
