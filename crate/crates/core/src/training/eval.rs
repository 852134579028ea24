use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::recurrence::{model_forward_batch, ModelConfig, ModelWeights};
use crate::tasks::{scaled_accuracy, TaskInstance, TaskSpec};

/// Anything that maps token sequences to one predicted class per position.
pub trait Predictor {
    fn predict(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<usize>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub cfg: ModelConfig,
    pub weights: ModelWeights,
}

impl Predictor for TrainedModel {
    fn predict(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
        let logits = model_forward_batch(seqs, &self.weights, &self.cfg)?;
        Ok(logits
            .iter()
            .map(|l| (0..l.rows()).map(|r| argmax(l.row(r))).collect())
            .collect())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub length: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub scaled_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub chance_accuracy: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn accuracy_at(&self, length: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.length == length).map(|r| r.accuracy)
    }

    pub fn scaled_at(&self, length: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.length == length).map(|r| r.scaled_accuracy)
    }

    fn from_counts(chance: f64, counts: &[(usize, usize, usize)]) -> Result<Self> {
        let rows = counts
            .iter()
            .map(|&(length, correct, total)| {
                let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
                Ok(EvalRow {
                    length,
                    correct,
                    total,
                    accuracy,
                    scaled_accuracy: scaled_accuracy(accuracy, chance)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            chance_accuracy: chance,
            rows,
        })
    }
}

/// Seed of the evaluation set for one length, derived from the run seed.
pub fn eval_seed(seed: u64, length: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xE7A1_0000_0000_0000 ^ length as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionRecord {
    length: usize,
    targets: Vec<usize>,
    mask: Vec<bool>,
    predictions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub seed: u64,
    pub samples: usize,
    pub batch: usize,
}

/// Exact-match accuracy over unmasked positions, one row per input length.
/// When `predictions` is given, every instance is also written there as a
/// JSON line.
pub fn evaluate(
    model: &dyn Predictor,
    task: &TaskSpec,
    lengths: &[usize],
    opts: EvalOptions,
    predictions: Option<&Path>,
) -> Result<EvalTable> {
    ensure!(opts.samples >= 1 && opts.batch >= 1, "evaluation needs samples and batch >= 1");
    ensure!(lengths.iter().all(|&l| l >= 1), "evaluation lengths must be >= 1");
    let mut writer = match predictions {
        Some(p) => Some((BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?), p)),
        None => None,
    };
    let mut counts = vec![];
    for &length in lengths {
        let insts = task.generate(eval_seed(opts.seed, length), opts.samples, [length, length])?;
        let (mut correct, mut total) = (0, 0);
        for chunk in insts.chunks(opts.batch) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|i| i.tokens.as_slice()).collect();
            let preds = model.predict(&seqs)?;
            ensure!(preds.len() == chunk.len(), "predictor returned {} sequences for {}", preds.len(), chunk.len());
            for (inst, pred) in chunk.iter().zip(preds) {
                let (c, t) = score(inst, &pred)?;
                correct += c;
                total += t;
                if let Some((w, p)) = writer.as_mut() {
                    let rec = PredictionRecord {
                        length,
                        targets: inst.targets.clone(),
                        mask: inst.loss_mask.clone(),
                        predictions: pred,
                    };
                    serde_json::to_writer(&mut *w, &rec)?;
                    w.write_all(b"\n").map_err(|e| Error::io(*p, e))?;
                }
            }
        }
        counts.push((length, correct, total));
    }
    if let Some((mut w, p)) = writer {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    EvalTable::from_counts(task.chance_accuracy()?, &counts)
}

fn score(inst: &TaskInstance, pred: &[usize]) -> Result<(usize, usize)> {
    ensure!(pred.len() == inst.len(), "{} predictions for {} positions", pred.len(), inst.len());
    let mut c = 0;
    let mut t = 0;
    for ((p, tgt), m) in pred.iter().zip(&inst.targets).zip(&inst.loss_mask) {
        if *m {
            t += 1;
            c += usize::from(p == tgt);
        }
    }
    Ok((c, t))
}

/// Rebuilds the table from a predictions file written by [`evaluate`].
pub fn table_from_predictions(path: &Path, chance: f64) -> Result<EvalTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut counts: Vec<(usize, usize, usize)> = vec![];
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: PredictionRecord = serde_json::from_str(&line)?;
        let idx = match counts.iter().position(|c| c.0 == rec.length) {
            Some(i) => i,
            None => {
                counts.push((rec.length, 0, 0));
                counts.len() - 1
            }
        };
        for ((p, t), m) in rec.predictions.iter().zip(&rec.targets).zip(&rec.mask) {
            if *m {
                counts[idx].2 += 1;
                counts[idx].1 += usize::from(p == t);
            }
        }
    }
    EvalTable::from_counts(chance, &counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskFamily;

    struct Oracle;

    impl Predictor for Oracle {
        fn predict(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
            Ok(seqs
                .iter()
                .map(|s| {
                    let mut acc = 0;
                    s.iter()
                        .map(|&t| {
                            if t < 2 {
                                acc ^= t;
                            }
                            acc
                        })
                        .collect()
                })
                .collect())
        }
    }

    fn parity() -> TaskSpec {
        TaskSpec {
            family: TaskFamily::Parity,
            train_length: [3, 40],
            eval_lengths: vec![40, 64],
        }
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let opts = EvalOptions {
            seed: 0,
            samples: 20,
            batch: 7,
        };
        let t = evaluate(&Oracle, &parity(), &[8, 40], opts, None).unwrap();
        assert!(t.rows.iter().all(|r| r.accuracy == 1.0 && r.scaled_accuracy == 1.0));
        assert_eq!(t.rows[1].total, 20 * 40);
    }

    #[test]
    fn table_matches_predictions_file() {
        struct Zeros;
        impl Predictor for Zeros {
            fn predict(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
                Ok(seqs.iter().map(|s| vec![0; s.len()]).collect())
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.jsonl");
        let opts = EvalOptions {
            seed: 3,
            samples: 50,
            batch: 16,
        };
        let t = evaluate(&Zeros, &parity(), &[16, 32], opts, Some(&p)).unwrap();
        assert_eq!(table_from_predictions(&p, 0.5).unwrap(), t);
        assert!((t.rows[0].accuracy - 0.5).abs() < 0.1);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
