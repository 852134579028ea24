use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalOptions, EvalTable, TrainedModel};
use super::optim::{adamw_step, clip_grad_norm, cosine_schedule, global_norm, AdamWParams, OptimState};
use crate::autodiff::Tape;
use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;
use crate::recurrence::{model_forward_tape, save_checkpoint, ModelConfig, ModelWeights, TokenBatch};
use crate::tasks::{TaskInstance, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Passes over the generated training set.
    pub epochs: usize,
    /// Size of the generated training set.
    pub samples: usize,
    /// Total optimizer steps; when set, overrides `epochs` and cycles through
    /// reshuffled passes as needed.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Evaluate every this many steps (always at the end).
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Print a progress line to stderr every this many steps.
    #[serde(default)]
    pub log_every: Option<usize>,
}

fn default_warmup() -> f64 {
    0.1
}
fn default_min_lr() -> f64 {
    1e-6
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_eval_samples() -> usize {
    256
}
fn default_eval_batch() -> usize {
    64
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr >= 0.0 && self.lr.is_finite(), "lr must be finite and >= 0");
        ensure!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure!(self.samples >= 1, "samples must be >= 1");
        ensure!(self.epochs >= 1 || self.steps.is_some(), "epochs must be >= 1");
        ensure!((0.0..=1.0).contains(&self.warmup_frac), "warmup_frac must be in [0, 1]");
        ensure!(self.min_lr >= 0.0, "min_lr must be >= 0");
        ensure!(self.grad_clip.is_none_or(|c| c > 0.0), "grad_clip must be > 0");
        ensure!(self.eval_samples >= 1 && self.eval_batch >= 1, "eval_samples and eval_batch must be >= 1");
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * self.samples.div_ceil(self.batch_size))
    }

    fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Everything a training run needs; the on-disk config file mirrors it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        let v = self.task.vocab()?.size();
        ensure!(
            self.model.vocab_size == v,
            "model.vocab_size is {} but the task needs {v} (alphabet plus BOS)",
            self.model.vocab_size
        );
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub eval: EvalTable,
    pub final_loss: f64,
    pub steps: usize,
    pub metrics_path: PathBuf,
}

/// Norm scales are excluded from weight decay.
fn decays(name: &str) -> bool {
    !name.ends_with("_norm")
}

struct Batch {
    tokens: TokenBatch,
    targets: Vec<usize>,
    mask: Vec<bool>,
}

fn make_batch(insts: &[&TaskInstance], pad: usize) -> Result<Batch> {
    let seqs: Vec<&[usize]> = insts.iter().map(|i| i.tokens.as_slice()).collect();
    let tokens = TokenBatch::from_sequences(&seqs, pad)?;
    let mut targets = Vec::with_capacity(tokens.ids.len());
    let mut mask = Vec::with_capacity(tokens.ids.len());
    for inst in insts {
        targets.extend(&inst.targets);
        mask.extend(&inst.loss_mask);
        let fill = tokens.seq_len - inst.len();
        targets.extend(std::iter::repeat_n(pad, fill));
        mask.extend(std::iter::repeat_n(false, fill));
    }
    Ok(Batch { tokens, targets, mask })
}

/// Loss and gradients (in `ModelWeights::fields` order) for one batch.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    shapes: &ModelWeights<(usize, usize)>,
    params: &[Matrix],
    tokens: &TokenBatch,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars = shapes.with_values(params.iter().map(|m| tape.leaf(m.clone())))?;
    let out = model_forward_tape(&mut tape, &vars, cfg, tokens)?;
    let loss = tape.softmax_cross_entropy(out.logits, targets, mask)?;
    let value = tape.value(loss)?[(0, 0)];
    let mut grads = tape.backward(loss)?;
    let g = vars
        .fields()
        .into_iter()
        .map(|(_, v)| grads.take(*v))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, g))
}

/// Trains from scratch and writes `metrics.csv`, `checkpoint/` and
/// `eval.json` under `out_dir`.
pub fn train(run: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    run.validate()?;
    let (cfg, task, tc) = (&run.model, &run.task, &run.train);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vocab = task.vocab()?;

    let data = task.generate(tc.seed, tc.samples, task.train_length)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    init_rng.set_stream(1);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    shuffle_rng.set_stream(2);

    let weights = ModelWeights::init(cfg, &mut init_rng)?;
    let shapes = ModelWeights::shapes(cfg);
    let names: Vec<String> = weights.fields().into_iter().map(|(n, _)| n).collect();
    let decay: Vec<bool> = names.iter().map(|n| decays(n)).collect();
    let mut params: Vec<Matrix> = weights.fields().into_iter().map(|(_, m)| m.clone()).collect();
    let mut opt = OptimState::new(&params, tc.adamw());

    let total = tc.total_steps();
    let warmup = ((total as f64) * tc.warmup_frac).round() as usize;
    let eval_opts = EvalOptions {
        seed: tc.seed,
        samples: tc.eval_samples,
        batch: tc.eval_batch,
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = csv::Writer::from_path(&metrics_path).map_err(|e| csv_err(&metrics_path, e))?;
    let mut header: Vec<String> = ["step", "epoch", "loss", "lr", "grad_norm"].map(String::from).to_vec();
    header.extend(task.eval_lengths.iter().map(|l| format!("acc_len_{l}")));
    csv.write_record(&header).map_err(|e| csv_err(&metrics_path, e))?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0;
    let mut final_loss = f64::NAN;
    let mut eval = None;
    for step in 0..total {
        if cursor >= order.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
            epoch += 1;
        }
        let end = (cursor + tc.batch_size).min(order.len());
        let insts: Vec<&TaskInstance> = order[cursor..end].iter().map(|&i| &data[i]).collect();
        cursor = end;
        let batch = make_batch(&insts, vocab.pad)?;

        let lr = cosine_schedule(step + 1, total, warmup, tc.lr, tc.min_lr.min(tc.lr))?;
        let (loss, mut grads) = loss_and_grads(cfg, &shapes, &params, &batch.tokens, &batch.targets, &batch.mask)?;
        let grad_norm = match tc.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        if !loss.is_finite() || !grad_norm.is_finite() {
            csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
            return Err(Error::Numerical(nan_report(step, loss, lr, &names, &grads)));
        }
        adamw_step(&mut params, &grads, &decay, &mut opt, lr)?;
        final_loss = loss;

        let last = step + 1 == total;
        let mut row = vec![
            (step + 1).to_string(),
            epoch.to_string(),
            loss.to_string(),
            lr.to_string(),
            grad_norm.to_string(),
        ];
        if last || tc.eval_every.is_some_and(|k| (step + 1) % k == 0) {
            let model = TrainedModel {
                cfg: cfg.clone(),
                weights: shapes.with_values(params.iter().cloned())?,
            };
            let table = evaluate(&model, task, &task.eval_lengths, eval_opts, None)?;
            row.extend(table.rows.iter().map(|r| r.accuracy.to_string()));
            eval = Some(table);
        } else {
            row.extend(task.eval_lengths.iter().map(|_| String::new()));
        }
        csv.write_record(&row).map_err(|e| csv_err(&metrics_path, e))?;
        if let Some(k) = tc.log_every {
            if (step + 1) % k == 0 || last {
                eprintln!("step {}/{total} epoch {epoch} loss {loss:.5} lr {lr:.3e} grad_norm {grad_norm:.3e}", step + 1);
            }
        }
    }
    csv.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let weights = shapes.with_values(params)?;
    save_checkpoint(&out_dir.join("checkpoint"), cfg, &weights)?;
    let eval = eval.expect("the last step always evaluates");
    let p = out_dir.join("eval.json");
    std::fs::write(&p, serde_json::to_string_pretty(&eval)?).map_err(|e| Error::io(&p, e))?;
    Ok(TrainOutcome {
        model: TrainedModel { cfg: cfg.clone(), weights },
        eval,
        final_loss,
        steps: total,
        metrics_path,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn nan_report(step: usize, loss: f64, lr: f64, names: &[String], grads: &[Matrix]) -> String {
    let mut norms: Vec<(f64, &str)> = grads
        .iter()
        .zip(names)
        .map(|(g, n)| (g.frobenius_norm(), n.as_str()))
        .collect();
    norms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Less));
    let top: Vec<String> = norms.iter().take(5).map(|(v, n)| format!("{n}={v:e}")).collect();
    format!(
        "non-finite training state at step {}: loss {loss}, lr {lr:e}, largest grad norms [{}]",
        step + 1,
        top.join(", ")
    )
}

/// Trains one run per seed under `out_dir/seed_<s>`.
pub fn train_seeds(run: &RunConfig, seeds: &[u64], out_dir: &Path) -> Result<Vec<(u64, TrainOutcome)>> {
    seeds
        .iter()
        .map(|&s| {
            let mut r = run.clone();
            r.train.seed = s;
            Ok((s, train(&r, &out_dir.join(format!("seed_{s}")))?))
        })
        .collect()
}
