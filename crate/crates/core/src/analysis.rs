//! Post-hoc inspection: effective-rank traces of hidden states, recorded
//! betas, key PCA and merged length-extrapolation tables. Everything is
//! returned as plain data with CSV/JSON writers; no plotting.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tape;
use crate::constructions::{ConstructedModel, InputTrace, StateTrace};
use crate::error::{ensure, Error, Result};
use crate::numerics::{pca, singular_values, Matrix};
use crate::recurrence::{
    forward_sequential, model_forward_tape, trace_step_inputs, weights_on_tape, HiddenState, TokenBatch,
};
use crate::training::{EvalTable, TrainedModel};

/// Effective rank of a state; `zero_state` marks the all-zero convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveRank {
    pub value: f64,
    pub zero_state: bool,
}

/// `exp(-sum p_k ln p_k)` with `p_k = sigma_k / sum |sigma_i|`. A zero matrix
/// gives 0 with `zero_state` set.
pub fn effective_rank(h: &Matrix) -> Result<EffectiveRank> {
    let sigma = singular_values(h)?;
    let total: f64 = sigma.iter().map(|s| s.abs()).sum();
    if !total.is_finite() {
        return Err(Error::numerical("effective rank of a non-finite matrix"));
    }
    if total == 0.0 {
        return Ok(EffectiveRank {
            value: 0.0,
            zero_state: true,
        });
    }
    let entropy: f64 = sigma
        .iter()
        .map(|s| s / total)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(EffectiveRank {
        value: entropy.exp(),
        zero_state: false,
    })
}

/// Models whose recurrent heads can be inspected token by token.
pub trait Inspect {
    /// `[layer][head][t]` step inputs for one sequence.
    fn step_inputs(&self, tokens: &[usize]) -> Result<InputTrace>;
    /// `[layer][head][t]` states after each token.
    fn states(&self, tokens: &[usize]) -> Result<StateTrace>;
}

impl Inspect for ConstructedModel {
    fn step_inputs(&self, tokens: &[usize]) -> Result<InputTrace> {
        ConstructedModel::step_inputs(self, tokens)
    }

    fn states(&self, tokens: &[usize]) -> Result<StateTrace> {
        ConstructedModel::states(self, tokens)
    }
}

impl Inspect for TrainedModel {
    fn step_inputs(&self, tokens: &[usize]) -> Result<InputTrace> {
        ensure!(!tokens.is_empty(), "cannot inspect an empty sequence");
        let batch = TokenBatch::from_sequences(&[tokens], 0)?;
        let mut tape = Tape::inference();
        let w = weights_on_tape(&mut tape, &self.weights)?;
        let out = model_forward_tape(&mut tape, &w, &self.cfg, &batch)?;
        out.traces
            .iter()
            .map(|trace| {
                (0..self.cfg.heads)
                    .map(|head| {
                        (0..tokens.len())
                            .map(|row| trace_step_inputs(&tape, trace, &self.cfg, row, head))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect()
            })
            .collect()
    }

    fn states(&self, tokens: &[usize]) -> Result<StateTrace> {
        let h0 = HiddenState::zeros(self.cfg.head_key_dim, self.cfg.head_value_dim);
        self.step_inputs(tokens)?
            .iter()
            .map(|layer| layer.iter().map(|seq| forward_sequential(&h0, seq)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub position: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErankTrace {
    pub layer: usize,
    pub heads: Vec<usize>,
    /// `[head][t]`, parallel to `heads`.
    pub values: Vec<Vec<f64>>,
    pub zero_state: Vec<Vec<bool>>,
    pub markers: Vec<Marker>,
}

impl ErankTrace {
    /// Long format: `head,position,erank,zero_state`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["head", "position", "erank", "zero_state"])
            .map_err(|e| csv_err(path, e))?;
        for (i, head) in self.heads.iter().enumerate() {
            for (t, v) in self.values[i].iter().enumerate() {
                w.write_record([head.to_string(), t.to_string(), v.to_string(), self.zero_state[i][t].to_string()])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Effective rank of the selected heads' states at every position.
pub fn erank_trace(
    model: &dyn Inspect,
    tokens: &[usize],
    layer: usize,
    heads: &[usize],
    markers: Vec<Marker>,
) -> Result<ErankTrace> {
    let states = model.states(tokens)?;
    ensure!(layer < states.len(), "layer {layer} out of range ({} layers)", states.len());
    let layer_states = &states[layer];
    let mut values = Vec::with_capacity(heads.len());
    let mut zero_state = Vec::with_capacity(heads.len());
    for &h in heads {
        ensure!(h < layer_states.len(), "head {h} out of range ({} heads)", layer_states.len());
        let ranks = layer_states[h]
            .iter()
            .map(|s| effective_rank(s.matrix()))
            .collect::<Result<Vec<_>>>()?;
        values.push(ranks.iter().map(|r| r.value).collect());
        zero_state.push(ranks.iter().map(|r| r.zero_state).collect());
    }
    Ok(ErankTrace {
        layer,
        heads: heads.to_vec(),
        values,
        zero_state,
        markers,
    })
}

/// Betas per layer as `[layer][t][factor][head]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRecord {
    pub betas: Vec<Vec<Vec<Vec<f64>>>>,
}

impl BetaRecord {
    /// Mean beta of one head in one layer over positions and factors.
    pub fn head_mean(&self, layer: usize, head: usize) -> f64 {
        let vals: Vec<f64> = self.betas[layer]
            .iter()
            .flat_map(|t| t.iter().map(move |f| f[head]))
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn all(&self) -> impl Iterator<Item = f64> + '_ {
        self.betas.iter().flatten().flatten().flatten().copied()
    }

    /// Long format: `layer,position,factor,head,beta`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["layer", "position", "factor", "head", "beta"])
            .map_err(|e| csv_err(path, e))?;
        for (l, layer) in self.betas.iter().enumerate() {
            for (t, pos) in layer.iter().enumerate() {
                for (j, factor) in pos.iter().enumerate() {
                    for (h, b) in factor.iter().enumerate() {
                        w.write_record([l.to_string(), t.to_string(), j.to_string(), h.to_string(), b.to_string()])
                            .map_err(|e| csv_err(path, e))?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn record_betas(model: &dyn Inspect, tokens: &[usize]) -> Result<BetaRecord> {
    let inputs = model.step_inputs(tokens)?;
    let betas = inputs
        .iter()
        .map(|layer| {
            (0..tokens.len())
                .map(|t| {
                    let n_h = layer[0][t].n_h();
                    (0..n_h).map(|j| layer.iter().map(|head| head[t].betas()[j]).collect()).collect()
                })
                .collect()
        })
        .collect();
    Ok(BetaRecord { betas })
}

/// Explained variance ratios of the keys (all factors, all positions) of
/// one head over a set of sequences, descending.
pub fn key_pca(model: &dyn Inspect, sequences: &[Vec<usize>], layer: usize, head: usize) -> Result<Vec<f64>> {
    let mut keys = Vec::new();
    for seq in sequences {
        let inputs = model.step_inputs(seq)?;
        ensure!(layer < inputs.len(), "layer {layer} out of range ({} layers)", inputs.len());
        ensure!(head < inputs[layer].len(), "head {head} out of range ({} heads)", inputs[layer].len());
        for s in &inputs[layer][head] {
            keys.extend(s.keys().iter().cloned());
        }
    }
    Ok(pca(&keys)?.explained_variance_ratios)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub length: usize,
    pub accuracy: f64,
    pub scaled_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationReport {
    pub train_length: Option<usize>,
    pub chance_accuracy: f64,
    pub rows: Vec<ReportRow>,
}

/// Merges named eval tables into one long table. All tables must cover the
/// same lengths and share a chance level.
pub fn extrapolation_report(tables: &[(String, EvalTable)], train_length: Option<usize>) -> Result<ExtrapolationReport> {
    ensure!(!tables.is_empty(), "no eval tables given");
    let lengths = |t: &EvalTable| t.rows.iter().map(|r| r.length).collect::<Vec<_>>();
    let (first_name, first) = &tables[0];
    for (name, t) in &tables[1..] {
        ensure!(
            lengths(t) == lengths(first),
            "tables {first_name} and {name} cover different lengths"
        );
        ensure!(
            (t.chance_accuracy - first.chance_accuracy).abs() < 1e-12,
            "tables {first_name} and {name} have different chance levels"
        );
    }
    let rows = tables
        .iter()
        .flat_map(|(name, t)| {
            t.rows.iter().map(move |r| ReportRow {
                model: name.clone(),
                length: r.length,
                accuracy: r.accuracy,
                scaled_accuracy: r.scaled_accuracy,
            })
        })
        .collect();
    Ok(ExtrapolationReport {
        train_length,
        chance_accuracy: first.chance_accuracy,
        rows,
    })
}

impl ExtrapolationReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Checks a serialized report against its fixed schema: an object with
/// exactly `train_length` (null or integer), `chance_accuracy` (number in
/// [0, 1]) and `rows`, each row holding exactly `model` (string), `length`
/// (positive integer), `accuracy` (in [0, 1]) and `scaled_accuracy` (number).
pub fn validate_report_json(v: &Value) -> Result<()> {
    let bad = |msg: &str| Err(Error::contract(format!("report schema: {msg}")));
    let Some(obj) = v.as_object() else {
        return bad("top level is not an object");
    };
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    if keys != ["chance_accuracy", "rows", "train_length"] {
        return bad(&format!("unexpected keys {keys:?}"));
    }
    if !(obj["train_length"].is_null() || obj["train_length"].is_u64()) {
        return bad("train_length must be null or a non-negative integer");
    }
    let unit = |x: &Value| x.as_f64().is_some_and(|f| (0.0..=1.0).contains(&f));
    if !unit(&obj["chance_accuracy"]) {
        return bad("chance_accuracy must be a number in [0, 1]");
    }
    let Some(rows) = obj["rows"].as_array() else {
        return bad("rows must be an array");
    };
    for (i, row) in rows.iter().enumerate() {
        let Some(r) = row.as_object() else {
            return bad(&format!("row {i} is not an object"));
        };
        let mut keys: Vec<&str> = r.keys().map(String::as_str).collect();
        keys.sort_unstable();
        let ok = keys == ["accuracy", "length", "model", "scaled_accuracy"]
            && r["model"].is_string()
            && r["length"].as_u64().is_some_and(|l| l >= 1)
            && unit(&r["accuracy"])
            && r["scaled_accuracy"].is_number();
        if !ok {
            return bad(&format!("row {i} does not match the schema"));
        }
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::contract(format!("csv error at {}: {other:?}", path.display())),
    }
}
