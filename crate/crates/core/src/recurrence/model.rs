use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::core::{EigenvalueMode, StepInputs};
use crate::autodiff::{ScanDims, ScanInputs, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;

pub const CONV_WIDTH: usize = 4;

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_key_dim: usize,
    pub head_value_dim: usize,
    pub n_h: usize,
    #[serde(default)]
    pub eigenvalue_mode: EigenvalueMode,
    #[serde(default)]
    pub gated: bool,
    pub vocab_size: usize,
    pub model_dim: usize,
    #[serde(default)]
    pub conv: bool,
    /// Hidden width of the gated MLP; `4 * model_dim` when absent.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    /// Reuse the embedding table as the output projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_key_dim", self.head_key_dim),
            ("head_value_dim", self.head_value_dim),
            ("n_h", self.n_h),
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("mlp_hidden", self.mlp_hidden()),
        ] {
            ensure!(v >= 1, "model.{name} must be at least 1");
        }
        ensure!(self.norm_eps > 0.0, "model.norm_eps must be positive");
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(4 * self.model_dim)
    }
}

/// Depthwise causal convolution kernels (`channels x 4`), one per path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernels<T = Matrix> {
    pub query: T,
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

/// Learnable parameters of one layer. Linear maps are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = Matrix> {
    pub key_proj: Vec<T>,
    pub value_proj: Vec<T>,
    pub beta_proj: Vec<T>,
    pub gate_proj: Option<T>,
    pub query_proj: T,
    pub output_proj: T,
    pub readout_norm: T,
    pub mlp_norm: T,
    pub mlp_gate: T,
    pub mlp_up: T,
    pub mlp_down: T,
    pub conv: Option<ConvKernels<T>>,
}

/// All model parameters, generic over the leaf type so the same structure
/// serves for values, tape variables, gradients and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T = Matrix> {
    pub embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: T,
    /// `None` when the output projection is tied to the embedding.
    pub output_proj: Option<T>,
}

fn map_vec<'a, T, U>(
    prefix: &str,
    xs: &'a [T],
    f: &mut impl FnMut(&str, &'a T) -> Result<U>,
) -> Result<Vec<U>> {
    xs.iter()
        .enumerate()
        .map(|(j, x)| f(&format!("{prefix}.{j}"), x))
        .collect()
}

impl<T> LayerParams<T> {
    pub fn try_map<'a, U>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a T) -> Result<U>,
    ) -> Result<LayerParams<U>> {
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(LayerParams {
            key_proj: map_vec(&p("key_proj"), &self.key_proj, f)?,
            value_proj: map_vec(&p("value_proj"), &self.value_proj, f)?,
            beta_proj: map_vec(&p("beta_proj"), &self.beta_proj, f)?,
            gate_proj: self.gate_proj.as_ref().map(|g| f(&p("gate_proj"), g)).transpose()?,
            query_proj: f(&p("query_proj"), &self.query_proj)?,
            output_proj: f(&p("output_proj"), &self.output_proj)?,
            readout_norm: f(&p("readout_norm"), &self.readout_norm)?,
            mlp_norm: f(&p("mlp_norm"), &self.mlp_norm)?,
            mlp_gate: f(&p("mlp_gate"), &self.mlp_gate)?,
            mlp_up: f(&p("mlp_up"), &self.mlp_up)?,
            mlp_down: f(&p("mlp_down"), &self.mlp_down)?,
            conv: match &self.conv {
                Some(c) => Some(ConvKernels {
                    query: f(&p("conv.query"), &c.query)?,
                    keys: map_vec(&p("conv.key"), &c.keys, f)?,
                    values: map_vec(&p("conv.value"), &c.values, f)?,
                }),
                None => None,
            },
        })
    }
}

impl<T> ModelWeights<T> {
    /// Maps every tensor in a fixed order, passing its stable name.
    pub fn try_map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> Result<U>) -> Result<ModelWeights<U>> {
        Ok(ModelWeights {
            embedding: f("embedding", &self.embedding)?,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("layers.{i}"), &mut f))
                .collect::<Result<_>>()?,
            final_norm: f("final_norm", &self.final_norm)?,
            output_proj: self.output_proj.as_ref().map(|o| f("output_proj", o)).transpose()?,
        })
    }

    /// `(name, tensor)` pairs in the canonical order.
    pub fn fields(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.try_map(|name, t| {
            out.push((name.to_string(), t));
            Ok(())
        })
        .expect("collecting fields cannot fail");
        out
    }

    /// Rebuilds a structure of the same layout from tensors in canonical order.
    pub fn with_values<U>(&self, values: impl IntoIterator<Item = U>) -> Result<ModelWeights<U>> {
        let mut it = values.into_iter();
        let out = self.try_map(|name, _| {
            it.next()
                .ok_or_else(|| Error::contract(format!("missing tensor for {name}")))
        })?;
        ensure!(it.next().is_none(), "more tensors than parameters");
        Ok(out)
    }
}

impl ModelWeights<(usize, usize)> {
    /// Expected parameter shapes for `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let (l, h, n, d, nh) = (cfg.model_dim, cfg.heads, cfg.head_key_dim, cfg.head_value_dim, cfg.n_h);
        let hid = cfg.mlp_hidden();
        let layer = LayerParams {
            key_proj: vec![(l, h * n); nh],
            value_proj: vec![(l, h * d); nh],
            beta_proj: vec![(l, h); nh],
            gate_proj: cfg.gated.then_some((l, h)),
            query_proj: (l, h * n),
            output_proj: (h * d, l),
            readout_norm: (1, h * d),
            mlp_norm: (1, l),
            mlp_gate: (l, hid),
            mlp_up: (l, hid),
            mlp_down: (hid, l),
            conv: cfg.conv.then(|| ConvKernels {
                query: (h * n, CONV_WIDTH),
                keys: vec![(h * n, CONV_WIDTH); nh],
                values: vec![(h * d, CONV_WIDTH); nh],
            }),
        };
        ModelWeights {
            embedding: (cfg.vocab_size, l),
            layers: vec![layer; cfg.layers],
            final_norm: (1, l),
            output_proj: (!cfg.tie_embeddings).then_some((l, cfg.vocab_size)),
        }
    }
}

fn is_norm(name: &str) -> bool {
    name.ends_with("_norm")
}

fn is_conv(name: &str) -> bool {
    name.contains(".conv.")
}

impl ModelWeights {
    /// Default initialization: embeddings `N(0, 0.02)`, projections
    /// `N(0, 0.02 min(1, sqrt(2 / fan_in)))`, norm scales 1, conv kernels
    /// `U(-1/2, 1/2)`.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        ModelWeights::shapes(cfg).try_map(|name, &(r, c)| {
            Ok(if is_norm(name) {
                Matrix::filled(r, c, 1.0)
            } else if is_conv(name) {
                let u = Uniform::new_inclusive(-0.5, 0.5);
                Matrix::from_raw(r, c, (0..r * c).map(|_| u.sample(rng)).collect())
            } else {
                let std = if name == "embedding" {
                    0.02
                } else {
                    0.02 * (2.0 / r as f64).sqrt().min(1.0)
                };
                normal(rng, r, c, std)
            })
        })
    }

    /// Every non-norm tensor drawn from `N(0, std)`, norm scales from
    /// `U(0.5, 1.5)`. Used to build well-conditioned random models.
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng, std: f64) -> Result<Self> {
        cfg.validate()?;
        ModelWeights::shapes(cfg).try_map(|name, &(r, c)| {
            Ok(if is_norm(name) {
                let u = Uniform::new(0.5, 1.5);
                Matrix::from_raw(r, c, (0..r * c).map(|_| u.sample(rng)).collect())
            } else {
                normal(rng, r, c, std)
            })
        })
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelWeights::shapes(cfg);
        let got = self.fields();
        let want = expected.fields();
        ensure!(
            got.len() == want.len(),
            "weights have {} tensors, config implies {}",
            got.len(),
            want.len()
        );
        for ((name, m), (wname, shape)) in got.iter().zip(&want) {
            ensure!(name == wname, "tensor order mismatch: {name} vs {wname}");
            ensure!(m.shape() == **shape, "{name}: shape {:?}, expected {:?}", m.shape(), shape);
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.fields().iter().map(|(_, m)| m.data().len()).sum()
    }
}

fn normal(rng: &mut impl Rng, r: usize, c: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("std is positive");
    Matrix::from_raw(r, c, (0..r * c).map(|_| dist.sample(rng)).collect())
}

/// Token ids of `batch` sequences padded to a common `seq_len`, flattened
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    /// Pads shorter sequences with `pad` at the end. Causality keeps padding
    /// from influencing earlier positions.
    pub fn from_sequences(seqs: &[&[usize]], pad: usize) -> Result<Self> {
        ensure!(!seqs.is_empty(), "empty batch");
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        ensure!(seq_len >= 1, "sequences must be non-empty");
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, seq_len - s.len()));
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            seq_len,
        })
    }
}

/// Intermediate tape variables of one layer, kept for analysis.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub betas: Vec<Var>,
    pub gate: Option<Var>,
    pub query: Var,
    pub readout: Var,
}

pub struct ForwardOutput {
    /// `(batch * seq_len) x vocab`.
    pub logits: Var,
    pub traces: Vec<LayerTrace>,
}

fn maybe_conv(tape: &mut Tape, x: Var, kernel: Option<Var>, seq_len: usize) -> Result<Var> {
    match kernel {
        Some(k) => tape.causal_conv(x, k, seq_len),
        None => Ok(x),
    }
}

/// One layer on the tape: returns `MLP(RMSnorm(x + o))` for the residual
/// stream `x` of shape `(batch * seq_len) x model_dim`.
pub fn layer_forward_tape(
    tape: &mut Tape,
    x: Var,
    p: &LayerParams<Var>,
    cfg: &ModelConfig,
    batch: usize,
    seq_len: usize,
) -> Result<(Var, LayerTrace)> {
    let (n, d) = (cfg.head_key_dim, cfg.head_value_dim);
    let conv = p.conv.as_ref();

    let q = tape.matmul(x, p.query_proj)?;
    let q = maybe_conv(tape, q, conv.map(|c| c.query), seq_len)?;
    let q = tape.silu(q)?;
    let query = tape.l2_normalize(q, n)?;

    let (mut keys, mut values, mut betas) = (vec![], vec![], vec![]);
    for j in 0..cfg.n_h {
        let k = tape.matmul(x, p.key_proj[j])?;
        let k = maybe_conv(tape, k, conv.map(|c| c.keys[j]), seq_len)?;
        let k = tape.silu(k)?;
        keys.push(tape.l2_normalize(k, n)?);

        let v = tape.matmul(x, p.value_proj[j])?;
        values.push(maybe_conv(tape, v, conv.map(|c| c.values[j]), seq_len)?);

        let b = tape.matmul(x, p.beta_proj[j])?;
        let b = tape.sigmoid(b)?;
        betas.push(match cfg.eigenvalue_mode {
            EigenvalueMode::UnitInterval => b,
            EigenvalueMode::SymmetricInterval => tape.scale(b, 2.0)?,
        });
    }
    let gate = match p.gate_proj {
        Some(g) => {
            let g = tape.matmul(x, g)?;
            Some(tape.sigmoid(g)?)
        }
        None => None,
    };

    let readout = tape.delta_product_scan(&ScanInputs {
        keys: keys.clone(),
        values: values.clone(),
        betas: betas.clone(),
        gate,
        query,
        dims: ScanDims {
            batch,
            seq_len,
            heads: cfg.heads,
            key_dim: n,
            value_dim: d,
        },
    })?;
    let r = tape.rms_norm(readout, p.readout_norm, d, cfg.norm_eps)?;
    let o = tape.matmul(r, p.output_proj)?;

    let y = tape.add(x, o)?;
    let y = tape.rms_norm(y, p.mlp_norm, cfg.model_dim, cfg.norm_eps)?;
    let a = tape.matmul(y, p.mlp_gate)?;
    let a = tape.silu(a)?;
    let u = tape.matmul(y, p.mlp_up)?;
    let h = tape.mul(a, u)?;
    let out = tape.matmul(h, p.mlp_down)?;
    Ok((
        out,
        LayerTrace {
            keys,
            values,
            betas,
            gate,
            query,
            readout,
        },
    ))
}

/// Embedding, residual stack of layers, final norm and output projection.
pub fn model_forward_tape(
    tape: &mut Tape,
    w: &ModelWeights<Var>,
    cfg: &ModelConfig,
    tokens: &TokenBatch,
) -> Result<ForwardOutput> {
    ensure!(
        tokens.ids.len() == tokens.batch * tokens.seq_len,
        "token batch has {} ids for {}x{}",
        tokens.ids.len(),
        tokens.batch,
        tokens.seq_len
    );
    let mut x = tape.embedding(w.embedding, &tokens.ids)?;
    let mut traces = Vec::with_capacity(w.layers.len());
    for layer in &w.layers {
        let (out, trace) = layer_forward_tape(tape, x, layer, cfg, tokens.batch, tokens.seq_len)?;
        x = tape.add(x, out)?;
        traces.push(trace);
    }
    let x = tape.rms_norm(x, w.final_norm, cfg.model_dim, cfg.norm_eps)?;
    let logits = match w.output_proj {
        Some(o) => tape.matmul(x, o)?,
        None => {
            let et = tape.transpose(w.embedding)?;
            tape.matmul(x, et)?
        }
    };
    Ok(ForwardOutput { logits, traces })
}

/// Registers `weights` as leaves of `tape`.
pub fn weights_on_tape(tape: &mut Tape, weights: &ModelWeights) -> Result<ModelWeights<Var>> {
    weights.try_map(|_, m| Ok(tape.leaf(m.clone())))
}

/// Logits (`t x vocab`) for one token sequence.
pub fn model_forward(tokens: &[usize], weights: &ModelWeights, cfg: &ModelConfig) -> Result<Matrix> {
    Ok(model_forward_batch(&[tokens], weights, cfg)?.remove(0))
}

/// Logits for several sequences evaluated as one padded batch.
pub fn model_forward_batch(seqs: &[&[usize]], weights: &ModelWeights, cfg: &ModelConfig) -> Result<Vec<Matrix>> {
    let batch = TokenBatch::from_sequences(seqs, 0)?;
    let mut tape = Tape::inference();
    let w = weights_on_tape(&mut tape, weights)?;
    let out = model_forward_tape(&mut tape, &w, cfg, &batch)?;
    let logits = tape.value(out.logits)?;
    let v = cfg.vocab_size;
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let start = b * batch.seq_len * v;
            Matrix::from_raw(s.len(), v, logits.data()[start..start + s.len() * v].to_vec())
        })
        .collect())
}

/// Layer output `MLP(RMSnorm(x_t + o_t))` for a single sequence of residual
/// vectors.
pub fn layer_forward(xs: &[Vec<f64>], params: &LayerParams, cfg: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    ensure!(!xs.is_empty(), "layer_forward needs at least one token");
    ensure!(
        xs.iter().all(|x| x.len() == cfg.model_dim),
        "inputs must have model dimension {}",
        cfg.model_dim
    );
    let mut tape = Tape::inference();
    let x = tape.leaf(Matrix::from_vec(xs.len(), cfg.model_dim, xs.concat())?);
    let p = params.try_map("layer", &mut |_, m: &Matrix| Ok(tape.leaf(m.clone())))?;
    let (out, _) = layer_forward_tape(&mut tape, x, &p, cfg, 1, xs.len())?;
    let out = tape.value(out)?;
    Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
}

/// Per-head step inputs of one token of a traced forward pass.
pub fn trace_step_inputs(
    tape: &Tape,
    trace: &LayerTrace,
    cfg: &ModelConfig,
    row: usize,
    head: usize,
) -> Result<StepInputs> {
    ensure!(head < cfg.heads, "head {head} out of range ({} heads)", cfg.heads);
    let (n, d) = (cfg.head_key_dim, cfg.head_value_dim);
    let seg = |v: Var, w: usize| -> Result<Vec<f64>> {
        let m = tape.value(v)?;
        ensure!(row < m.rows(), "row {row} out of range");
        Ok(m.row(row)[head * w..(head + 1) * w].to_vec())
    };
    StepInputs::new(
        trace.keys.iter().map(|k| seg(*k, n)).collect::<Result<_>>()?,
        trace.values.iter().map(|v| seg(*v, d)).collect::<Result<_>>()?,
        trace.betas.iter().map(|b| Ok(seg(*b, 1)?[0])).collect::<Result<_>>()?,
        match trace.gate {
            Some(g) => seg(g, 1)?[0],
            None => 1.0,
        },
    )
}

/// Per-head step inputs for one input vector `x`, treated as a sequence of
/// length one (the causal conv then sees only its current tap).
pub fn compute_step_inputs(x: &[f64], params: &LayerParams, cfg: &ModelConfig) -> Result<Vec<StepInputs>> {
    ensure!(
        x.len() == cfg.model_dim,
        "input has dimension {}, model dimension is {}",
        x.len(),
        cfg.model_dim
    );
    let mut tape = Tape::inference();
    let xv = tape.leaf(Matrix::from_vec(1, cfg.model_dim, x.to_vec())?);
    let p = params.try_map("layer", &mut |_, m: &Matrix| Ok(tape.leaf(m.clone())))?;
    let (_, trace) = layer_forward_tape(&mut tape, xv, &p, cfg, 1, 1)?;
    (0..cfg.heads)
        .map(|h| trace_step_inputs(&tape, &trace, cfg, 0, h))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recurrence::{forward_sequential, HiddenState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            head_key_dim: 3,
            head_value_dim: 2,
            n_h: 2,
            eigenvalue_mode: EigenvalueMode::SymmetricInterval,
            gated: true,
            vocab_size: 5,
            model_dim: 6,
            conv: true,
            mlp_hidden: Some(8),
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    fn random_x(rng: &mut impl Rng, l: usize) -> Vec<f64> {
        (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn logits_have_expected_shape() {
        let cfg = ModelConfig {
            vocab_size: 2,
            ..small_cfg()
        };
        let w = ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let logits = model_forward(&[0, 1, 1, 0, 1], &w, &cfg).unwrap();
        assert_eq!(logits.shape(), (5, 2));
        assert!(logits.is_finite());
    }

    #[test]
    fn batch_order_does_not_matter() {
        let cfg = small_cfg();
        let w = ModelWeights::random(&cfg, &mut ChaCha8Rng::seed_from_u64(1), 0.5).unwrap();
        let a: &[usize] = &[1, 2, 3, 4];
        let b: &[usize] = &[4, 0, 2];
        let ab = model_forward_batch(&[a, b], &w, &cfg).unwrap();
        let ba = model_forward_batch(&[b, a], &w, &cfg).unwrap();
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);
        assert_eq!(ab[1], model_forward(b, &w, &cfg).unwrap());
    }

    #[test]
    fn same_seed_same_logits() {
        let cfg = small_cfg();
        let run = || {
            let w = ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            model_forward(&[0, 3, 2, 1], &w, &cfg).unwrap()
        };
        let (x, y) = (run(), run());
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(model_forward(&[0, 5], &w, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_key_projection_is_numerical_error() {
        let cfg = small_cfg();
        let mut w = ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for k in &mut w.layers[0].key_proj {
            *k = Matrix::zeros(k.rows(), k.cols());
        }
        let x = random_x(&mut ChaCha8Rng::seed_from_u64(1), cfg.model_dim);
        assert!(matches!(
            compute_step_inputs(&x, &w.layers[0], &cfg),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn step_inputs_are_normalized_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [EigenvalueMode::UnitInterval, EigenvalueMode::SymmetricInterval] {
            let cfg = ModelConfig {
                eigenvalue_mode: mode,
                ..small_cfg()
            };
            let w = ModelWeights::random(&cfg, &mut rng, 1.0).unwrap();
            for _ in 0..100 {
                let x = random_x(&mut rng, cfg.model_dim);
                for s in compute_step_inputs(&x, &w.layers[0], &cfg).unwrap() {
                    for k in s.keys() {
                        assert!((crate::numerics::l2_norm(k) - 1.0).abs() < 1e-9);
                    }
                    s.check_mode(mode).unwrap();
                    assert!((0.0..=1.0).contains(&s.gate()));
                }
            }
        }
    }

    #[test]
    fn saturated_beta_logit_gives_two() {
        let cfg = ModelConfig {
            conv: false,
            ..small_cfg()
        };
        let mut w = ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for b in &mut w.layers[0].beta_proj {
            *b = Matrix::filled(b.rows(), b.cols(), 1e3);
        }
        let x = vec![1.0; cfg.model_dim];
        for s in compute_step_inputs(&x, &w.layers[0], &cfg).unwrap() {
            assert_eq!(s.betas(), &[2.0, 2.0]);
        }
    }

    #[test]
    fn single_token_layer_output() {
        let cfg = small_cfg();
        let w = ModelWeights::random(&cfg, &mut ChaCha8Rng::seed_from_u64(4), 0.5).unwrap();
        let out = layer_forward(&[vec![0.3; 6]], &w.layers[0], &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].iter().all(|v| v.is_finite()));
    }

    fn rms(x: &[f64], a: &[f64], eps: f64) -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        x.iter().zip(a).map(|(v, s)| s * v / (eps + ms).sqrt()).collect()
    }

    #[test]
    fn zero_state_reduces_to_mlp_of_normed_input() {
        let cfg = small_cfg();
        let mut w = ModelWeights::random(&cfg, &mut ChaCha8Rng::seed_from_u64(5), 0.5).unwrap();
        let p = &mut w.layers[0];
        for v in &mut p.value_proj {
            *v = Matrix::zeros(v.rows(), v.cols());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| random_x(&mut rng, cfg.model_dim)).collect();
        let out = layer_forward(&xs, p, &cfg).unwrap();
        for (x, o) in xs.iter().zip(&out) {
            let y = rms(x, p.mlp_norm.data(), cfg.norm_eps);
            let a = p.mlp_gate.transpose().mul_vec(&y).unwrap();
            let u = p.mlp_up.transpose().mul_vec(&y).unwrap();
            let h: Vec<f64> = a
                .iter()
                .zip(&u)
                .map(|(a, u)| a * crate::recurrence::sigmoid(*a) * u)
                .collect();
            let expected = p.mlp_down.transpose().mul_vec(&h).unwrap();
            for (e, g) in expected.iter().zip(o) {
                assert!((e - g).abs() < 1e-12);
            }
        }
    }

    fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..a.rows()).map(|r| [a.row(r), b.row(r)].concat()).collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn vcat(a: &Matrix, b: &Matrix) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..a.rows())
            .map(|r| a.row(r).to_vec())
            .chain((0..b.rows()).map(|r| b.row(r).to_vec()))
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn duplicated_heads_match_single_head_with_summed_output() {
        let one = ModelConfig {
            heads: 1,
            ..small_cfg()
        };
        let two = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w1 = ModelWeights::random(&one, &mut rng, 0.5).unwrap();
        let p1 = &w1.layers[0];
        let split_a = normal(&mut rng, one.head_value_dim, one.model_dim, 0.5);
        let split_b = p1.output_proj.sub(&split_a).unwrap();
        let dup = |m: &Matrix| hcat(m, m);
        let conv_dup = |m: &Matrix| vcat(m, m);
        let p2 = LayerParams {
            key_proj: p1.key_proj.iter().map(dup).collect(),
            value_proj: p1.value_proj.iter().map(dup).collect(),
            beta_proj: p1.beta_proj.iter().map(dup).collect(),
            gate_proj: p1.gate_proj.as_ref().map(dup),
            query_proj: dup(&p1.query_proj),
            output_proj: vcat(&split_a, &split_b),
            readout_norm: dup(&p1.readout_norm),
            mlp_norm: p1.mlp_norm.clone(),
            mlp_gate: p1.mlp_gate.clone(),
            mlp_up: p1.mlp_up.clone(),
            mlp_down: p1.mlp_down.clone(),
            conv: p1.conv.as_ref().map(|c| ConvKernels {
                query: conv_dup(&c.query),
                keys: c.keys.iter().map(conv_dup).collect(),
                values: c.values.iter().map(conv_dup).collect(),
            }),
        };
        let xs: Vec<Vec<f64>> = (0..6).map(|_| random_x(&mut rng, one.model_dim)).collect();
        let a = layer_forward(&xs, p1, &one).unwrap();
        let b = layer_forward(&xs, &p2, &two).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn traced_inputs_reproduce_scan_readout() {
        let cfg = small_cfg();
        let w = ModelWeights::random(&cfg, &mut ChaCha8Rng::seed_from_u64(9), 0.5).unwrap();
        let tokens = TokenBatch::from_sequences(&[&[0, 1, 2, 3, 4, 0, 1]], 0).unwrap();
        let mut tape = Tape::inference();
        let wv = weights_on_tape(&mut tape, &w).unwrap();
        let out = model_forward_tape(&mut tape, &wv, &cfg, &tokens).unwrap();
        let trace = &out.traces[0];
        let (n, d) = (cfg.head_key_dim, cfg.head_value_dim);
        for h in 0..cfg.heads {
            let inputs: Vec<StepInputs> = (0..7)
                .map(|t| trace_step_inputs(&tape, trace, &cfg, t, h).unwrap())
                .collect();
            let states = forward_sequential(&HiddenState::zeros(n, d), &inputs).unwrap();
            for (t, s) in states.iter().enumerate() {
                let q = &tape.value(trace.query).unwrap().row(t)[h * n..(h + 1) * n];
                let r = s.matrix().transpose().mul_vec(q).unwrap();
                let got = &tape.value(trace.readout).unwrap().row(t)[h * d..(h + 1) * d];
                for (x, y) in r.iter().zip(got) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn names_shapes_and_rebuild() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        w.check_shapes(&cfg).unwrap();
        let names: Vec<String> = w.fields().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embedding");
        assert!(names.contains(&"layers.0.key_proj.1".to_string()));
        assert!(names.contains(&"layers.0.conv.value.0".to_string()));
        assert_eq!(names.last().unwrap(), "output_proj");
        let flat: Vec<Matrix> = w.fields().into_iter().map(|(_, m)| m.clone()).collect();
        assert_eq!(w.with_values(flat).unwrap(), w);
        let other = ModelConfig {
            n_h: 3,
            ..small_cfg()
        };
        assert!(w.check_shapes(&other).is_err());
    }

    #[test]
    fn tied_embeddings_drop_output_projection() {
        let cfg = ModelConfig {
            tie_embeddings: true,
            ..small_cfg()
        };
        let w = ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(w.output_proj.is_none());
        assert_eq!(model_forward(&[1, 2], &w, &cfg).unwrap().shape(), (2, 5));
    }
}
