//! Acceptance criteria, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the PASS/FAIL lines show up
//! in `cargo test` output. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 4 5`.

use std::time::{Duration, Instant};

use deltaproduct::analysis::effective_rank;
use deltaproduct::autodiff::{finite_difference_check, Tape};
use deltaproduct::constructions::{
    build_dihedral_two_layer, build_mod_counter, build_sn_one_layer, oracle_for, verify_construction,
};
use deltaproduct::hh_algebra::{
    collapse_same_key, complex_region_bounds, orthogonal_sum_form, realize, rwkv7_instability_demo,
    HouseholderFactor, HouseholderProduct,
};
use deltaproduct::numerics::{eig2x2, singular_values, Matrix};
use deltaproduct::recurrence::{
    forward_chunked, forward_expanded, forward_sequential, load_checkpoint, model_forward_tape, EigenvalueMode,
    HiddenState, ModelConfig, ModelWeights, StepInputs, TokenBatch,
};
use deltaproduct::training::{evaluate, train, EvalOptions, RunConfig, TrainedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.1 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_state_error(a: &[HiddenState], b: &[HiddenState]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.matrix().max_abs_diff(y.matrix()))
        .fold(0.0, f64::max)
}

fn c1_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (n, d) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let nh = rng.gen_range(1..=4);
        let t = rng.gen_range(1..=64);
        let gated = rng.gen_bool(0.5);
        let inputs: Vec<StepInputs> = (0..t)
            .map(|_| {
                StepInputs::new(
                    (0..nh).map(|_| unit_vec(&mut rng, n)).collect(),
                    (0..nh).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
                    (0..nh).map(|_| rng.gen_range(0.0..=2.0)).collect(),
                    if gated { rng.gen_range(0.0..=1.0) } else { 1.0 },
                )
                .unwrap()
            })
            .collect();
        let h0 = HiddenState::new(random_matrix(&mut rng, n, d)).unwrap();
        let chunk = rng.gen_range(1..=16);
        let seq = forward_sequential(&h0, &inputs).unwrap();
        let exp = forward_expanded(&h0, &inputs).unwrap();
        let chk = forward_chunked(&h0, &inputs, chunk).unwrap();
        worst = worst.max(max_state_error(&seq, &exp)).max(max_state_error(&seq, &chk));
    }
    outcome(worst <= 1e-8, format!("200 configs, max state error {worst:.2e} (tol 1e-8)"))
}

fn random_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        layers: rng.gen_range(1..=2),
        heads: rng.gen_range(1..=2),
        head_key_dim: rng.gen_range(2..=3),
        head_value_dim: rng.gen_range(2..=3),
        n_h: rng.gen_range(1..=3),
        eigenvalue_mode: if rng.gen_bool(0.5) {
            EigenvalueMode::SymmetricInterval
        } else {
            EigenvalueMode::UnitInterval
        },
        gated: rng.gen_bool(0.5),
        vocab_size: rng.gen_range(3..=5),
        model_dim: rng.gen_range(4..=6),
        conv: rng.gen_bool(0.5),
        mlp_hidden: Some(rng.gen_range(3..=6)),
        norm_eps: 1e-5,
        tie_embeddings: rng.gen_bool(0.3),
    }
}

fn c2_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut where_worst = String::new();
    for m in 0..20 {
        let cfg = random_model_config(&mut rng);
        let weights = ModelWeights::random(&cfg, &mut rng, 0.5).unwrap();
        let shapes = ModelWeights::shapes(&cfg);
        let params: Vec<Matrix> = weights.fields().into_iter().map(|(_, m)| m.clone()).collect();
        let t = rng.gen_range(2..=12);
        let seqs: Vec<Vec<usize>> = (0..2)
            .map(|_| (0..t).map(|_| rng.gen_range(0..cfg.vocab_size)).collect())
            .collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let batch = TokenBatch::from_sequences(&refs, 0).unwrap();
        let targets: Vec<usize> = (0..batch.ids.len()).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let mask: Vec<bool> = (0..batch.ids.len()).map(|_| rng.gen_bool(0.8)).collect();
        let report = finite_difference_check(
            |tape: &mut Tape, vars| {
                let w = shapes.with_values(vars.iter().copied())?;
                let out = model_forward_tape(tape, &w, &cfg, &batch)?;
                tape.softmax_cross_entropy(out.logits, &targets, &mask)
            },
            &params,
            1e-4,
            1e-5,
        )
        .unwrap();
        if report.max_rel_error > worst {
            worst = report.max_rel_error;
            where_worst = format!("model {m}, worst entry {:?}", report.worst);
        }
    }
    outcome(
        worst < 1e-5,
        format!("20 models, max relative error {worst:.2e} (tol 1e-5) {where_worst}"),
    )
}

fn c3_product_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut same_key: f64 = 0.0;
    let mut orth: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(2..=6);
        let k = unit_vec(&mut rng, n);
        let count = rng.gen_range(2..=4);
        let betas: Vec<f64> = (0..count).map(|_| rng.gen_range(0.0..=2.0)).collect();
        let factors = betas.iter().map(|b| HouseholderFactor::new(*b, &k).unwrap()).collect();
        let product = realize(&HouseholderProduct::ungated(n, factors).unwrap()).unwrap();
        let single = HouseholderFactor::new(collapse_same_key(&betas).unwrap(), &k).unwrap().to_matrix();
        same_key = same_key.max(product.max_abs_diff(&single));

        // Orthonormal keys by Gram-Schmidt.
        let mut keys: Vec<Vec<f64>> = Vec::new();
        while keys.len() < n.min(3) {
            let mut v = unit_vec(&mut rng, n);
            for q in &keys {
                let c: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.1 {
                keys.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let factors: Vec<HouseholderFactor> = keys
            .iter()
            .map(|k| HouseholderFactor::new(rng.gen_range(0.0..=2.0), k).unwrap())
            .collect();
        let product = realize(&HouseholderProduct::ungated(n, factors.clone()).unwrap()).unwrap();
        orth = orth.max(product.max_abs_diff(&orthogonal_sum_form(&factors).unwrap()));
    }

    let (mut mismatches, mut skipped) = (0, 0);
    for _ in 0..1000 {
        let (b1, b2) = (rng.gen_range(0.0..=2.0), rng.gen_range(0.0..=2.0));
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let k2 = [theta.cos(), theta.sin()];
        let f1 = HouseholderFactor::new(b1, &[1.0, 0.0]).unwrap();
        let f2 = HouseholderFactor::new(b2, &k2).unwrap();
        let a = realize(&HouseholderProduct::ungated(2, vec![f1, f2]).unwrap()).unwrap();
        let region = complex_region_bounds(b1, b2).unwrap();
        let cos2 = theta.cos().powi(2);
        if let deltaproduct::hh_algebra::ComplexRegion::Interval { lower, upper } = region {
            if (cos2 - lower).abs() < 1e-9 || (cos2 - upper).abs() < 1e-9 {
                skipped += 1;
                continue;
            }
        }
        if region.predicts_real(cos2) != eig2x2(&a).unwrap().is_real() {
            mismatches += 1;
        }
    }
    outcome(
        same_key <= 1e-12 && orth <= 1e-10 && mismatches == 0,
        format!(
            "same-key error {same_key:.1e} (tol 1e-12), orthogonal-key error {orth:.1e} (tol 1e-10), \
             {mismatches} realness mismatches in 1000 samples ({skipped} within 1e-9 of a boundary)"
        ),
    )
}

fn c4_constructions() -> Outcome {
    let mut failures = Vec::new();
    let mut checked = 0;
    let models = (2..=5)
        .map(build_sn_one_layer)
        .chain((2..=10).map(build_dihedral_two_layer))
        .chain((2..=12).map(build_mod_counter));
    for (i, model) in models.enumerate() {
        let model = model.unwrap();
        let report = verify_construction(&model, &*oracle_for(model.kind()), 100, 512, i as u64).unwrap();
        checked += 1;
        if !report.pass {
            failures.push(format!("{} {}/100", report.construction, report.matched_trials));
        }
    }
    outcome(
        failures.is_empty(),
        format!("{checked} constructions x 100 trials x length 512, failures: {failures:?}"),
    )
}

fn c5_instability() -> Outcome {
    let report = rwkv7_instability_demo(100).unwrap();
    let rho = report.spectral_radius;
    let norm = *report.norm_trace.last().unwrap();
    let closed = (27.0 + 153f64.sqrt()) / 32.0;
    outcome(
        (1.2302..=1.2304).contains(&rho) && (rho - closed).abs() < 1e-12 && norm > 1e4,
        format!("rho(AA') = {rho:.6} (closed form {closed:.6}), norm after 100 steps {norm:.3e}"),
    )
}

fn c6_erank() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut scale_err: f64 = 0.0;
    let mut bound_violations = 0;
    for _ in 0..500 {
        let (r, c) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let rank = rng.gen_range(1..=r.min(c));
        let h = random_matrix(&mut rng, r, rank).matmul(&random_matrix(&mut rng, rank, c)).unwrap();
        let e = effective_rank(&h).unwrap().value;
        let s = rng.gen_range(0.01..100.0) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        scale_err = scale_err.max((effective_rank(&h.scale(s)).unwrap().value - e).abs());
        let nonzero = singular_values(&h).unwrap().iter().filter(|s| **s > 1e-10).count();
        if e < 1.0 - 1e-6 || e > nonzero as f64 + 1e-6 {
            bound_violations += 1;
        }
    }
    let hand = effective_rank(&Matrix::diag(&[2.0, 1.0, 1.0])).unwrap().value;
    let expected = 2f64.powf(1.5);
    outcome(
        scale_err <= 1e-6 && bound_violations == 0 && (hand - expected).abs() <= 1e-6,
        format!(
            "scale error {scale_err:.1e}, {bound_violations} bound violations in 500 matrices, \
             erank(diag(2,1,1)) = {hand:.6} (expected {expected:.6})"
        ),
    )
}

fn run_config(json: serde_json::Value) -> RunConfig {
    let run: RunConfig = serde_json::from_value(json).unwrap();
    run.validate().unwrap();
    run
}

/// Trains one seed and returns the eval table's accuracy (or scaled
/// accuracy) at `length`, plus wall time.
fn train_seed(run: &RunConfig, seed: u64, length: usize, scaled: bool) -> (f64, Duration) {
    let mut run = run.clone();
    run.train.seed = seed;
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = train(&run, dir.path()).unwrap();
    let row = out.eval.rows.iter().find(|r| r.length == length).unwrap();
    (if scaled { row.scaled_accuracy } else { row.accuracy }, start.elapsed())
}

fn s3_run(n_h: usize) -> RunConfig {
    run_config(serde_json::json!({
        "model": {
            "layers": 1, "heads": 4, "head_key_dim": 16, "head_value_dim": 16, "n_h": n_h,
            "vocab_size": 7, "model_dim": 64, "mlp_hidden": 128, "conv": true,
            "eigenvalue_mode": "symmetric_interval"
        },
        "task": {
            "family": { "name": "group_word", "group": "S3" },
            "train_length": [2, 64], "eval_lengths": [64, 128]
        },
        "train": {
            "lr": 3e-3, "batch_size": 64, "epochs": 1, "samples": 100000, "steps": 6000,
            "weight_decay": 1e-6, "eval_samples": 256, "eval_batch": 64
        }
    }))
}

fn c7_state_tracking() -> Outcome {
    let mut lines = Vec::new();
    let (mut best64, mut best128) = (0.0f64, 0.0f64);
    let mut pass_a = false;
    let mut max_time = Duration::ZERO;
    let run = s3_run(2);
    for seed in 0..3 {
        let mut r = run.clone();
        r.train.seed = seed;
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let out = train(&r, dir.path()).unwrap();
        let elapsed = start.elapsed();
        max_time = max_time.max(elapsed);
        let (a64, a128) = (out.eval.accuracy_at(64).unwrap(), out.eval.accuracy_at(128).unwrap());
        lines.push(format!("n_h=2 seed {seed}: {a64:.3}@64 {a128:.3}@128 ({:.0}s)", elapsed.as_secs_f64()));
        if a64 >= 0.95 && a128 >= 0.85 {
            pass_a = true;
            best64 = a64;
            best128 = a128;
            break;
        }
        if a64 > best64 {
            best64 = a64;
            best128 = a128;
        }
    }
    let mut best_b = 0.0f64;
    let run = s3_run(1);
    for seed in 0..3 {
        let (acc, elapsed) = train_seed(&run, seed, 64, false);
        max_time = max_time.max(elapsed);
        lines.push(format!("n_h=1 seed {seed}: {acc:.3}@64 ({:.0}s)", elapsed.as_secs_f64()));
        best_b = best_b.max(acc);
        if best_b > 0.75 {
            break;
        }
    }
    let in_budget = max_time <= Duration::from_secs(45 * 60);
    outcome(
        pass_a && best_b <= 0.75 && in_budget,
        format!(
            "(a) best n_h=2 {best64:.3}@64 {best128:.3}@128 (need >= 0.95 / 0.85); \
             (b) best n_h=1 {best_b:.3}@64 (need <= 0.75); slowest run {:.0}s (budget 2700s) [{}]",
            max_time.as_secs_f64(),
            lines.join("; ")
        ),
    )
}

fn parity_run(mode: &str) -> RunConfig {
    run_config(serde_json::json!({
        "model": {
            "layers": 3, "heads": 1, "head_key_dim": 16, "head_value_dim": 16, "n_h": 1,
            "vocab_size": 3, "model_dim": 32, "mlp_hidden": 64, "conv": true,
            "eigenvalue_mode": mode
        },
        "task": {
            "family": { "name": "parity" },
            "train_length": [3, 40], "eval_lengths": [40, 256]
        },
        "train": {
            "lr": 5e-4, "batch_size": 64, "epochs": 1, "samples": 100000, "steps": 16000,
            "weight_decay": 0.1, "warmup_frac": 0.1, "min_lr": 1e-6,
            "eval_samples": 256, "eval_batch": 64
        }
    }))
}

fn c8_parity() -> Outcome {
    let mut lines = Vec::new();
    let mut max_time = Duration::ZERO;
    let mut best_sym = f64::NEG_INFINITY;
    let run = parity_run("symmetric_interval");
    for seed in 0..3 {
        let (s, elapsed) = train_seed(&run, seed, 256, true);
        max_time = max_time.max(elapsed);
        lines.push(format!("[-1,1] seed {seed}: {s:.3} ({:.0}s)", elapsed.as_secs_f64()));
        best_sym = best_sym.max(s);
        if best_sym >= 0.9 {
            break;
        }
    }
    let mut best_unit = f64::NEG_INFINITY;
    let run = parity_run("unit_interval");
    for seed in 0..3 {
        let (s, elapsed) = train_seed(&run, seed, 256, true);
        max_time = max_time.max(elapsed);
        lines.push(format!("[0,1] seed {seed}: {s:.3} ({:.0}s)", elapsed.as_secs_f64()));
        best_unit = best_unit.max(s);
        if best_unit > 0.4 {
            break;
        }
    }
    let in_budget = max_time <= Duration::from_secs(30 * 60);
    outcome(
        best_sym >= 0.9 && best_unit <= 0.4 && in_budget,
        format!(
            "scaled accuracy at 256: best [-1,1] {best_sym:.3} (need >= 0.9), best [0,1] {best_unit:.3} \
             (need <= 0.4); slowest run {:.0}s (budget 1800s) [{}]",
            max_time.as_secs_f64(),
            lines.join("; ")
        ),
    )
}

fn c9_determinism() -> Outcome {
    let run = run_config(serde_json::json!({
        "model": {
            "layers": 2, "heads": 2, "head_key_dim": 8, "head_value_dim": 8, "n_h": 2,
            "vocab_size": 7, "model_dim": 32, "mlp_hidden": 64, "conv": true, "gated": true
        },
        "task": {
            "family": { "name": "group_word", "group": "S3" },
            "train_length": [16, 16], "eval_lengths": [16, 32]
        },
        "train": {
            "lr": 3e-3, "batch_size": 32, "epochs": 1, "samples": 2048,
            "eval_samples": 64, "eval_batch": 32, "eval_every": 32
        }
    }));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out_a = train(&run, a.path()).unwrap();
    let out_b = train(&run, b.path()).unwrap();
    let same_csv = std::fs::read(&out_a.metrics_path).unwrap() == std::fs::read(&out_b.metrics_path).unwrap();

    let (cfg, weights) = load_checkpoint(&a.path().join("checkpoint")).unwrap();
    let reloaded = TrainedModel { cfg, weights };
    let opts = EvalOptions {
        seed: 11,
        samples: 64,
        batch: 32,
    };
    let before = evaluate(&out_a.model, &run.task, &[16, 32], opts, None).unwrap();
    let after = evaluate(&reloaded, &run.task, &[16, 32], opts, None).unwrap();
    let same_weights = reloaded.weights == out_a.model.weights;
    outcome(
        same_csv && before == after && same_weights,
        format!("identical metrics CSV: {same_csv}; checkpoint weights identical: {same_weights}; eval tables identical: {}", before == after),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "recurrence equivalence", c1_equivalence),
        (2, "full-model gradients", c2_gradients),
        (3, "Householder product identities", c3_product_identities),
        (4, "construction exactness", c4_constructions),
        (5, "RWKV-7 instability", c5_instability),
        (6, "effective-rank properties", c6_erank),
        (7, "desk-scale S3 state tracking", c7_state_tracking),
        (8, "parity eigenvalue-range contrast", c8_parity),
        (9, "determinism and persistence", c9_determinism),
    ];
    // libtest-style flags (e.g. --nocapture) are ignored; bare numbers select criteria.
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "[{status}] criterion {id} ({name}): {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
