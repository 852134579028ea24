//! Command-line entry point: data generation, training, evaluation,
//! construction checks, checkpoint analysis and the RWKV-7 instability demo.
//!
//! Exit codes: 0 on success, 1 on usage, config or contract errors, 2 on
//! numerical failures. Errors go to stderr as one JSON object.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{erank_trace, extrapolation_report, key_pca, record_betas, Inspect, Marker};
use crate::constructions::{
    build_dihedral_two_layer, build_mod_counter, build_sn_one_layer, oracle_for, verify_construction, ConstructedModel,
};
use crate::error::{ensure, Error, Result};
use crate::hh_algebra::rwkv7_instability_demo;
use crate::recurrence::{load_checkpoint, FORMAT_VERSION};
use crate::tasks::{write_jsonl, TaskSpec};
use crate::training::{eval_seed, evaluate, train, EvalOptions, EvalTable, RunConfig, TrainedModel};

#[derive(Debug, Parser)]
#[command(name = "deltaproduct", version, about = "DeltaProduct recurrences: train, evaluate, verify and analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train and eval instances of a task as JSONL.
    Gen(GenArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the eval lengths of a run config.
    Eval(EvalArgs),
    /// Check a hand-built construction against a brute-force oracle.
    Verify(VerifyArgs),
    /// Inspect a checkpoint or construction.
    Analyze(AnalyzeArgs),
    /// Spectral radius and norm growth of an alternating RWKV-7 product.
    DemoInstability(DemoArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Config file (.json or .toml).
    #[arg(long)]
    config: PathBuf,
    /// Dotted override, e.g. `model.n_h=3`. Values parse as JSON, else as strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides `train.seed` (or the generation seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Training instances, lengths drawn from `train_length`.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Instances per eval length.
    #[arg(long, default_value_t = 256)]
    eval_count: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConstructionArg {
    /// `S_n`, one layer.
    Sn,
    /// `D_n`, two layers.
    Dihedral,
    /// Counter modulo `n`.
    Counter,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    construction: ConstructionArg,
    /// Group size or modulus.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 512)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `verify.json` and a run manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AnalysisKind {
    /// Effective rank of head states per position.
    Erank,
    /// Betas per position, factor and head.
    Betas,
    /// Explained variance of one head's keys.
    KeyPca,
    /// Merge eval tables into one long-format table.
    Report,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    kind: AnalysisKind,
    #[arg(long)]
    out: PathBuf,
    /// Run config; supplies the task for checkpoint inputs.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, conflicts_with = "construction")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    construction: Option<ConstructionArg>,
    /// Construction size, as for `verify`.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sequence length of the analyzed inputs.
    #[arg(long, default_value_t = 64)]
    length: usize,
    /// Number of sequences (key PCA pools them; the others use the first).
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Heads to trace; all heads when omitted.
    #[arg(long, value_delimiter = ',')]
    heads: Vec<usize>,
    /// Eval tables as NAME=PATH (report only).
    #[arg(long = "table", value_name = "NAME=PATH")]
    tables: Vec<String>,
    /// Training context length, recorded as a marker.
    #[arg(long)]
    train_length: Option<usize>,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match &e {
                Error::Contract(_) => "contract",
                Error::Numerical(_) => "numerical",
                Error::ConfigNotFound(_) => "config_not_found",
                Error::Config(_) => "config",
                Error::Io { .. } => "io",
                Error::Json(_) => "json",
            };
            eprintln!("{}", json!({ "error": kind, "message": e.to_string() }));
            e.exit_code()
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::DemoInstability(a) => demo_cmd(a),
    }
}

/// Reads a JSON or TOML config and applies dotted overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Value> {
    if !path.is_file() {
        return Err(Error::ConfigNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let t: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t)?
        }
        _ => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    Ok(value)
}

/// Applies `a.b.c=value`, creating intermediate tables as needed.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} has an empty segment")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-table")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn parse_as<T: serde::de::DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{what}: {e}")))
}

fn run_config(args: &ConfigArgs) -> Result<(RunConfig, Value)> {
    let mut value = load_config(&args.config, &args.overrides)?;
    if let Some(seed) = args.seed {
        apply_override(&mut value, &format!("train.seed={seed}"))?;
    }
    let run: RunConfig = parse_as(value.clone(), "run config")?;
    run.validate()?;
    Ok((run, value))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

/// Writes `run_manifest.json`: the command, its resolved config, the config
/// hash, the seed and version information.
fn write_manifest(out: &Path, command: &str, config: &Value, seed: Option<u64>) -> Result<()> {
    let canonical = serde_json::to_string(config)?;
    let hash = Sha256::digest(canonical.as_bytes());
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    write_json(
        &out.join("run_manifest.json"),
        &json!({
            "command": command,
            "config": config,
            "config_sha256": hex,
            "seed": seed,
            "versions": {
                "deltaproduct": env!("CARGO_PKG_VERSION"),
                "checkpoint_format": FORMAT_VERSION,
            },
        }),
    )
}

fn gen(a: GenArgs) -> Result<()> {
    let mut value = load_config(&a.config.config, &a.config.overrides)?;
    // A run config is accepted too; only its task is used.
    if let Some(task) = value.get("task") {
        value = task.clone();
    }
    let task: TaskSpec = parse_as(value.clone(), "task spec")?;
    task.validate()?;
    let seed = a.config.seed.unwrap_or(0);
    create_dir(&a.out)?;
    let vocab = task.vocab()?;
    let train = task.generate(seed, a.count, task.train_length)?;
    write_jsonl(&a.out.join("train.jsonl"), &train, &vocab)?;
    for &l in &task.eval_lengths {
        let insts = task.generate(eval_seed(seed, l), a.eval_count, [l, l])?;
        write_jsonl(&a.out.join(format!("eval_len_{l}.jsonl")), &insts, &vocab)?;
    }
    write_manifest(&a.out, "gen", &json!({ "task": value, "count": a.count, "eval_count": a.eval_count }), Some(seed))?;
    println!("{}", json!({ "out": a.out, "train": a.count, "eval_lengths": task.eval_lengths }));
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (run, value) = run_config(&a.config)?;
    create_dir(&a.out)?;
    write_manifest(&a.out, "train", &value, Some(run.train.seed))?;
    let outcome = train(&run, &a.out)?;
    println!(
        "{}",
        json!({ "steps": outcome.steps, "final_loss": outcome.final_loss, "eval": outcome.eval })
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (run, value) = run_config(&a.config)?;
    let (cfg, weights) = load_checkpoint(&a.checkpoint)?;
    ensure!(
        cfg.vocab_size == run.task.vocab()?.size(),
        "checkpoint vocabulary {} does not match the task",
        cfg.vocab_size
    );
    create_dir(&a.out)?;
    write_manifest(
        &a.out,
        "eval",
        &json!({ "run": value, "checkpoint": a.checkpoint }),
        Some(run.train.seed),
    )?;
    let model = TrainedModel { cfg, weights };
    let opts = EvalOptions {
        seed: run.train.seed,
        samples: run.train.eval_samples,
        batch: run.train.eval_batch,
    };
    let table = evaluate(
        &model,
        &run.task,
        &run.task.eval_lengths,
        opts,
        Some(&a.out.join("predictions.jsonl")),
    )?;
    write_json(&a.out.join("eval.json"), &table)?;
    println!("{}", serde_json::to_string(&table)?);
    Ok(())
}

fn build(kind: ConstructionArg, n: usize) -> Result<ConstructedModel> {
    match kind {
        ConstructionArg::Sn => build_sn_one_layer(n),
        ConstructionArg::Dihedral => build_dihedral_two_layer(n),
        ConstructionArg::Counter => build_mod_counter(n),
    }
}

fn verify_cmd(a: VerifyArgs) -> Result<()> {
    let model = build(a.construction, a.n)?;
    let oracle = oracle_for(model.kind());
    let report = verify_construction(&model, &*oracle, a.trials, a.length, a.seed)?;
    let summary = json!({
        "construction": report.construction,
        "trials": report.trials,
        "length": report.length,
        "pass": report.pass,
    });
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_manifest(
            out,
            "verify",
            &json!({ "construction": format!("{:?}", a.construction).to_lowercase(), "n": a.n, "trials": a.trials, "length": a.length }),
            Some(a.seed),
        )?;
        write_json(&out.join("verify.json"), &report)?;
    }
    println!("{summary}");
    if !report.pass {
        return Err(Error::contract(format!(
            "{} matched {} of {} trials",
            report.construction, report.matched_trials, report.trials
        )));
    }
    Ok(())
}

fn demo_cmd(a: DemoArgs) -> Result<()> {
    let report = rwkv7_instability_demo(a.steps)?;
    let out = json!({
        "spectral_radius": report.spectral_radius,
        "closed_form": (27.0 + 153f64.sqrt()) / 32.0,
        "final_norm": report.norm_trace.last(),
        "norm_trace": report.norm_trace,
    });
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_manifest(dir, "demo-instability", &json!({ "steps": a.steps }), None)?;
        write_json(&dir.join("instability.json"), &out)?;
    }
    println!("{out}");
    Ok(())
}

fn parse_table(s: &str) -> Result<(String, EvalTable)> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("table {s:?} is not NAME=PATH")))?;
    let path = Path::new(path);
    if !path.is_file() {
        return Err(Error::ConfigNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok((name.to_string(), serde_json::from_str(&text)?))
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<()> {
    create_dir(&a.out)?;
    let manifest = json!({
        "kind": format!("{:?}", a.kind).to_lowercase(),
        "config": a.config.as_ref().map(|p| load_config(p, &a.overrides)).transpose()?,
        "checkpoint": a.checkpoint,
        "construction": a.construction.map(|c| format!("{c:?}").to_lowercase()),
        "n": a.n,
        "length": a.length,
        "samples": a.samples,
        "layer": a.layer,
        "heads": a.heads,
        "tables": a.tables,
        "train_length": a.train_length,
    });
    write_manifest(&a.out, "analyze", &manifest, Some(a.seed))?;

    if let AnalysisKind::Report = a.kind {
        ensure!(!a.tables.is_empty(), "report needs at least one --table NAME=PATH");
        let tables = a.tables.iter().map(|s| parse_table(s)).collect::<Result<Vec<_>>>()?;
        let report = extrapolation_report(&tables, a.train_length)?;
        report.write_csv(&a.out.join("extrapolation.csv"))?;
        report.write_json(&a.out.join("extrapolation.json"))?;
        println!("{}", json!({ "rows": report.rows.len() }));
        return Ok(());
    }

    let (model, sequences): (Box<dyn Inspect>, Vec<Vec<usize>>) = match (&a.checkpoint, a.construction) {
        (Some(dir), None) => {
            let path = a
                .config
                .as_ref()
                .ok_or_else(|| Error::contract("--checkpoint needs --config for the task"))?;
            let run: RunConfig = parse_as(load_config(path, &a.overrides)?, "run config")?;
            let (cfg, weights) = load_checkpoint(dir)?;
            let seqs = run
                .task
                .generate(a.seed, a.samples, [a.length, a.length])?
                .into_iter()
                .map(|i| i.tokens)
                .collect();
            (Box::new(TrainedModel { cfg, weights }), seqs)
        }
        (None, Some(kind)) => {
            let n = a.n.ok_or_else(|| Error::contract("--construction needs --n"))?;
            let model = build(kind, n)?;
            let seqs = random_words(a.seed, model.alphabet_size(), a.samples, a.length);
            (Box::new(model), seqs)
        }
        _ => return Err(Error::contract("give exactly one of --checkpoint or --construction")),
    };
    ensure!(a.samples >= 1 && a.length >= 1, "samples and length must be positive");
    let first = &sequences[0];
    match a.kind {
        AnalysisKind::Erank => {
            let heads = if a.heads.is_empty() {
                let states = model.states(first)?;
                ensure!(a.layer < states.len(), "layer {} out of range", a.layer);
                (0..states[a.layer].len()).collect()
            } else {
                a.heads.clone()
            };
            let markers = a
                .train_length
                .map(|p| Marker {
                    position: p,
                    label: "train_length".into(),
                })
                .into_iter()
                .collect();
            let trace = erank_trace(&*model, first, a.layer, &heads, markers)?;
            trace.write_csv(&a.out.join("erank.csv"))?;
            write_json(&a.out.join("erank.json"), &trace)?;
        }
        AnalysisKind::Betas => {
            let rec = record_betas(&*model, first)?;
            rec.write_csv(&a.out.join("betas.csv"))?;
        }
        AnalysisKind::KeyPca => {
            let head = a.heads.first().copied().unwrap_or(0);
            let ratios = key_pca(&*model, &sequences, a.layer, head)?;
            write_json(
                &a.out.join("key_pca.json"),
                &json!({ "layer": a.layer, "head": head, "explained_variance_ratios": ratios }),
            )?;
        }
        AnalysisKind::Report => unreachable!("handled above"),
    }
    println!("{}", json!({ "out": a.out }));
    Ok(())
}

fn random_words(seed: u64, size: usize, count: usize, len: usize) -> Vec<Vec<usize>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..len).map(|_| rng.gen_range(0..size)).collect()).collect()
}
