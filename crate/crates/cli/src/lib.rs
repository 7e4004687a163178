//! `layerprune` command-line front end.
//!
//! Every command works inside a run directory:
//!
//! ```text
//! <run>/manifest.json          append-only log of every command run here
//! <run>/checkpoints/step_N.apck
//! <run>/reports/*.csv|json
//! ```
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use layerprune_core::checkpoint::{self, sha256_hex};
use layerprune_core::data::Corpus;
use layerprune_core::engine::{adapt_accel, adapt_prune, RunReport};
use layerprune_core::eval::{arch_report, perplexity, sensitivity_sweep, write_csv};
use layerprune_core::importance::importance_profile;
use layerprune_core::model::Model;
use layerprune_core::scheduler::LrSchedule;
use layerprune_core::synth::synthetic_corpus;
use layerprune_core::train::{train_steps, AdamW};

pub use config::{ConfigError, RunConfig};

/// Environment variable naming the directory relative run paths live under.
pub const RUN_ROOT_ENV: &str = "LAYERPRUNE_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "layerprune", version, about = "Layer-adaptive structured pruning for small decoder models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create a freshly initialized model.
    Init(Common),
    /// Train the latest checkpoint for `train_steps` steps.
    Train(Common),
    /// Multi-iteration adaptive pruning.
    Prune(Common),
    /// Interleaved pruning and recovery training.
    Accel(Common),
    /// Perplexity on the evaluation split.
    Eval(Common),
    /// Perplexity change when each layer alone is pruned.
    Sensitivity(Common),
    /// Per-layer architecture table.
    Report(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (relative paths resolve under $LAYERPRUNE_RUN_ROOT).
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    /// Checkpoint to start from (default: latest in the run directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus path or `synthetic:<bytes>`.
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    interleaves: Option<usize>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<layerprune_core::Error> for Failure {
    fn from(e: layerprune_core::Error) -> Self {
        match e {
            layerprune_core::Error::Config { field, reason } => Failure::Config(format!("config field `{field}`: {reason}")),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Runs the command line `argv` (including the program name) and returns
/// the process exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub software: String,
    pub version: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub input_checkpoint: Option<String>,
    pub input_sha256: Option<String>,
    pub output_checkpoint: Option<String>,
    pub output_sha256: Option<String>,
    pub reports: Vec<String>,
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Ctx {
    fn reports(&self) -> PathBuf {
        self.dir.join("reports")
    }

    fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }
}

fn resolve_run_dir(p: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn build_config(c: &Common) -> Result<RunConfig, Failure> {
    let text = match &c.config {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("config field `config`: cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut overrides = Vec::new();
    let mut push = |k: &str, v: toml::Value| overrides.push((k.to_string(), v));
    if let Some(v) = &c.corpus {
        push("corpus", toml::Value::String(v.clone()));
    }
    if let Some(v) = c.seed {
        push("seed", toml::Value::Integer(v as i64));
    }
    if let Some(v) = c.sparsity {
        push("sparsity", toml::Value::Float(v));
    }
    if let Some(v) = c.iterations {
        push("iterations", toml::Value::Integer(v as i64));
    }
    if let Some(v) = c.amplitude {
        push("amplitude", toml::Value::Float(v));
    }
    if let Some(v) = c.interleaves {
        push("interleaves", toml::Value::Integer(v as i64));
    }
    for s in &c.set {
        overrides.push(config::parse_override(s)?);
    }
    Ok(RunConfig::build(text.as_deref(), &overrides)?)
}

fn load_corpus(cfg: &RunConfig) -> Result<(Corpus, Corpus), Failure> {
    let corpus = match cfg.corpus.strip_prefix("synthetic:") {
        Some(n) => {
            let bytes: usize = n
                .parse()
                .map_err(|_| Failure::Config(format!("config field `corpus`: bad synthetic size {n:?}")))?;
            synthetic_corpus(bytes, cfg.corpus_seed)?
        }
        None => Corpus::load(Path::new(&cfg.corpus))?,
    };
    Ok(corpus.split_tail(cfg.eval_fraction)?)
}

fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n = name.strip_prefix("step_")?.strip_suffix(".apck")?.parse::<usize>().ok()?;
            Some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
}

fn input_model(ctx: &Ctx, explicit: &Option<PathBuf>) -> Result<(Model<f32>, PathBuf, String), Failure> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => latest_checkpoint(&ctx.checkpoints())
            .map(|(_, p)| p)
            .ok_or_else(|| Failure::Runtime(format!("no checkpoint in {}; run `init` first", ctx.checkpoints().display())))?,
    };
    let bytes = std::fs::read(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let (model, _) = checkpoint::from_bytes::<f32>(&bytes)?;
    Ok((model, path, sha256_hex(&bytes)))
}

fn save_model(ctx: &Ctx, model: &Model<f32>, command: &str, parent: Option<&str>) -> Result<(PathBuf, String), Failure> {
    let next = latest_checkpoint(&ctx.checkpoints()).map_or(0, |(n, _)| n + 1);
    let path = ctx.checkpoints().join(format!("step_{next}.apck"));
    let provenance = json!({
        "command": command,
        "parent_sha256": parent,
        "software_version": env!("CARGO_PKG_VERSION"),
    });
    let hash = checkpoint::save(&path, model, ctx.cfg.seed, provenance)?;
    Ok((path, hash))
}

fn write_json<S: Serialize>(ctx: &Ctx, name: &str, value: &S) -> Result<String, Failure> {
    std::fs::create_dir_all(ctx.reports())?;
    std::fs::write(ctx.reports().join(name), serde_json::to_vec_pretty(value)?)?;
    Ok(format!("reports/{name}"))
}

fn write_csv_report<S: Serialize>(ctx: &Ctx, name: &str, rows: &[S]) -> Result<String, Failure> {
    std::fs::create_dir_all(ctx.reports())?;
    let f = std::fs::File::create(ctx.reports().join(name))?;
    write_csv(rows, f)?;
    Ok(format!("reports/{name}"))
}

fn append_manifest(ctx: &Ctx, entry: ManifestEntry) -> Result<(), Failure> {
    let path = ctx.dir.join("manifest.json");
    let mut manifest: Manifest = match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => Manifest {
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            entries: Vec::new(),
        },
    };
    manifest.entries.push(entry);
    std::fs::create_dir_all(&ctx.dir)?;
    std::fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn eval_slice<'a>(cfg: &RunConfig, eval: &'a Corpus) -> &'a [u32] {
    let t = eval.tokens();
    if cfg.eval_tokens > 0 && cfg.eval_tokens < t.len() {
        &t[..cfg.eval_tokens]
    } else {
        t
    }
}

/// Per-iteration rows flattened for CSV.
#[derive(Serialize)]
struct IterationRow {
    iteration: usize,
    target_sparsity: f64,
    prunable_target: usize,
    prunable_params: usize,
    total_params: usize,
    train_steps: usize,
    final_loss: Option<f64>,
    perplexity: Option<f64>,
}

fn iteration_rows(report: &RunReport) -> Vec<IterationRow> {
    report
        .records
        .iter()
        .map(|r| IterationRow {
            iteration: r.iteration,
            target_sparsity: r.target_sparsity,
            prunable_target: r.prunable_target,
            prunable_params: r.prunable_params,
            total_params: r.total_params,
            train_steps: r.train.as_ref().map_or(0, |t| t.steps),
            final_loss: r.train.as_ref().and_then(|t| t.losses.last().copied()),
            perplexity: r.perplexity,
        })
        .collect()
}

#[derive(Serialize)]
struct LayerIterationRow {
    iteration: usize,
    layer: usize,
    raw_importance: f64,
    normalized_importance: f64,
    sparsity: f64,
    heads: usize,
    channels: usize,
    params: usize,
}

fn layer_rows(report: &RunReport) -> Vec<LayerIterationRow> {
    let mut out = Vec::new();
    for r in &report.records {
        for i in 0..r.heads.len() {
            out.push(LayerIterationRow {
                iteration: r.iteration,
                layer: i,
                raw_importance: r.importance.raw[i],
                normalized_importance: r.importance.normalized[i],
                sparsity: r.sparsity.per_layer[i],
                heads: r.heads[i],
                channels: r.channels[i],
                params: r.layer_params[i],
            });
        }
    }
    out
}

fn run(command: Command) -> Result<(), Failure> {
    let (name, common) = match &command {
        Command::Init(c) => ("init", c),
        Command::Train(c) => ("train", c),
        Command::Prune(c) => ("prune", c),
        Command::Accel(c) => ("accel", c),
        Command::Eval(c) => ("eval", c),
        Command::Sensitivity(c) => ("sensitivity", c),
        Command::Report(c) => ("report", c),
    };
    let cfg = build_config(common)?;
    let ctx = Ctx {
        dir: resolve_run_dir(&common.run_dir),
        cfg,
    };
    std::fs::create_dir_all(&ctx.dir)?;
    let mut entry = ManifestEntry {
        command: name.into(),
        seed: ctx.cfg.seed,
        config: ctx.cfg.clone(),
        input_checkpoint: None,
        input_sha256: None,
        output_checkpoint: None,
        output_sha256: None,
        reports: Vec::new(),
    };
    let cfg = &ctx.cfg;

    if let Command::Init(_) = command {
        let model: Model<f32> = Model::init(cfg.model_config()?, cfg.seed)?;
        let (path, hash) = save_model(&ctx, &model, name, None)?;
        entry.output_checkpoint = Some(path.display().to_string());
        entry.output_sha256 = Some(hash);
        entry.reports.push(write_json(&ctx, "arch.json", &arch_report(&model))?);
        println!("initialized {} parameters -> {}", model.param_count().total, path.display());
        return append_manifest(&ctx, entry);
    }

    let (mut model, in_path, in_hash) = input_model(&ctx, &common.checkpoint)?;
    entry.input_checkpoint = Some(in_path.display().to_string());
    entry.input_sha256 = Some(in_hash.clone());

    match command {
        Command::Init(_) => unreachable!("handled above"),
        Command::Train(_) => {
            let (train, _) = load_corpus(cfg)?;
            let mut opt = AdamW::new(&model, cfg.train_config().optimizer);
            let sched = LrSchedule::new(cfg.train_steps, &cfg.lr_config())?;
            let losses = train_steps(&mut model, &mut opt, train.tokens(), cfg.train_steps, |s| sched.at(s), &cfg.train_config())?;
            #[derive(Serialize)]
            struct LossRow {
                step: usize,
                lr: f64,
                loss: f64,
            }
            let rows: Vec<LossRow> = losses
                .iter()
                .enumerate()
                .map(|(step, &loss)| LossRow { step, lr: sched.at(step), loss })
                .collect();
            entry.reports.push(write_csv_report(&ctx, "train_loss.csv", &rows)?);
            if let Some(last) = losses.last() {
                println!("trained {} steps, final loss {last:.4}", losses.len());
            }
        }
        Command::Prune(_) => {
            let (train, _) = load_corpus(cfg)?;
            let (pruned, report) = adapt_prune(&model, &train, &cfg.prune_config())?;
            model = pruned;
            entry.reports.push(write_json(&ctx, "prune_report.json", &report)?);
            entry.reports.push(write_csv_report(&ctx, "prune_iterations.csv", &iteration_rows(&report))?);
            entry.reports.push(write_csv_report(&ctx, "prune_layers.csv", &layer_rows(&report))?);
            println!("pruned to {} parameters", model.param_count().total);
        }
        Command::Accel(_) => {
            let (train, eval) = load_corpus(cfg)?;
            let calibration = cfg.calibration().sample(&train)?;
            let tokens = train.tokens();
            let tokens = if cfg.accel_tokens > 0 && cfg.accel_tokens < tokens.len() {
                &tokens[..cfg.accel_tokens]
            } else {
                tokens
            };
            let source = model.param_count().total;
            let acfg = cfg.accel_config(source);
            let eval_tokens = eval_slice(cfg, &eval);
            let out = adapt_accel(&model, tokens, &calibration, &acfg, Some((eval_tokens, cfg.eval_max_len)))?;
            model = out.model;
            entry.reports.push(write_json(&ctx, "accel_schedule.json", &out.schedule)?);
            entry.reports.push(write_json(&ctx, "accel_report.json", &out.report)?);
            entry.reports.push(write_csv_report(&ctx, "accel_iterations.csv", &iteration_rows(&out.report))?);
            entry.reports.push(write_csv_report(&ctx, "accel_layers.csv", &layer_rows(&out.report))?);
            println!(
                "accel: {} interleaves, {} -> {} parameters (target {})",
                acfg.interleaves,
                source,
                model.param_count().total,
                acfg.target_params
            );
        }
        Command::Eval(_) => {
            let (_, eval) = load_corpus(cfg)?;
            let ppl = perplexity(&model, eval_slice(cfg, &eval), cfg.eval_max_len)?;
            entry.reports.push(write_json(
                &ctx,
                "eval.json",
                &json!({"perplexity": ppl, "eval_max_len": cfg.eval_max_len, "params": model.param_count().total}),
            )?);
            println!("perplexity {ppl:.4}");
            return append_manifest(&ctx, entry);
        }
        Command::Sensitivity(_) => {
            let (train, eval) = load_corpus(cfg)?;
            let calibration = cfg.calibration().sample(&train)?;
            let before = checkpoint::weights_hash(&model);
            let records = sensitivity_sweep(&model, cfg.sensitivity_sparsity, &calibration, eval_slice(cfg, &eval), cfg.eval_max_len)?;
            let profile = importance_profile(&model, &calibration, cfg.similarity())?;
            if checkpoint::weights_hash(&model) != before {
                return Err(Failure::Runtime("sensitivity sweep modified the base model".into()));
            }
            entry.reports.push(write_csv_report(&ctx, "sensitivity.csv", &records)?);
            entry.reports.push(write_csv_report(&ctx, "importance.csv", &profile.records())?);
            for r in &records {
                println!("layer {} delta {:+.4}", r.layer, r.delta);
            }
            return append_manifest(&ctx, entry);
        }
        Command::Report(_) => {
            let report = arch_report(&model);
            entry.reports.push(write_csv_report(&ctx, "arch.csv", &report.layers)?);
            entry.reports.push(write_json(&ctx, "arch.json", &report)?);
            println!("{} parameters over {} layers", report.total_params, report.layers.len());
            return append_manifest(&ctx, entry);
        }
    }

    let (path, hash) = save_model(&ctx, &model, name, Some(&in_hash))?;
    entry.output_checkpoint = Some(path.display().to_string());
    entry.output_sha256 = Some(hash);
    entry.reports.push(write_json(&ctx, "arch.json", &arch_report(&model))?);
    append_manifest(&ctx, entry)
}
