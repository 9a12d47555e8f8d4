//! Command-line entry point: `train`, `eval`, `inspect-routing`, `gradcheck`.
//!
//! Dotted overrides such as `--model.gating=topk` (or `--set model.k=2`)
//! are applied on top of the config file. Output files, and relative
//! checkpoint paths, live under `--out`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::event_codec::{encode_events, TaskType};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::lifecycle::{export_activation_csv, LifecycleEvent, RoutingRecord};
use crate::metrics::{evaluate_predictions, evaluate_with_predictions, EvalReport};
use crate::model::{checkpoint_digest, load_checkpoint, save_checkpoint, run_stage, Model, SeqInput, StepReport, TrainContext};
use crate::synthdata::{train_split, val_split, SyntheticSample};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const LIFECYCLE_FILE: &str = "lifecycle_events.csv";
pub const ROUTING_FILE: &str = "routing.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const FINAL_CHECKPOINT: &str = "stage3.ckpt";

#[derive(Debug, Parser)]
#[command(name = "expertflow", version, about = "Task-aware dynamic MoE for temporal grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run stages 1 -> 3 and write checkpoints, loss curve and routing logs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key.path=value` override (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Generate on a split and write the metric report.
    Eval {
        #[arg(long, default_value = FINAL_CHECKPOINT)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Score the gold sequences themselves instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Export per-layer task × expert activation rates over a split.
    InspectRouting {
        #[arg(long, default_value = FINAL_CHECKPOINT)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negative control: corrupt this parameter's analytic gradient.
        #[arg(long)]
        corrupt: Option<String>,
    },
}

/// Splits `--a.b=value` overrides out of the argument list.
fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let is_override = a
            .strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .is_some_and(|(k, _)| k.contains('.'));
        if is_override {
            overrides.push(a[2..].to_string());
        } else {
            rest.push(a);
        }
    }
    (rest, overrides)
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Version { .. } => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        _ => EXIT_FAILURE,
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let (rest, overrides) = extract_overrides(args.into_iter().collect());
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve_config(config: Option<&Path>, out: Option<&Path>, mut overrides: Vec<String>, set: Vec<String>) -> Result<RunConfig> {
    overrides.extend(set);
    let mut cfg = match config {
        Some(p) => RunConfig::load(p, &overrides)?,
        None => RunConfig::from_toml_str("", &overrides)?,
    };
    if let Some(out) = out {
        cfg.out = out.to_path_buf();
    }
    Ok(cfg)
}

/// Config for commands that read a run: `--config`, else the run's saved
/// config, else defaults.
fn resolve_run_config(config: Option<&Path>, out: Option<&Path>, overrides: Vec<String>, set: Vec<String>) -> Result<RunConfig> {
    let saved = out.map(|o| o.join(CONFIG_FILE)).filter(|p| p.is_file());
    resolve_config(config.or(saved.as_deref()), out, overrides, set)
}

fn dispatch(cmd: Command, overrides: Vec<String>) -> Result<i32> {
    match cmd {
        Command::Train { config, out, set } => {
            let cfg = resolve_config(config.as_deref(), out.as_deref(), overrides, set)?;
            cmd_train(&cfg)
        }
        Command::Eval {
            checkpoint,
            config,
            out,
            split,
            oracle,
            set,
        } => {
            let cfg = resolve_run_config(config.as_deref(), out.as_deref(), overrides, set)?;
            cmd_eval(&cfg, &checkpoint, split, oracle)
        }
        Command::InspectRouting {
            checkpoint,
            config,
            out,
            split,
            set,
        } => {
            let cfg = resolve_run_config(config.as_deref(), out.as_deref(), overrides, set)?;
            cmd_inspect_routing(&cfg, &checkpoint, split)
        }
        Command::Gradcheck { seed, corrupt } => {
            if !overrides.is_empty() {
                return Err(Error::Config("gradcheck takes no config overrides".into()));
            }
            cmd_gradcheck(seed, corrupt)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

pub fn loss_curve_header(blocks: usize) -> String {
    let mut h = String::from("step,stage,ce,z,aux,total,active_experts_mean");
    for b in 0..blocks {
        let _ = write!(h, ",k_layer{b}");
    }
    h
}

fn loss_curve_row(r: &StepReport) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{}",
        r.step, r.stage, r.ce, r.z, r.aux, r.total, r.active_experts_mean
    );
    for k in &r.experts {
        let _ = write!(row, ",{k}");
    }
    row
}

pub const LIFECYCLE_HEADER: &str = "step,stage,layer,action,expert";

fn lifecycle_row(e: &LifecycleEvent) -> String {
    let action = serde_json::to_value(e.action).expect("action serializes");
    format!(
        "{},{},{},{},{}",
        e.step,
        e.stage,
        e.layer,
        action.as_str().expect("action is a string"),
        e.expert
    )
}

/// Everything a training run produces, before it is written to disk.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub reports: Vec<StepReport>,
    /// Model after each completed stage.
    pub stage_models: Vec<Model>,
}

impl TrainOutcome {
    pub fn loss_curve_csv(&self) -> String {
        let mut out = loss_curve_header(self.model.blocks.len());
        out.push('\n');
        for r in &self.reports {
            out.push_str(&loss_curve_row(r));
            out.push('\n');
        }
        out
    }

    pub fn lifecycle_csv(&self) -> String {
        let mut out = String::from(LIFECYCLE_HEADER);
        out.push('\n');
        for e in self.reports.iter().flat_map(|r| &r.events) {
            out.push_str(&lifecycle_row(e));
            out.push('\n');
        }
        out
    }
}

/// Seeded stages 1 -> 3 on the training split. `observe` sees every step.
pub fn train_pipeline(cfg: &RunConfig, mut observe: impl FnMut(&StepReport)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = train_split(&cfg.data)?;
    let ctx = TrainContext {
        train: cfg.train.clone(),
        lifecycle: cfg.lifecycle.clone(),
        losses: cfg.losses.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg.model.clone())?;
    let mut reports = Vec::new();
    let mut stage_models = Vec::new();
    for stage in 1..=3u8 {
        run_stage(&mut model, stage, &data, cfg.stages.get(stage), &ctx, &mut rng, |r| {
            observe(r);
            reports.push(r.clone());
        })?;
        stage_models.push(model.clone());
    }
    Ok(TrainOutcome {
        model,
        reports,
        stage_models,
    })
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    error: String,
    step: u64,
    stage: u8,
    parts: &'a str,
    last_reports: &'a [StepReport],
}

fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    create_out(cfg)?;
    write_file(&cfg.out.join(CONFIG_FILE), cfg.to_toml())?;
    let started = std::time::Instant::now();
    let mut recent: Vec<StepReport> = Vec::new();
    let result = train_pipeline(cfg, |r| {
        if r.step % 100 == 0 {
            info!(
                "step {} stage {} ce {:.4} total {:.4} active {:.2} K {:?}",
                r.step, r.stage, r.ce, r.total, r.active_experts_mean, r.experts
            );
        }
        if recent.len() == 10 {
            recent.remove(0);
        }
        recent.push(r.clone());
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e @ Error::NonFinite { .. }) => {
            let Error::NonFinite { step, stage, parts } = &e else { unreachable!() };
            let path = cfg.out.join(DIAGNOSTICS_FILE);
            let diag = Diagnostics {
                error: e.to_string(),
                step: *step,
                stage: *stage,
                parts,
                last_reports: &recent,
            };
            write_file(&path, serde_json::to_string_pretty(&diag).expect("diagnostics serialize"))?;
            eprintln!("error: {e}\ndiagnostics written to {}", path.display());
            return Ok(EXIT_NON_FINITE);
        }
        Err(e) => return Err(e),
    };
    for (i, m) in outcome.stage_models.iter().enumerate() {
        write_file(&cfg.out.join(format!("stage{}.ckpt", i + 1)), save_checkpoint(m))?;
    }
    write_file(&cfg.out.join(LOSS_CURVE_FILE), outcome.loss_curve_csv())?;
    write_file(&cfg.out.join(LIFECYCLE_FILE), outcome.lifecycle_csv())?;
    write_file(&cfg.out.join(ROUTING_FILE), export_activation_csv(&outcome.model.routing_records()))?;
    println!(
        "trained {} steps in {:.1}s; experts per layer {:?}; final checkpoint {} (sha256 {})",
        outcome.reports.len(),
        started.elapsed().as_secs_f64(),
        outcome.model.experts_per_layer(),
        cfg.out.join(FINAL_CHECKPOINT).display(),
        checkpoint_digest(&outcome.model)
    );
    Ok(EXIT_OK)
}

fn checkpoint_path(cfg: &RunConfig, checkpoint: &Path) -> PathBuf {
    if checkpoint.is_absolute() {
        checkpoint.to_path_buf()
    } else {
        cfg.out.join(checkpoint)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}

fn split_samples(cfg: &RunConfig, split: Split) -> Result<Vec<SyntheticSample>> {
    match split {
        Split::Train => train_split(&cfg.data),
        Split::Val => val_split(&cfg.data),
    }
}

fn check_compatible(cfg: &RunConfig, model: &Model) -> Result<()> {
    let m = &model.config;
    if m.d != cfg.data.dim || m.text_vocab != cfg.data.text_vocab || m.max_frames < cfg.data.frames {
        return Err(Error::Config(format!(
            "checkpoint model (d={}, text_vocab={}, max_frames={}) does not fit data (dim={}, text_vocab={}, frames={})",
            m.d, m.text_vocab, m.max_frames, cfg.data.dim, cfg.data.text_vocab, cfg.data.frames
        )));
    }
    Ok(())
}

/// Report for a split, from a model or (with `oracle`) the gold sequences.
pub fn eval_report(cfg: &RunConfig, model: Option<&Model>, split: Split) -> Result<EvalReport> {
    let samples = split_samples(cfg, split)?;
    match model {
        Some(m) => {
            check_compatible(cfg, m)?;
            Ok(evaluate_with_predictions(m, &samples, cfg.data.max_events)?.1)
        }
        None => {
            let gold: Vec<_> = samples.iter().map(|s| s.gold.clone()).collect();
            evaluate_predictions(&samples, &gold)
        }
    }
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split, oracle: bool) -> Result<i32> {
    let model = if oracle {
        None
    } else {
        Some(read_checkpoint(&checkpoint_path(cfg, checkpoint))?)
    };
    let report = eval_report(cfg, model.as_ref(), split)?;
    create_out(cfg)?;
    let stem = if oracle {
        format!("eval_{}_oracle", split.name())
    } else {
        format!("eval_{}", split.name())
    };
    write_file(&cfg.out.join(format!("{stem}.json")), report.to_json())?;
    write_file(&cfg.out.join(format!("{stem}.csv")), report.to_csv())?;
    print!("{}", report.summary());
    Ok(EXIT_OK)
}

/// Exact per-layer activation rates of `model` over `samples`, teacher
/// forced on the gold sequences.
pub fn routing_rates(model: &Model, samples: &[SyntheticSample]) -> Result<Vec<RoutingRecord>> {
    let layers: Vec<usize> = model.moe_layers().map(|m| m.experts.len()).collect();
    let mut counts: Vec<Vec<Vec<u64>>> = layers.iter().map(|&k| vec![vec![0; k]; TaskType::COUNT]).collect();
    let mut totals = vec![0u64; TaskType::COUNT];
    for s in samples {
        let stream = encode_events(&s.gold);
        let seq = SeqInput::teacher(&s.frames, &s.frame_timestamps, &s.query, &stream)?;
        let trace = model.routing_trace(&seq)?;
        for t in &trace.tags {
            totals[t.index()] += 1;
        }
        for (li, (decisions, _)) in trace.layers.iter().flatten().enumerate() {
            for (d, t) in decisions.iter().zip(&trace.tags) {
                for &e in &d.active {
                    counts[li][t.index()][e] += 1;
                }
            }
        }
    }
    let all: u64 = totals.iter().sum();
    Ok(layers
        .iter()
        .zip(&counts)
        .map(|(&k, c)| {
            let mut r = RoutingRecord::new(k, model.config.d);
            for t in 0..TaskType::COUNT {
                for e in 0..k {
                    let rate = if totals[t] == 0 { 0.0 } else { c[t][e] as f64 / totals[t] as f64 };
                    r.a.set(t, e, rate);
                }
            }
            r.a_e = (0..k)
                .map(|e| {
                    let fired: u64 = (0..TaskType::COUNT).map(|t| c[t][e]).sum();
                    if all == 0 { 0.0 } else { fired as f64 / all as f64 }
                })
                .collect();
            r
        })
        .collect())
}

fn cmd_inspect_routing(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<i32> {
    let model = read_checkpoint(&checkpoint_path(cfg, checkpoint))?;
    check_compatible(cfg, &model)?;
    let samples = split_samples(cfg, split)?;
    let records = routing_rates(&model, &samples)?;
    create_out(cfg)?;
    let path = cfg.out.join(format!("routing_{}.csv", split.name()));
    write_file(&path, export_activation_csv(&records))?;
    println!("wrote {} ({} MoE layers)", path.display(), records.len());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(seed: u64, corrupt: Option<String>) -> Result<i32> {
    let report = run_gradcheck(&GradcheckOptions {
        seed,
        corrupt,
        ..GradcheckOptions::default()
    })?;
    print!("{}", report.render());
    if report.passed() {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "gradient check failed: {} has relative error {:.3e}",
            report.worst().name,
            report.max_rel_error()
        );
        Ok(EXIT_FAILURE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_split_from_flags() {
        let args = ["expertflow", "train", "--model.gating=topk", "--out", "x", "--set", "a.b=1"].map(String::from);
        let (rest, ov) = extract_overrides(args.to_vec());
        assert_eq!(ov, vec!["model.gating=topk"]);
        assert_eq!(rest, ["expertflow", "train", "--out", "x", "--set", "a.b=1"]);
    }

    #[test]
    fn loss_curve_header_lists_layers() {
        assert_eq!(
            loss_curve_header(2),
            "step,stage,ce,z,aux,total,active_experts_mean,k_layer0,k_layer1"
        );
    }

    #[test]
    fn bad_override_exits_with_config_code() {
        let args = ["expertflow", "train", "--model.width=3", "--out", "/nonexistent/never"].map(String::from);
        assert_eq!(run(args), EXIT_CONFIG);
    }
}
