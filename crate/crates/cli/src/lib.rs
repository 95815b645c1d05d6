//! Command-line front end: `train`, `infer`, `perfmodel` and `commstats`.
//!
//! Settings resolve in increasing priority: built-in defaults, `CAAT_SEED`,
//! the `--config` file, then flags. Exit codes are 0 on success, 1 when a run
//! fails after it started and 2 for usage or configuration errors.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use caat::collectives::{CollectiveKind, Pass};
use caat::perf::{self, PerfInput};
use caat::train::{
    greedy_continue, load_checkpoint, logical_device_inference, MetricsRow, TrainConfig, Trainer,
};
use caat::CommLedger;
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "CAAT_SEED";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "caat",
    version,
    about = "Tensor-parallel training with partial channel-reduce"
)]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics, the ledger and a checkpoint.
    Train(TrainArgs),
    /// Greedy continuation from a checkpoint.
    Infer(InferArgs),
    /// Evaluate the analytic compute/communication model.
    Perfmodel(PerfArgs),
    /// Communication totals of a run against full synchronization.
    Commstats(CommstatsArgs),
}

/// Settings shared by every command that builds a training configuration.
#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// File of `key=value` lines; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fraction of channels synchronized across ranks (mask keep fraction under `--mask`).
    #[arg(long)]
    pub p: Option<f64>,
    /// Tensor-parallel degree.
    #[arg(long)]
    pub tp: Option<usize>,
    /// Transformer layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden width.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Attention heads; a multiple of `--tp`.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Tokens per sequence.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Sequences per step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// AdamW learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed; overrides `CAAT_SEED`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Backward placement of the gradient reduce: before (`g`) or after (`h`) the norm.
    #[arg(long, value_parser = ["g", "h"])]
    pub placement: Option<String>,
    /// Scale private channels by sqrt(tp) after the reduce.
    #[arg(long, value_parser = ["on", "off"])]
    pub scale_private: Option<String>,
    /// Precision of backward gradient reduces.
    #[arg(long, value_parser = ["full64", "emulated16"])]
    pub accum: Option<String>,
    /// Compress the forward reduce-scatter with a channel mask instead.
    #[arg(long, value_parser = ["none", "topk", "random"])]
    pub mask: Option<String>,
    /// Byte-level text corpus.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Seeded uniform tokens instead of a corpus.
    #[arg(long)]
    pub synthetic: bool,
    /// Steps between validation rows.
    #[arg(long)]
    pub eval_every: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        put("p", self.p.map(|v| v.to_string()));
        put("tp", self.tp.map(|v| v.to_string()));
        put("layers", self.layers.map(|v| v.to_string()));
        put("hidden", self.hidden.map(|v| v.to_string()));
        put("heads", self.heads.map(|v| v.to_string()));
        put("seq_len", self.seq_len.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("steps", self.steps.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("placement", self.placement.clone());
        put("scale_private", self.scale_private.clone());
        put("accum", self.accum.clone());
        put("mask", self.mask.clone());
        put("data", self.data.as_ref().map(|p| p.display().to_string()));
        put("data", self.synthetic.then(|| "synthetic".to_string()));
        put("eval_every", self.eval_every.map(|v| v.to_string()));
        out
    }

    /// Defaults, then `env_seed`, then the config file, then flags.
    pub fn resolve(&self, env_seed: Option<&str>) -> CliResult<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(seed) = env_seed {
            cfg.set("seed", seed)
                .map_err(|e| usage(format!("{SEED_ENV}: {e}")))?;
        }
        if let Some(path) = &self.config {
            let text =
                fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    usage(format!(
                        "{}: expected key=value, got `{line}`",
                        path.display()
                    ))
                })?;
                cfg.set(k, v)
                    .map_err(|e| usage(format!("{}: {e}", path.display())))?;
            }
        }
        for (k, v) in self.overrides() {
            cfg.set(k, &v).map_err(usage)?;
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub settings: ConfigArgs,
    /// Output directory; rewritten on every run.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Prompt, one token per byte.
    #[arg(long, default_value = "\n")]
    pub prompt_bytes: String,
    /// Tokens to generate.
    #[arg(long, default_value_t = 16)]
    pub generate: usize,
    /// Compare single-device logits against the multi-rank execution.
    #[arg(long)]
    pub check_logical: bool,
}

#[derive(Debug, Args)]
pub struct PerfArgs {
    /// Hidden width.
    #[arg(long)]
    pub h: f64,
    /// Sequence length.
    #[arg(long)]
    pub s: f64,
    /// Tensor-parallel degree.
    #[arg(long)]
    pub r: f64,
    /// FLOPs per communicated element.
    #[arg(long = "C")]
    pub c: f64,
    /// Synchronization factor; omitted means a sweep over `[0, 1]`.
    #[arg(long)]
    pub p: Option<f64>,
    /// Write the sweep here and the optimum next to it as `*.summary.csv`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Sweep resolution.
    #[arg(long, default_value_t = 11, value_parser = clap::value_parser!(u16).range(2..))]
    pub points: u16,
}

#[derive(Debug, Args)]
pub struct CommstatsArgs {
    #[command(flatten)]
    pub settings: ConfigArgs,
    /// Metrics CSV of a finished run; its `config.txt` is used unless
    /// `--config` is given.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

pub fn run(cli: Cli, out: &mut impl Write) -> CliResult {
    let env_seed = std::env::var(SEED_ENV).ok();
    match cli.command {
        Command::Train(a) => cmd_train(&a, env_seed.as_deref(), out),
        Command::Infer(a) => cmd_infer(&a, out),
        Command::Perfmodel(a) => cmd_perfmodel(&a, out),
        Command::Commstats(a) => cmd_commstats(&a, env_seed.as_deref(), out),
    }
}

/// Hex digest of the settings that determine a run's results.
pub fn run_id(cfg: &TrainConfig) -> String {
    let canonical = TrainConfig {
        checkpoint_dir: None,
        ..cfg.clone()
    };
    let digest = Sha256::digest(canonical.to_kv().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_train(args: &TrainArgs, env_seed: Option<&str>, out: &mut impl Write) -> CliResult {
    let mut cfg = args.settings.resolve(env_seed)?;
    let dir = &args.out;
    fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    if ckpt.exists() {
        fs::remove_dir_all(&ckpt).map_err(|e| runtime(format!("{}: {e}", ckpt.display())))?;
    }
    cfg.checkpoint_dir = Some(ckpt);
    let id = run_id(&cfg);
    write_file(&dir.join(CONFIG_FILE), &cfg.to_kv())?;
    let mut manifest = format!("run_id={id}\nversion={}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in cfg.to_pairs() {
        manifest.push_str(&format!("config.{k}={v}\n"));
    }
    for (k, f) in [
        ("metrics", METRICS_FILE),
        ("ledger", LEDGER_FILE),
        ("checkpoint", CHECKPOINT_DIR),
    ] {
        manifest.push_str(&format!("files.{k}={f}\n"));
    }
    write_file(&dir.join(MANIFEST_FILE), &manifest)?;

    let mut trainer = Trainer::<f64>::new(cfg).map_err(usage)?;
    let metrics_path = dir.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path)
        .map_err(|e| runtime(format!("{}: {e}", metrics_path.display())))?;
    let mut metrics = BufWriter::new(file);
    writeln!(metrics, "{}", MetricsRow::HEADER).map_err(runtime)?;
    writeln!(out, "run_id={id}").map_err(runtime)?;
    let result = trainer.run(|row| {
        writeln!(metrics, "{}", row.to_csv())?;
        metrics.flush()?;
        writeln!(
            out,
            "step {:>6}  train {:>8}  val {:.4}  comm {}",
            row.step,
            row.train_loss.map_or("-".into(), |l| format!("{l:.4}")),
            row.val_loss,
            row.comm_fwd + row.comm_bwd
        )?;
        Ok(())
    });
    let mut ledger = Vec::new();
    trainer.ledger().write_csv(&mut ledger).map_err(runtime)?;
    write_file(&dir.join(LEDGER_FILE), &String::from_utf8_lossy(&ledger))?;
    result.map_err(runtime)
}

pub fn cmd_infer(args: &InferArgs, out: &mut impl Write) -> CliResult {
    let ckpt = load_checkpoint::<f64>(&args.ckpt).map_err(usage)?;
    let model = ckpt.model;
    let vocab = model.config().vocab;
    let prompt: Vec<usize> = args.prompt_bytes.bytes().map(usize::from).collect();
    if prompt.is_empty() {
        return Err(usage("the prompt must hold at least one byte"));
    }
    if let Some(&t) = prompt.iter().find(|&&t| t >= vocab) {
        return Err(usage(format!(
            "prompt byte {t} is outside the vocabulary of {vocab}"
        )));
    }
    let window = &prompt[prompt.len().saturating_sub(model.config().max_seq)..];
    if args.check_logical {
        let mut ledger = CommLedger::new();
        let distributed = model.logits(window, &mut ledger).map_err(runtime)?;
        let logical = logical_device_inference(&model, window).map_err(runtime)?;
        let diff = if distributed.bit_eq(&logical) {
            0.0
        } else {
            distributed.max_abs_diff(&logical).max(f64::MIN_POSITIVE)
        };
        writeln!(out, "ranks={}", model.ranks()).map_err(runtime)?;
        writeln!(out, "distributed_comm_elems={}", ledger.total_elements()).map_err(runtime)?;
        writeln!(out, "logical_comm_elems=0").map_err(runtime)?;
        writeln!(out, "max_diff={diff}").map_err(runtime)?;
        if diff != 0.0 {
            return Err(runtime(
                "logical-device logits differ from the multi-rank execution",
            ));
        }
    }
    let tokens = greedy_continue(&model, &prompt, args.generate, |t| {
        logical_device_inference(&model, t)
    })
    .map_err(runtime)?;
    let ids: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    writeln!(out, "tokens={}", ids.join(" ")).map_err(runtime)?;
    let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
    writeln!(out, "text={}", bytes.escape_ascii()).map_err(runtime)?;
    Ok(())
}

pub fn cmd_perfmodel(args: &PerfArgs, out: &mut impl Write) -> CliResult {
    let input =
        PerfInput::new(args.h, args.s, args.r, args.c, args.p.unwrap_or(1.0)).map_err(usage)?;
    let points = usize::from(args.points);
    let rows = perf::sweep(args.h, args.s, args.r, args.c, points);
    if args.p.is_some() {
        writeln!(out, "G={}", input.gemm_ops()).map_err(runtime)?;
        writeln!(out, "P={}", input.payload()).map_err(runtime)?;
        writeln!(out, "T={}", input.layer_time()).map_err(runtime)?;
        writeln!(out, "speedup={}", input.speedup()).map_err(runtime)?;
    } else {
        perf::write_sweep_csv(&rows, &mut *out).map_err(runtime)?;
    }
    writeln!(out, "p_star={}", input.optimal_p()).map_err(runtime)?;
    if let Some(path) = &args.csv {
        let mut sweep = Vec::new();
        perf::write_sweep_csv(&rows, &mut sweep).map_err(runtime)?;
        write_file(path, &String::from_utf8_lossy(&sweep))?;
        let mut summary = Vec::new();
        perf::write_summary_csv(&input, &mut summary).map_err(runtime)?;
        write_file(&summary_path(path), &String::from_utf8_lossy(&summary))?;
    }
    Ok(())
}

/// `sweep.csv` becomes `sweep.summary.csv`.
pub fn summary_path(csv: &Path) -> PathBuf {
    let stem = csv
        .file_stem()
        .map_or("sweep".into(), |s| s.to_string_lossy().into_owned());
    csv.with_file_name(format!("{stem}.summary.csv"))
}

/// Tensor-parallel elements per rank of one training step, forward and
/// backward, plus the norm-gain synchronization.
pub fn step_traffic(cfg: &TrainConfig) -> CliResult<(u64, u64, u64)> {
    let mut trainer = Trainer::<f64>::new(TrainConfig {
        checkpoint_dir: None,
        ..cfg.clone()
    })
    .map_err(usage)?;
    trainer.step().map_err(runtime)?;
    let l = trainer.ledger();
    Ok((
        l.tensor_parallel_elements(Some(Pass::Forward)),
        l.tensor_parallel_elements(Some(Pass::Backward)),
        l.kind_elements(CollectiveKind::NormSync, Pass::Backward),
    ))
}

/// Last data row of a metrics CSV.
pub fn read_last_metrics(path: &Path) -> CliResult<MetricsRow> {
    let file = fs::File::open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(runtime)?
        .unwrap_or_default();
    if header != MetricsRow::HEADER {
        return Err(usage(format!("{}: not a metrics file", path.display())));
    }
    let last = lines
        .map_while(io::Result::ok)
        .filter(|l| !l.is_empty())
        .last()
        .ok_or_else(|| usage(format!("{}: no rows", path.display())))?;
    let f: Vec<&str> = last.split(',').collect();
    let bad = || usage(format!("{}: malformed row `{last}`", path.display()));
    if f.len() != 6 {
        return Err(bad());
    }
    Ok(MetricsRow {
        step: f[0].parse().map_err(|_| bad())?,
        train_loss: if f[1].is_empty() {
            None
        } else {
            Some(f[1].parse().map_err(|_| bad())?)
        },
        val_loss: f[2].parse().map_err(|_| bad())?,
        comm_fwd: f[3].parse().map_err(|_| bad())?,
        comm_bwd: f[4].parse().map_err(|_| bad())?,
        norm_sync: f[5].parse().map_err(|_| bad())?,
    })
}

fn percent(x: f64) -> String {
    format!("{:.3}%", 100.0 * x)
}

pub fn cmd_commstats(
    args: &CommstatsArgs,
    env_seed: Option<&str>,
    out: &mut impl Write,
) -> CliResult {
    let mut settings_path = args.settings.config.clone();
    if settings_path.is_none() {
        if let Some(m) = &args.metrics {
            settings_path = Some(m.with_file_name(CONFIG_FILE));
        }
    }
    if settings_path.is_none() {
        return Err(usage("commstats needs --config or --metrics"));
    }
    let mut settings = args.settings.clone();
    settings.config = settings_path;
    let cfg = settings.resolve(env_seed)?;
    let baseline_cfg = TrainConfig {
        p: 1.0,
        mask: None,
        ..cfg.clone()
    };
    let (base_fwd, base_bwd, _) = step_traffic(&baseline_cfg)?;
    let (steps, fwd, bwd, norm) = match &args.metrics {
        Some(path) => {
            let row = read_last_metrics(path)?;
            (row.step, row.comm_fwd, row.comm_bwd, row.norm_sync)
        }
        None => {
            let (f, b, n) = step_traffic(&cfg)?;
            (cfg.steps, f * cfg.steps, b * cfg.steps, n * cfg.steps)
        }
    };
    let measured = fwd + bwd;
    let baseline = (base_fwd + base_bwd) * steps;
    let saved = baseline.saturating_sub(measured);
    let reduction = if baseline == 0 {
        0.0
    } else {
        saved as f64 / baseline as f64
    };
    let (caat, mask) = perf::mask_comm_reduction(cfg.p);
    let lines = [
        format!("steps={steps}"),
        format!("tp_forward_elems={fwd}"),
        format!("tp_backward_elems={bwd}"),
        format!("tp_total_elems={measured}"),
        format!("baseline_total_elems={baseline}"),
        format!("saved_elems={saved}"),
        format!("norm_sync_elems={norm}"),
        format!("measured_reduction={}", percent(reduction)),
        format!("analytic_caat_reduction={}", percent(caat)),
        format!("analytic_mask_reduction={}", percent(mask)),
    ];
    for l in lines {
        writeln!(out, "{l}").map_err(runtime)?;
    }
    Ok(())
}
