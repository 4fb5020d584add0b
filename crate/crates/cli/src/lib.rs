//! `altc` subcommands. Exit status: 0 on success, 1 for usage and config
//! errors, 2 for failures while running.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use altc_annotate::{bind_addr, ServiceState, TOKEN_ENV};
use altc_core::analysis::emit_report;
use altc_core::config::{ConfigError, LabelSourceKind, RunConfig};
use altc_core::data::{load_dataset, load_manifest, synth_generate, SynthSpec};
use altc_core::experiment::{
    report_from_journals, run_experiment, EncodedDataset, ExperimentError, ExperimentReport,
    LabelQueue, LabelSource, OracleLabels,
};
use altc_core::model::{pretrain_encoder, EncoderBase, PretrainConfig};
use clap::{Args, Parser, Subcommand};

/// Encoder checkpoint written by `pretrain` and picked up by `run`/`serve`.
pub const ENCODER_FILE: &str = "encoder.ckpt";
/// Reports are written here, under `--out`.
pub const REPORT_DIR: &str = "report";
/// Annotator answers kept by `serve`, under `--out`.
pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "altc",
    version,
    about = "Pool-based active learning for a small transformer text classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset (train.tsv, dev.tsv, manifest.toml).
    Synth(SynthArgs),
    /// Masked-token warm-up of the encoder; writes <out>/encoder.ckpt.
    Pretrain(RunArgs),
    /// Run the experiment described by a config with oracle labels.
    Run(RunArgs),
    /// Rebuild the reports from the journals under <out>.
    Analyze(AnalyzeArgs),
    /// Run the experiment with labels supplied over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Replaces the configured seeds (and run count), e.g. `--seed 1,2,3`.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seed: Vec<u64>,
    /// Encoder checkpoint to start from instead of <out>/encoder.ckpt.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML synthetic-data spec; the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Only the first value is used.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long)]
    pub difficulty: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Port to bind; the host comes from ALTC_ANNOTATE_ADDR or 127.0.0.1.
    #[arg(long)]
    pub port: Option<u16>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit status.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth(a) => synth(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::Run(a) => run(&a),
        Command::Analyze(a) => analyze(&a.out).map(|_| ()),
        Command::Serve(a) => serve(&a),
    }
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut spec = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str::<SynthSpec>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthSpec::new(2, 2000, 0.3, 1),
    };
    if let Some(&s) = a.seed.first() {
        spec.seed = s;
    }
    if let Some(c) = a.classes {
        spec.classes = c;
        spec.class_names = None;
    }
    if let Some(n) = a.pool_size {
        spec.pool_size = n;
    }
    if let Some(n) = a.eval_size {
        spec.eval_size = n;
    }
    if let Some(d) = a.difficulty {
        spec.difficulty = d;
    }
    let manifest = synth_generate(&spec, &a.out).map_err(|e| match e {
        altc_core::data::DataError::Io { .. } => runtime(e),
        other => CliError::Config(other.to_string()),
    })?;
    log::info!("wrote {}", manifest.display());
    Ok(())
}

/// Config with `--seed` applied.
pub fn load_config(a: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if !a.seed.is_empty() {
        cfg.experiment.seeds = a.seed.clone();
        cfg.experiment.num_runs = a.seed.len();
        cfg.validate()?;
    }
    Ok(cfg)
}

pub fn load_data(cfg: &RunConfig) -> Result<EncodedDataset, CliError> {
    let manifest =
        load_manifest(&cfg.data.manifest).map_err(|e| CliError::Config(e.to_string()))?;
    let dataset = load_dataset(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(EncodedDataset::new(dataset, &cfg.tokenizer())?)
}

fn pretrain_base(
    cfg: &RunConfig,
    pc: &PretrainConfig,
    data: &EncodedDataset,
) -> Result<EncoderBase<f64>, CliError> {
    let seed = cfg.experiment.seeds[0];
    let (base, losses) =
        pretrain_encoder::<f64>(&data.train, cfg.encoder.clone(), pc, seed).map_err(runtime)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!(
            "pretrain: {} steps, loss {first:.4} -> {last:.4}",
            losses.len()
        );
    }
    Ok(base)
}

fn write_base(base: &EncoderBase<f64>, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    let f = fs::File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    base.write(BufWriter::new(f)).map_err(runtime)
}

fn read_base(path: &Path, cfg: &RunConfig) -> Result<EncoderBase<f64>, CliError> {
    let f = fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot read encoder {}: {e}", path.display())))?;
    EncoderBase::read(std::io::BufReader::new(f), cfg.encoder.clone())
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn pretrain(a: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(a)?;
    let data = load_data(&cfg)?;
    let pc = cfg
        .pretrain
        .clone()
        .unwrap_or_else(|| PretrainConfig::new(200));
    let base = pretrain_base(&cfg, &pc, &data)?;
    let path = a.out.join(ENCODER_FILE);
    write_base(&base, &path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// `--encoder`, else `<out>/encoder.ckpt` when present, else a warm-up from
/// the `[pretrain]` section (saved for later runs), else none.
fn resolve_base(
    a: &RunArgs,
    cfg: &RunConfig,
    data: &EncodedDataset,
) -> Result<Option<EncoderBase<f64>>, CliError> {
    if let Some(p) = &a.encoder {
        return read_base(p, cfg).map(Some);
    }
    let saved = a.out.join(ENCODER_FILE);
    if saved.exists() {
        return read_base(&saved, cfg).map(Some);
    }
    match &cfg.pretrain {
        Some(pc) => {
            let base = pretrain_base(cfg, pc, data)?;
            write_base(&base, &saved)?;
            Ok(Some(base))
        }
        None => Ok(None),
    }
}

fn write_report(report: &ExperimentReport, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let data = report.report_data()?;
    let written = emit_report(&data, &out.join(REPORT_DIR)).map_err(runtime)?;
    let summary = data.summary().map_err(runtime)?;
    for arm in &data.arms {
        let last = summary
            .iter()
            .filter(|r| r.strategy == arm.strategy && r.freeze == arm.freeze)
            .max_by_key(|r| r.round);
        if let Some(r) = last {
            log::info!(
                "{}: round {} |T| {} mean accuracy {:.4} [{:.4}, {:.4}] over {} runs",
                arm.label(),
                r.round,
                r.t_size,
                r.mean,
                r.lower,
                r.upper,
                r.runs
            );
        }
    }
    Ok(written)
}

fn run(a: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(a)?;
    if cfg.experiment.label_source == LabelSourceKind::Human {
        return Err(CliError::Config(
            "label_source = \"human\" needs the labeling service; use `altc serve`".into(),
        ));
    }
    let data = load_data(&cfg)?;
    let base = resolve_base(a, &cfg, &data)?;
    let oracle = OracleLabels::new(data.train_labels.clone());
    let report = run_experiment(&cfg, &data, base.as_ref(), &a.out, &oracle)?;
    write_report(&report, &a.out)?;
    Ok(())
}

/// Rebuilds the reports from `<out>/journals`.
pub fn analyze(out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let report = report_from_journals(out)?;
    let written = write_report(&report, out)?;
    for p in &written {
        log::info!("wrote {}", p.display());
    }
    Ok(written)
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.run)?;
    let data = load_data(&cfg)?;
    let base = resolve_base(&a.run, &cfg, &data)?;
    let addr = bind_addr(a.port).map_err(CliError::Config)?;
    let out = a.run.out.clone();
    let queue = Arc::new(
        LabelQueue::new(
            data.dataset.classes.names().to_vec(),
            Some(&out.join(LABELS_FILE)),
            Duration::from_secs(cfg.experiment.label_timeout_secs),
        )
        .map_err(runtime)?,
    );
    let state = ServiceState {
        queue: Some(queue.clone()),
        out: out.clone(),
        token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
    };

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind(addr))
        .map_err(|e| runtime(format!("cannot bind {addr}: {e}")))?;
    let local = listener.local_addr().map_err(runtime)?;
    eprintln!("labeling service listening on http://{local}");
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let server = rt.spawn(altc_annotate::serve(listener, state, async move {
        tokio::select! {
            _ = stop_rx => {}
            _ = tokio::signal::ctrl_c() => {}
        }
    }));

    let source: &dyn LabelSource = queue.as_ref();
    let result = run_experiment(&cfg, &data, base.as_ref(), &out, source)
        .map_err(CliError::from)
        .and_then(|r| write_report(&r, &out).map(|_| ()));
    let _ = stop_tx.send(());
    rt.block_on(server).map_err(runtime)?.map_err(runtime)?;
    result
}
