//! Command-line surface: `train`, `eval`, `simulate`, and `inspect`
//! subcommands over the library, with deterministic seeding, TOML
//! configuration, ablation presets, and stable exit codes
//! (0 success, 2 configuration, 3 data, 4 runtime).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::agents::{AgentBundle, AgentError};
use crate::config::{Config, ConfigError, Preset};
use crate::env::{write_trajectory_log, Environment, ASPECT_NAMES, N_ASPECTS};
use crate::evalkit::{
    evaluate_online, gauc, ncis, simulate_log, train_bc, BundlePolicy, EvalError, EvalReport,
    LoggedDataset, RandomPolicy, RankingPolicy,
};
use crate::nn::{load_checkpoint, read_manifest, save_checkpoint};
use crate::rng::RngStream;
use crate::training::{merged_params, split_params, train, TrainError, TrainingReport};
use crate::worldmodel::{WmError, WorldModel};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_FILE: &str = "run.json";
const RUN_SCHEMA: &str = "mmrf-run/1";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(m) | EvalError::Contract(m) => CliError::Config(m),
            EvalError::Data(m) => CliError::Data(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<WmError> for CliError {
    fn from(e: WmError) -> Self {
        match e {
            WmError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn write_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("cannot write artifact: {e}"))
}

#[derive(Debug, Parser)]
#[command(
    name = "mmrf",
    version,
    about = "Multi-aspect session ranking: train, evaluate, simulate, inspect",
    after_help = "Logging: set MMRF_LOG=error|info|debug (default error).\n\
                  Determinism: every command is a pure function of its flags,\n\
                  config file, and seed; --threads never changes results."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for parallel rollouts (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the ranker and write a checkpoint directory.
    Train(TrainArgs),
    /// Evaluate a policy online and, given a logged dataset, offline.
    Eval(EvalArgs),
    /// Roll a policy in the simulator and write a trajectory log.
    Simulate(SimulateArgs),
    /// Summarize a checkpoint's parameters and shapes.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    /// The trained ranker loaded from --checkpoint.
    #[value(alias = "mmrf")]
    Checkpoint,
    /// Uniform-random scores (reproducible per request).
    Random,
    /// Behavior cloning fitted on --dataset.
    Bc,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation preset; keys set explicitly in the config file still win.
    #[arg(long)]
    pub preset: Option<String>,
    /// Output directory for the checkpoint, reports, and effective config.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Training output directory (carries its own config).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Trajectory log for offline metrics; must come from the same
    /// environment config and seed.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PolicyKind::Checkpoint)]
    pub policy: PolicyKind,
    /// Online evaluation episodes (default: the config's eval.episodes).
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Where to write the JSON report (a .csv sibling is written too).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// TOML configuration when evaluating without a checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the held-out evaluation episodes (default: config seed).
    /// The environment catalog always follows the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub policy: PolicyKind,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    /// Output trajectory log (newline-delimited JSON).
    #[arg(long)]
    pub log: PathBuf,
    /// Training output directory; required for --policy checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Existing trajectory log to fit the bc policy on.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// TOML configuration when simulating without a checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for which sessions are visited (default: config seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Training output directory (or any checkpoint directory).
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Initialize logging from the `MMRF_LOG` environment variable
/// (error|info|debug; default error). Safe to call more than once.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("MMRF_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Size the global worker pool. Results never depend on the thread count;
/// this only trades latency for cores. Calling twice keeps the first size.
pub fn install_thread_pool(threads: usize) {
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            cmd_train(&args)?;
            Ok(())
        }
        Command::Eval(args) => {
            cmd_eval(&args)?;
            Ok(())
        }
        Command::Simulate(args) => {
            cmd_simulate(&args)?;
            Ok(())
        }
        Command::Inspect(args) => {
            print!("{}", cmd_inspect(&args)?);
            Ok(())
        }
    }
}

/// Layer the configuration sources: file (or defaults) → preset for keys
/// the file leaves unset → --seed override.
pub fn effective_config(
    config_path: Option<&Path>,
    preset: Option<&str>,
    seed: Option<u64>,
) -> Result<Config, CliError> {
    let text = match config_path {
        Some(path) => fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read {}: {e}", path.display()))
        })?,
        None => String::new(),
    };
    let mut config = Config::from_toml_str(&text)?;
    if let Some(name) = preset {
        let preset: Preset = name.parse()?;
        let raw: toml::Value = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("TOML: {e}")))?;
        let file_sets = |key: &str| {
            raw.get("training").and_then(|t| t.get(key)).is_some()
        };
        let mut with_preset = config.clone();
        with_preset.apply_preset(preset);
        if !file_sets("collab") {
            config.training.collab = with_preset.training.collab;
        }
        if !file_sets("nonimpression") {
            config.training.nonimpression = with_preset.training.nonimpression;
        }
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

/// Extra run metadata the checkpoint files cannot carry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema: String,
    pub config_hash: String,
    pub wm_trained_epochs: u64,
    pub final_mean_watch_time: f64,
}

fn build_env(config: &Config) -> Result<Environment, CliError> {
    Environment::new(config.env.clone(), config.seed)
        .map_err(|e| CliError::Config(e.to_string()))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainingReport, CliError> {
    let config = effective_config(args.config.as_deref(), args.preset.as_deref(), args.seed)?;
    let env = build_env(&config)?;
    let root = RngStream::from_seed(config.seed).split_str("train");
    log::info!("training starts: seed {}, {} epochs", config.seed, config.training.epochs);
    let outcome = train(&env, &config.agent_config(), &config.wm_config(), &config.training, &root)?;

    fs::create_dir_all(&args.out).map_err(write_err)?;
    fs::write(args.out.join(CONFIG_FILE), config.to_toml_string()).map_err(write_err)?;
    let report_json =
        serde_json::to_vec_pretty(&outcome.report).map_err(write_err)?;
    fs::write(args.out.join(REPORT_FILE), report_json).map_err(write_err)?;
    fs::write(args.out.join(METRICS_FILE), outcome.report.to_csv()).map_err(write_err)?;
    let merged = merged_params(&outcome.bundle, &outcome.worldmodel)?;
    save_checkpoint(&args.out, &merged, &outcome.opt)
        .map_err(|e| CliError::Runtime(format!("cannot write checkpoint: {e}")))?;
    let meta = RunMeta {
        schema: RUN_SCHEMA.into(),
        config_hash: config.hash(),
        wm_trained_epochs: outcome.worldmodel.trained_epochs(),
        final_mean_watch_time: outcome.report.final_mean_watch_time,
    };
    fs::write(
        args.out.join(RUN_FILE),
        serde_json::to_vec_pretty(&meta).map_err(write_err)?,
    )
    .map_err(write_err)?;

    println!(
        "trained {} epochs over {} sessions; final mean session watch time {:.3}; artifacts in {}",
        outcome.report.epochs.len(),
        outcome.report.total_sessions,
        outcome.report.final_mean_watch_time,
        args.out.display()
    );
    Ok(outcome.report)
}

/// Load a training output directory back into (config, bundle, model).
pub fn load_run(dir: &Path) -> Result<(Config, AgentBundle, WorldModel), CliError> {
    let config = Config::load(&dir.join(CONFIG_FILE))
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let (merged, _opt) = load_checkpoint(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let meta_bytes = fs::read(dir.join(RUN_FILE)).map_err(|e| {
        CliError::Data(format!("{} is not a training output directory: {e}", dir.display()))
    })?;
    let meta: RunMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| CliError::Data(format!("bad {RUN_FILE}: {e}")))?;
    if meta.schema != RUN_SCHEMA {
        return Err(CliError::Data(format!(
            "unsupported run schema `{}` (expected `{RUN_SCHEMA}`)",
            meta.schema
        )));
    }
    let (agent_params, wm_params) = split_params(&merged);
    let target = agent_params.clone();
    let bundle = AgentBundle::from_parts(config.agent_config(), agent_params, target)?;
    let wm = WorldModel::from_parts(
        config.wm_config(),
        wm_params,
        &RngStream::from_seed(config.seed).split_str("wm-restore"),
        meta.wm_trained_epochs,
    )?;
    Ok((config, bundle, wm))
}

struct ResolvedPolicy {
    config: Config,
    policy: Box<dyn RankingPolicy>,
}

fn resolve_policy(
    kind: PolicyKind,
    checkpoint: Option<&Path>,
    dataset: Option<&Path>,
    config_path: Option<&Path>,
) -> Result<ResolvedPolicy, CliError> {
    match kind {
        PolicyKind::Checkpoint => {
            let dir = checkpoint.ok_or_else(|| {
                CliError::Config("--policy checkpoint requires --checkpoint".into())
            })?;
            if config_path.is_some() {
                return Err(CliError::Config(
                    "--config conflicts with --checkpoint; the checkpoint carries its \
                     own configuration"
                        .into(),
                ));
            }
            let (config, bundle, _wm) = load_run(dir)?;
            let mode = config.training.collab;
            Ok(ResolvedPolicy { config, policy: Box::new(BundlePolicy::new(bundle, mode)) })
        }
        PolicyKind::Random => {
            if checkpoint.is_some() {
                return Err(CliError::Config(
                    "--checkpoint is only meaningful with --policy checkpoint".into(),
                ));
            }
            let config = effective_config(config_path, None, None)?;
            Ok(ResolvedPolicy {
                policy: Box::new(RandomPolicy::new(config.seed)),
                config,
            })
        }
        PolicyKind::Bc => {
            if checkpoint.is_some() {
                return Err(CliError::Config(
                    "--checkpoint is only meaningful with --policy checkpoint".into(),
                ));
            }
            let path = dataset.ok_or_else(|| {
                CliError::Config("--policy bc requires --dataset to fit on".into())
            })?;
            let config = effective_config(config_path, None, None)?;
            let env = build_env(&config)?;
            let ds = LoggedDataset::from_file(path)
                .map_err(|e| CliError::Data(e.to_string()))?;
            let fit = train_bc(&ds, env.catalog(), &config.eval.bc)?;
            log::info!("bc fitted: training accuracy {:.3}", fit.accuracy);
            Ok(ResolvedPolicy { config, policy: Box::new(fit.policy) })
        }
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let resolved = resolve_policy(
        args.policy,
        args.checkpoint.as_deref(),
        args.dataset.as_deref(),
        args.config.as_deref(),
    )?;
    let config = &resolved.config;
    let policy = resolved.policy.as_ref();
    let env = build_env(config)?;

    let (ncis_detail, gauc_detail) = match &args.dataset {
        Some(path) => {
            let ds = LoggedDataset::from_file(path)
                .map_err(|e| CliError::Data(e.to_string()))?;
            let n = ncis(&ds, policy, env.catalog(), config.eval.cap, config.eval.temperature)?;
            let g = gauc(&ds, policy, env.catalog())?;
            (Some(n), Some(g))
        }
        None => (None, None),
    };

    let eval_seed = args.seed.unwrap_or(config.seed);
    let episodes = args.episodes.unwrap_or(config.eval.episodes);
    let online = evaluate_online(
        &env,
        policy,
        episodes,
        config.training.gamma,
        &RngStream::from_seed(eval_seed).split_str("eval"),
    )?;

    let report = EvalReport {
        policy: policy.name().to_string(),
        seed: eval_seed,
        config_hash: config.hash(),
        ncis: ncis_detail,
        gauc: gauc_detail,
        online: Some(online),
    };

    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_vec_pretty(&report).map_err(write_err)?)
            .map_err(write_err)?;
        fs::write(path.with_extension("csv"), crate::evalkit::eval_csv(&report))
            .map_err(write_err)?;
    }

    println!("policy {}  episodes {episodes}  seed {eval_seed}", report.policy);
    if let Some(online) = &report.online {
        for aspect in 0..N_ASPECTS {
            print!("  online.{} {:.6}", ASPECT_NAMES[aspect], online.mean_returns[aspect]);
            if let Some(n) = &report.ncis {
                print!("  ncis {:.6}", n.values[aspect]);
            }
            if let Some(value) = report.gauc.as_ref().and_then(|g| g[aspect].value) {
                print!("  gauc {value:.6}");
            }
            println!();
        }
    }
    Ok(report)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<usize, CliError> {
    if args.episodes == 0 {
        return Err(CliError::Config("--episodes must be at least 1".into()));
    }
    let resolved = resolve_policy(
        args.policy,
        args.checkpoint.as_deref(),
        args.dataset.as_deref(),
        args.config.as_deref(),
    )?;
    let config = &resolved.config;
    let env = build_env(config)?;
    let sim_seed = args.seed.unwrap_or(config.seed);
    let records = simulate_log(
        &env,
        resolved.policy.as_ref(),
        args.episodes,
        &RngStream::from_seed(sim_seed).split_str("simulate"),
    )?;
    write_trajectory_log(&args.log, &records)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", args.log.display())))?;
    println!(
        "wrote {} requests from {} sessions to {}",
        records.len(),
        args.episodes,
        args.log.display()
    );
    Ok(records.len())
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<String, CliError> {
    let meta = read_manifest(&args.checkpoint)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.checkpoint.display())))?;
    let mut out = String::new();
    let total: usize = meta.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    out.push_str(&format!("schema {}  dtype {}\n", meta.schema, meta.dtype));
    out.push_str(&format!(
        "{} parameter tensors, {} values; {} optimizer slots\n\n",
        meta.params.len(),
        total,
        meta.opt.len()
    ));
    let width = meta.params.iter().map(|p| p.name.len()).max().unwrap_or(0);
    for p in &meta.params {
        let numel: usize = p.shape.iter().product();
        out.push_str(&format!("  {:width$}  {:?}  {numel}\n", p.name, p.shape));
    }
    out.push_str("\nnamespaces:\n");
    let mut namespaces: Vec<(String, usize)> = Vec::new();
    for p in &meta.params {
        let parts: Vec<&str> = p.name.split('.').collect();
        let ns = if parts[0] == "agent" && parts.len() > 1 {
            format!("{}.{}", parts[0], parts[1])
        } else {
            parts[0].to_string()
        };
        match namespaces.iter_mut().find(|(n, _)| *n == ns) {
            Some((_, count)) => *count += 1,
            None => namespaces.push((ns, 1)),
        }
    }
    for (ns, count) in &namespaces {
        out.push_str(&format!("  {ns}.* ({count} tensors)\n"));
    }
    Ok(out)
}
