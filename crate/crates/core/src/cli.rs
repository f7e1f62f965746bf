//! Command-line front end: `key=value` run configuration and the subcommands.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::architectures::{Checkpoint, Family, Model};
use crate::bench::{run_bench, to_csv, BenchConfig};
use crate::error::Error;
use crate::expressivity::run_hierarchy_suite;
use crate::graphgen::{build_dynamic, export_json};
use crate::signal::{apply_norm, synth_split, Dataset, Split, SynthConfig};
use crate::training::{evaluate, run_seeds, train, EvalReport, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
    Violation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Violation(_) => EXIT_VIOLATION,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Violation(m) => write!(f, "property violation: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Data(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Every tunable of every subcommand, resolved from defaults, a config file
/// and `--set` overrides in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Base seed of the synthetic splits.
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval_seeds: usize,
    pub bench: BenchConfig,
    pub expressivity_seeds: usize,
    pub expressivity_hidden: usize,
    pub export_top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train_count: 2000,
            val_count: 500,
            test_count: 500,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            eval_seeds: 5,
            bench: BenchConfig::default(),
            expressivity_seeds: 20,
            expressivity_hidden: 8,
            export_top_k: DEFAULT_TOP_K,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        let s = &mut self.synth;
        let t = &mut self.train;
        let b = &mut self.bench;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.train_count" => self.train_count = parse(key, v)?,
            "data.val_count" => self.val_count = parse(key, v)?,
            "data.test_count" => self.test_count = parse(key, v)?,
            "synth.channels" => s.channels = parse(key, v)?,
            "synth.duration_s" => s.duration_s = parse(key, v)?,
            "synth.sample_rate" => s.sample_rate = parse(key, v)?,
            "synth.seizure_prob" => s.seizure_prob = parse(key, v)?,
            "synth.focal" => s.focal = parse_list(key, v)?,
            "synth.background_components" => s.background_components = parse(key, v)?,
            "synth.background_amplitude" => s.background_amplitude = parse(key, v)?,
            "synth.noise_std" => s.noise_std = parse(key, v)?,
            "synth.seizure_gain" => s.seizure_gain = parse(key, v)?,
            "synth.seizure_freq_hz" => s.seizure_freq_hz = parse(key, v)?,
            "synth.coupling" => s.coupling = parse(key, v)?,
            "synth.min_seizure_s" => s.min_seizure_s = parse(key, v)?,
            "synth.max_seizure_s" => s.max_seizure_s = parse(key, v)?,
            "synth.artifact_prob" => s.artifact_prob = parse(key, v)?,
            "synth.max_artifacts" => s.max_artifacts = parse(key, v)?,
            "synth.preictal_s" => s.preictal_s = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.family" => t.arch.family = parse(key, v)?,
            "train.mode" => t.arch.mode = parse(key, v)?,
            "train.cell" => t.arch.cell = parse(key, v)?,
            "train.pe" => t.arch.pe = parse_bool(key, v)?,
            "train.tau" => t.tau = parse(key, v)?,
            "train.k" => t.k = parse(key, v)?,
            "train.hidden" => t.hidden = parse(key, v)?,
            "train.seq_layers" => t.seq_layers = parse(key, v)?,
            "train.gcn_layers" => t.gcn_layers = parse(key, v)?,
            "train.pool" => t.pool = parse(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            "eval.seeds" => self.eval_seeds = parse(key, v)?,
            "bench.steps" => b.steps = parse_list(key, v)?,
            "bench.families" => b.families = parse_list(key, v)?,
            "bench.nodes" => b.nodes = parse(key, v)?,
            "bench.features" => b.features = parse(key, v)?,
            "bench.hidden" => b.hidden = parse(key, v)?,
            "bench.tau" => b.tau = parse(key, v)?,
            "bench.repeats" => b.repeats = parse(key, v)?,
            "bench.warmups" => b.warmups = parse(key, v)?,
            "bench.seed" => b.seed = parse(key, v)?,
            "expressivity.seeds" => self.expressivity_seeds = parse(key, v)?,
            "expressivity.hidden" => self.expressivity_hidden = parse(key, v)?,
            "export.top_k" => self.export_top_k = parse(key, v)?,
            _ => return Err(CliError::Usage(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Resolved `key=value` pairs in key order; feeding them back through
    /// [`RunConfig::set`] reproduces `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (s, t, b) = (&self.synth, &self.train, &self.bench);
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("data.train_count", self.train_count.to_string()),
            ("data.val_count", self.val_count.to_string()),
            ("data.test_count", self.test_count.to_string()),
            ("synth.channels", s.channels.to_string()),
            ("synth.duration_s", s.duration_s.to_string()),
            ("synth.sample_rate", s.sample_rate.to_string()),
            ("synth.seizure_prob", format!("{:?}", s.seizure_prob)),
            ("synth.focal", join(&s.focal)),
            ("synth.background_components", s.background_components.to_string()),
            ("synth.background_amplitude", format!("{:?}", s.background_amplitude)),
            ("synth.noise_std", format!("{:?}", s.noise_std)),
            ("synth.seizure_gain", format!("{:?}", s.seizure_gain)),
            ("synth.seizure_freq_hz", format!("{:?}", s.seizure_freq_hz)),
            ("synth.coupling", format!("{:?}", s.coupling)),
            ("synth.min_seizure_s", s.min_seizure_s.to_string()),
            ("synth.max_seizure_s", s.max_seizure_s.to_string()),
            ("synth.artifact_prob", format!("{:?}", s.artifact_prob)),
            ("synth.max_artifacts", s.max_artifacts.to_string()),
            ("synth.preictal_s", s.preictal_s.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.family", t.arch.family.to_string()),
            ("train.mode", t.arch.mode.to_string()),
            ("train.cell", t.arch.cell.as_str().to_string()),
            ("train.pe", t.arch.pe.to_string()),
            ("train.tau", t.tau.to_string()),
            ("train.k", t.k.to_string()),
            ("train.hidden", t.hidden.to_string()),
            ("train.seq_layers", t.seq_layers.to_string()),
            ("train.gcn_layers", t.gcn_layers.to_string()),
            ("train.pool", t.pool.as_str().to_string()),
            ("train.augment", t.augment.to_string()),
            ("eval.seeds", self.eval_seeds.to_string()),
            ("bench.steps", join(&b.steps)),
            ("bench.families", join(&b.families)),
            ("bench.nodes", b.nodes.to_string()),
            ("bench.features", b.features.to_string()),
            ("bench.hidden", b.hidden.to_string()),
            ("bench.tau", b.tau.to_string()),
            ("bench.repeats", b.repeats.to_string()),
            ("bench.warmups", b.warmups.to_string()),
            ("bench.seed", b.seed.to_string()),
            ("expressivity.seeds", self.expressivity_seeds.to_string()),
            ("expressivity.hidden", self.expressivity_hidden.to_string()),
            ("export.top_k", self.export_top_k.to_string()),
        ];
        out.sort_by_key(|(k, _)| *k);
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies a config file body: one `key=value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected key=value, got {raw:?}", no + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Usage(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, pair: &str) -> CliResult<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.bench.validate()?;
        if self.train_count < 2 || self.val_count == 0 || self.test_count == 0 {
            return Err(CliError::Usage("need at least 2 training and 1 validation and test recording".into()));
        }
        if self.eval_seeds == 0 || self.expressivity_seeds == 0 || self.expressivity_hidden == 0 {
            return Err(CliError::Usage("seed counts and hidden size must be positive".into()));
        }
        if self.train.tau == 0 || self.train.tau >= self.synth.channels {
            return Err(CliError::Usage(format!("train.tau must lie in 1..{}", self.synth.channels)));
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Parser, Debug)]
#[command(name = "evobrain", version, about = "Temporal graph seizure detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test EVB1 datasets.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint and history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.evb1 and val.evb1.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// History CSV; defaults to the checkpoint path with `.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or train and evaluate over several seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time forward and training steps against sequence length.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the expressivity verdict suite.
    Expressivity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Export the strongest learned edges of every snapshot as JSON.
    ExportGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// EVB1 file holding the sample.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for pair in &common.set {
        cfg.apply_override(pair)?;
    }
    cfg.validate()?;
    log::info!("resolved configuration:\n{}", cfg.to_text().trim_end());
    Ok(cfg)
}

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.evb1", split.name()))
}

fn read_split(dir: &Path, split: Split) -> CliResult<Dataset> {
    let path = split_path(dir, split);
    Dataset::read_evb1(&path).map_err(|e| match e {
        Error::Io(io) => CliError::Data(Error::Format(format!("cannot read {}: {io}", path.display()))),
        other => CliError::Data(other),
    })
}

fn emit(text: &str, out: Option<&Path>) -> CliResult<String> {
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(text.to_string())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (split, count) in [(Split::Train, cfg.train_count), (Split::Val, cfg.val_count), (Split::Test, cfg.test_count)] {
        let ds = synth_split(&cfg.synth, cfg.seed, split, count)?;
        let path = split_path(out, split);
        ds.write_evb1(&path)?;
        log::info!("wrote {} ({} epochs, positive fraction {:.3})", path.display(), ds.len(), ds.positive_fraction());
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, history: Option<&Path>) -> CliResult<Checkpoint> {
    let train_set = read_split(data, Split::Train)?;
    let val_set = read_split(data, Split::Val)?;
    let outcome = train(&cfg.train, &train_set, &val_set)?;
    let ckpt = Checkpoint::new(&outcome.model, Some(outcome.norm.clone()))
        .with_meta("best_epoch", outcome.best_epoch)
        .with_meta("best_val_auroc", format!("{:?}", outcome.best_val_auroc))
        .with_meta("threshold", format!("{:?}", outcome.threshold))
        .with_meta("tau", cfg.train.tau);
    ckpt.save(out)?;
    let history_path = history.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    std::fs::write(&history_path, outcome.history.to_csv())?;
    log::info!(
        "best epoch {} (val auroc {:.4}); wrote {} and {}",
        outcome.best_epoch,
        outcome.best_val_auroc,
        out.display(),
        history_path.display()
    );
    Ok(ckpt)
}

fn meta<T: FromStr>(ckpt: &Checkpoint, key: &str) -> CliResult<T> {
    ckpt.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Data(Error::Format(format!("checkpoint lacks a valid {key:?} entry"))))
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split {other:?} (train, val, test)"))),
    }
}

pub fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: Option<&Path>,
    seeds: Option<usize>,
    split: &str,
) -> CliResult<EvalReport> {
    let split = parse_split(split)?;
    let target = read_split(data, split)?;
    let report = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let norm = ckpt
                .norm
                .clone()
                .ok_or_else(|| CliError::Data(Error::Format("checkpoint has no normalization statistics".into())))?;
            let threshold: f64 = meta(&ckpt, "threshold")?;
            let tau: usize = meta(&ckpt, "tau")?;
            let expected = cfg.train.model_config(target.channels, target.bins);
            let model = ckpt.into_model(Some(&expected))?;
            let result = evaluate(&model, &norm, tau, threshold, &target, cfg.train.seed)?;
            EvalReport::new(model.cfg.arch.to_string(), vec![result])?
        }
        None => {
            let n = seeds.unwrap_or(cfg.eval_seeds);
            if n == 0 {
                return Err(CliError::Usage("--seeds must be positive".into()));
            }
            let seed_list: Vec<u64> = (0..n as u64).map(|s| cfg.train.seed + s).collect();
            let train_set = read_split(data, Split::Train)?;
            let val_set = read_split(data, Split::Val)?;
            run_seeds(&cfg.train, &seed_list, &train_set, &val_set, &target)?
        }
    };
    log::info!(
        "{}: auroc {:.4} ± {:.4}, f1 {:.4} ± {:.4} over {} seed(s)",
        report.arch,
        report.auroc_mean,
        report.auroc_std,
        report.f1_mean,
        report.f1_std,
        report.per_seed.len()
    );
    Ok(report)
}

pub fn cmd_bench(cfg: &RunConfig) -> CliResult<String> {
    Ok(to_csv(&run_bench(&cfg.bench)?))
}

/// Verdict table and whether every cell matched its expectation.
pub fn cmd_expressivity(cfg: &RunConfig) -> CliResult<(String, bool)> {
    let seeds: Vec<u64> = (1..=cfg.expressivity_seeds as u64).collect();
    let report = run_hierarchy_suite(&seeds, cfg.expressivity_hidden)?;
    Ok((report.table(), report.violations().is_empty()))
}

pub fn cmd_export_graph(checkpoint: &Path, data: &Path, index: usize, top_k: usize) -> CliResult<String> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let norm = ckpt
        .norm
        .clone()
        .ok_or_else(|| CliError::Data(Error::Format("checkpoint has no normalization statistics".into())))?;
    let tau: usize = meta(&ckpt, "tau")?;
    let model: Model = ckpt.into_model(None)?;
    if model.cfg.arch.family != Family::TimeThenGraph {
        return Err(CliError::Data(Error::Config(format!(
            "edge strengths exist only for time-then-graph checkpoints, found {}",
            model.cfg.arch
        ))));
    }
    let ds = Dataset::read_evb1(data)?;
    let epoch = ds.epochs.get(index).ok_or_else(|| {
        CliError::Data(Error::Bounds(format!("sample index {index} outside 0..{}", ds.len())))
    })?;
    let graph = build_dynamic(&apply_norm(epoch, &norm)?.x, tau)?;
    let strengths = model.snapshot_strengths(&graph)?;
    let mut json = export_json(&strengths, graph.nodes(), top_k)?;
    json.push('\n');
    Ok(json)
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = resolve(&common)?;
            for p in cmd_synth(&cfg, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Train { common, data, out, history } => {
            let cfg = resolve(&common)?;
            cmd_train(&cfg, &data, &out, history.as_deref())?;
        }
        Command::Eval { common, data, checkpoint, seeds, split, out } => {
            let cfg = resolve(&common)?;
            let report = cmd_eval(&cfg, &data, checkpoint.as_deref(), seeds, &split)?;
            print!("{}", emit(&format!("{}\n", report.to_json()?), out.as_deref())?);
        }
        Command::Bench { common, out } => {
            let cfg = resolve(&common)?;
            print!("{}", emit(&cmd_bench(&cfg)?, out.as_deref())?);
        }
        Command::Expressivity { common, seeds, hidden } => {
            let mut cfg = resolve(&common)?;
            cfg.expressivity_seeds = seeds.unwrap_or(cfg.expressivity_seeds);
            cfg.expressivity_hidden = hidden.unwrap_or(cfg.expressivity_hidden);
            cfg.validate()?;
            let (table, ok) = cmd_expressivity(&cfg)?;
            print!("{table}");
            if !ok {
                return Err(CliError::Violation("verdict matrix differs from the expected hierarchy".into()));
            }
        }
        Command::ExportGraph { common, checkpoint, data, index, top, out } => {
            let cfg = resolve(&common)?;
            let json = cmd_export_graph(&checkpoint, &data, index, top.unwrap_or(cfg.export_top_k))?;
            print!("{}", emit(&json, out.as_deref())?);
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
