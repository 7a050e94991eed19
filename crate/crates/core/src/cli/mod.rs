//! The `pedformer` command line: data generation, training, evaluation,
//! fine-tuning, horizon sweeps and the gradient check.
//!
//! Every command reads an optional TOML [`RunConfig`], applies its flags on
//! top, echoes the resolved config to stderr and maps errors to exit codes
//! (see [`exit_code`]).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    build_splits, generate_synthetic, label_counts, nearest_centroid_accuracy, read_dataset,
    read_tracks, tte_sweep_slices, write_dataset, write_tracks, Domain, NormalizedWindow,
    ObservationWindow, ScenarioConfig, SliceConfig, SplitConfig, TteBand,
};
use crate::error::{Error, Result};
use crate::metrics::horizon_report;
use crate::model::{Architecture, ModelConfig, Transformer};
use crate::training::{
    evaluate, fine_tune_with, gradcheck_config, load_checkpoint, model_grad_check, train_with,
    Checkpoint, EpochRecord, FineTuneOptions, TrainConfig, TrainOutcome,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_GATE: i32 = 5;

pub const DEFAULT_BANDS: &str = "15-30,30-45,45-60,60-75,75-90";

/// Everything a run depends on besides its input files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Overrides `train.seed`, `data.split.seed` and the
    /// scenario seed, and seeds model initialisation.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub domain: Domain,
    pub n_pedestrians: usize,
    /// Directory with `train.jsonl`, `val.jsonl` and `test.jsonl`.
    pub dir: Option<PathBuf>,
    /// Track file for horizon sweeps.
    pub tracks: Option<PathBuf>,
    pub bands: String,
    pub slicing: SliceConfig,
    pub split: SplitConfig,
    /// Scenario fields overriding the domain preset.
    pub scenario: toml::Table,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domain: Domain::A,
            n_pedestrians: 1000,
            dir: None,
            tracks: None,
            bands: DEFAULT_BANDS.to_string(),
            slicing: SliceConfig::default(),
            split: SplitConfig::default(),
            scenario: toml::Table::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Propagates the master seed and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.data.split.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.data.slicing.validate()?;
        self.data.split.validate()?;
        if self.model.obs_len != self.data.slicing.obs_len {
            return Err(Error::Config(format!(
                "model.obs_len {} differs from data.slicing.obs_len {}",
                self.model.obs_len, self.data.slicing.obs_len
            )));
        }
        TteBand::parse_list(&self.data.bands)?;
        Ok(self)
    }

    /// The domain preset with `data.scenario` applied on top.
    pub fn scenario(&self) -> Result<ScenarioConfig> {
        let preset = ScenarioConfig::new(self.data.domain, self.data.n_pedestrians, self.seed);
        let mut table = match toml::Value::try_from(&preset) {
            Ok(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config("scenario preset is not a table".into())),
        };
        for (k, v) in &self.data.scenario {
            if matches!(k.as_str(), "domain" | "seed" | "n_pedestrians") {
                return Err(Error::Config(format!(
                    "data.scenario.{k} is set through data.{k} or seed"
                )));
            }
            table.insert(k.clone(), v.clone());
        }
        let cfg: ScenarioConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("data.scenario: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "pedformer", version, about = "Pedestrian crossing anticipation with Transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic tracks and train/val/test window files.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a JSONL log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a window file.
    Eval(EvalArgs),
    /// Transfer a checkpoint into a fresh head and train on new data.
    Finetune(FinetuneArgs),
    /// Metrics per time-to-event band.
    TteSweep(TteSweepArgs),
    /// Compare model gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub domain: Option<Domain>,
    /// Number of pedestrians.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub arch: Option<Architecture>,
    /// Directory with train.jsonl and val.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Defaults to `<checkpoint>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A window file, or a directory holding test.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub freeze_layers: usize,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TteSweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tracks: Option<PathBuf>,
    #[arg(long)]
    pub bands: Option<String>,
    /// JSONL report; the plot series goes next to it as `.csv`.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub arch: Architecture,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Incompatible { .. } | Error::InvalidArgument { .. } => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::FullyMaskedRow { .. } => EXIT_NUMERIC,
        Error::Data(_)
        | Error::Io { .. }
        | Error::Parse { .. }
        | Error::Checkpoint(_)
        | Error::Metric(_)
        | Error::Shape { .. } => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => eval(&a),
        Command::Finetune(a) => finetune(&a),
        Command::TteSweep(a) => tte_sweep(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn echo(cfg: &RunConfig) {
    eprintln!("# resolved run config\n{}", cfg.to_toml());
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn data_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.data.dir.clone())
        .ok_or_else(|| Error::Config("no data directory (--data or data.dir)".into()))
}

fn normalized(windows: &[ObservationWindow]) -> Vec<NormalizedWindow> {
    windows.iter().map(ObservationWindow::normalized).collect()
}

fn gen_data(a: &GenDataArgs) -> Result<i32> {
    let mut cfg = base_config(&a.common)?;
    if let Some(d) = a.domain {
        cfg.data.domain = d;
    }
    if let Some(n) = a.n {
        cfg.data.n_pedestrians = n;
    }
    cfg.data.dir = Some(a.out.clone());
    let mut cfg = cfg.resolve()?;
    let scenario = cfg.scenario()?;
    if let Ok(toml::Value::Table(t)) = toml::Value::try_from(&scenario) {
        cfg.data.scenario = t
            .into_iter()
            .filter(|(k, _)| !matches!(k.as_str(), "domain" | "seed" | "n_pedestrians"))
            .collect();
    }
    echo(&cfg);

    let tracks = generate_synthetic(&scenario)?;
    let splits = build_splits(&tracks, &cfg.data.slicing, &cfg.data.split)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_tracks(a.out.join("tracks.jsonl"), &tracks)?;
    write_dataset(a.out.join("train.jsonl"), &splits.train)?;
    write_dataset(a.out.join("val.jsonl"), &splits.val)?;
    write_dataset(a.out.join("test.jsonl"), &splits.test)?;
    write_file(&a.out.join("run.toml"), &cfg.to_toml())?;

    let separability = nearest_centroid_accuracy(&tracks, &cfg.data.slicing)?;
    println!(
        "domain {} seed {}: {} tracks ({} crossing), nearest-centroid accuracy {:.4}",
        scenario.domain,
        scenario.seed,
        tracks.len(),
        scenario.crossing_count(),
        separability
    );
    for (name, w) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let (c, n) = label_counts(w);
        println!("{name:<6} {:>6} windows  crossing {c:>6}  not {n:>6}", w.len());
    }
    Ok(EXIT_OK)
}

fn log_observer(log: &mut String) -> impl FnMut(&EpochRecord) + '_ {
    move |r: &EpochRecord| {
        let auc = r.auc.map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "epoch {:>3} {:<5} loss {:.4} acc {:.4} f1 {:.4} auc {auc}",
            r.epoch, r.split, r.loss, r.acc, r.f1
        );
        let _ = writeln!(log, "{}", serde_json::to_string(r).expect("log record"));
    }
}

fn finish_training(
    model: Transformer,
    outcome: TrainOutcome,
    cfg: &RunConfig,
    out: &Path,
    log_path: Option<&PathBuf>,
    log: String,
) -> Result<()> {
    let steps = outcome.steps;
    Checkpoint::new(model, Some(outcome.optimizer), cfg.seed).save(out)?;
    let log_path = log_path.cloned().unwrap_or_else(|| sibling(out, ".log.jsonl"));
    write_file(&log_path, &log)?;
    write_file(&sibling(out, ".run.toml"), &cfg.to_toml())?;
    println!(
        "best epoch {} val f1 {} after {} steps{}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_f1.map_or("-".to_string(), |f| format!("{f:.4}")),
        steps,
        if outcome.stopped_early { " (early stop)" } else { "" },
        out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let mut cfg = base_config(&a.common)?;
    if let Some(arch) = a.arch {
        cfg.model.architecture = arch;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.data.dir = Some(data_dir(&a.data, &cfg)?);
    let cfg = cfg.resolve()?;
    echo(&cfg);
    let dir = cfg.data.dir.clone().unwrap_or_default();
    let train = normalized(&read_dataset(dir.join("train.jsonl"))?);
    let val = normalized(&read_dataset(dir.join("val.jsonl"))?);
    if train.is_empty() {
        return Err(Error::Data(format!("{}: no training windows", dir.display())));
    }
    let mut model = Transformer::new(cfg.model.clone(), cfg.seed)?;
    let mut log = String::new();
    let outcome = train_with(&mut model, &train, &val, &cfg.train, None, &mut log_observer(&mut log))?;
    finish_training(model, outcome, &cfg, &a.out_checkpoint, a.log.as_ref(), log)?;
    Ok(EXIT_OK)
}

fn eval(a: &EvalArgs) -> Result<i32> {
    let mut cfg = base_config(&a.common)?;
    if let Some(t) = a.threshold {
        cfg.train.threshold = t;
    }
    let path = match a.data.clone().or_else(|| cfg.data.dir.clone()) {
        Some(p) if p.is_dir() => p.join("test.jsonl"),
        Some(p) => p,
        None => return Err(Error::Config("no data (--data or data.dir)".into())),
    };
    let ckpt = load_checkpoint(&a.checkpoint)?;
    cfg.model = ckpt.model.config().clone();
    let cfg = cfg.resolve()?;
    echo(&cfg);
    let windows = normalized(&read_dataset(&path)?);
    let result = evaluate(&ckpt.model, &windows, &cfg.train)?;
    let mut record = serde_json::to_value(&result.report).expect("report");
    record["loss"] = serde_json::json!(result.loss);
    record["data"] = serde_json::json!(path.display().to_string());
    record["checkpoint"] = serde_json::json!(a.checkpoint.display().to_string());
    write_file(&a.report, &format!("{record}\n"))?;
    println!("{}", result.report.summary());
    Ok(EXIT_OK)
}

fn finetune(a: &FinetuneArgs) -> Result<i32> {
    let mut cfg = base_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.data.dir = Some(data_dir(&a.data, &cfg)?);
    let source = load_checkpoint(&a.checkpoint)?;
    cfg.model = source.model.config().clone();
    let cfg = cfg.resolve()?;
    echo(&cfg);
    let dir = cfg.data.dir.clone().unwrap_or_default();
    let train = normalized(&read_dataset(dir.join("train.jsonl"))?);
    let val = normalized(&read_dataset(dir.join("val.jsonl"))?);
    let options = FineTuneOptions {
        freeze_layers: a.freeze_layers,
        config: None,
        head_seed: cfg.seed,
    };
    let mut log = String::new();
    let (model, outcome) = fine_tune_with(
        &source.model,
        &train,
        &val,
        &options,
        &cfg.train,
        &mut log_observer(&mut log),
    )?;
    finish_training(model, outcome, &cfg, &a.out_checkpoint, a.log.as_ref(), log)?;
    Ok(EXIT_OK)
}

fn tte_sweep(a: &TteSweepArgs) -> Result<i32> {
    let mut cfg = base_config(&a.common)?;
    if let Some(b) = &a.bands {
        cfg.data.bands = b.clone();
    }
    if let Some(t) = &a.tracks {
        cfg.data.tracks = Some(t.clone());
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    cfg.model = ckpt.model.config().clone();
    cfg.data.slicing.obs_len = cfg.model.obs_len;
    let cfg = cfg.resolve()?;
    echo(&cfg);
    let tracks_path = cfg
        .data
        .tracks
        .clone()
        .ok_or_else(|| Error::Config("no track file (--tracks or data.tracks)".into()))?;
    let tracks = read_tracks(&tracks_path)?;
    let bands = TteBand::parse_list(&cfg.data.bands)?;
    let mut rows = Vec::new();
    for (band, windows) in tte_sweep_slices(&tracks, cfg.model.obs_len, &bands, false) {
        if windows.is_empty() {
            return Err(Error::Data(format!("band {band} has no windows")));
        }
        let result = evaluate(&ckpt.model, &normalized(&windows), &cfg.train)?;
        rows.push((band, result.report));
    }
    let report = horizon_report(rows);
    write_file(&a.report, &report.to_jsonl())?;
    let mut series = String::from("tte_mid,accuracy,f1,auc\n");
    for (mid, acc, f1, auc) in report.series() {
        let auc = auc.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(series, "{mid},{acc:.6},{f1:.6},{auc}");
    }
    write_file(&a.report.with_extension("csv"), &series)?;
    print!("{}", report.table());
    Ok(EXIT_OK)
}

fn gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let model = gradcheck_config(a.arch);
    let cfg = RunConfig {
        seed: a.seed,
        model: model.clone(),
        ..RunConfig::default()
    }
    .resolve()?;
    echo(&cfg);
    let report = model_grad_check(&model, a.seed, a.eps, a.samples)?;
    for g in &report.groups {
        println!("{:<8} {:>5} coords  max rel error {:.3e}", g.group, g.checked, g.max_rel_error);
    }
    let pass = report.max_rel_error <= a.threshold;
    println!(
        "{} max rel error {:.3e} (threshold {:.1e}): {}",
        a.arch,
        report.max_rel_error,
        a.threshold,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { EXIT_OK } else { EXIT_GATE })
}
