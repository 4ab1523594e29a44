//! Subcommands of the `contrast-lab` binary.
//!
//! Each `run_*` function reads an optional JSON config (missing fields take
//! their defaults), writes the resolved config back next to its outputs and
//! returns the process exit code: 0 on success, 1 when a check fails or a
//! run aborts, 2 for usage and configuration errors.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use contrast_lab::analysis::{entropy_csv, fmt17, log_grid, pow2_grid, proposition_report, sweep_csv, sweep_k, sweep_tau, PropositionConfig, PropositionReport, SweepResult};
use contrast_lab::datagen::{cifar_load, read_cache, synthetic_dataset, AugmentConfig, LabeledDataset};
use contrast_lab::trainer::{train_run, write_snapshot, RunRecord, TrainConfig};
use contrast_lab::types::{LogitsRow, LossSpec, TemperatureConfig};
use contrast_lab::verify::{run_all, VerifyConfig};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Failure = 1,
    Usage = 2,
}

impl Exit {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Verify,
    Analyze,
    Train,
    Compare,
}

/// Options shared by every subcommand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub force: bool,
    /// Worker cap for concurrent work; `Some(0)` runs sequentially.
    pub threads: Option<usize>,
}

impl Invocation {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            config: None,
            out: out.into(),
            seed: None,
            force: false,
            threads: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Errors are split by who has to fix them.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit(&self) -> Exit {
        match self {
            Self::Usage(_) => Exit::Usage,
            Self::Runtime(_) => Exit::Failure,
        }
    }
}

impl From<contrast_lab::Error> for CliError {
    fn from(e: contrast_lab::Error) -> Self {
        use contrast_lab::Error as E;
        match e {
            E::InvalidConfig(_)
            | E::FileNotFound(_)
            | E::Json(_)
            | E::MalformedRecord { .. }
            | E::LabelOutOfRange { .. }
            | E::IndexOutOfRange { .. }
            | E::NonPositiveTau(_)
            | E::SimilarityOutOfRange(_)
            | E::EmptyNegatives
            | E::EmptyGrid
            | E::InvalidGrid => Self::Usage(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs `command` and reports any error on stderr.
pub fn run(command: Command, inv: &Invocation) -> Exit {
    let result = match command {
        Command::Verify => run_verify(inv),
        Command::Analyze => run_analyze(inv),
        Command::Train => run_train(inv),
        Command::Compare => run_compare(inv),
    };
    match result {
        Ok(exit) => exit,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit()
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CliError::Usage(format!("config file {} not found", path.display())),
        _ => CliError::Usage(format!("cannot read config {}: {e}", path.display())),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

/// Creates the output directory and refuses to replace existing outputs
/// unless `--force` was given.
fn prepare_out(inv: &Invocation, outputs: &[&str]) -> CliResult<()> {
    fs::create_dir_all(&inv.out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", inv.out.display())))?;
    if !inv.force {
        if let Some(existing) = outputs.iter().map(|f| inv.out.join(f)).find(|p| p.exists()) {
            return Err(CliError::Usage(format!(
                "{} exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_manifest(command: Command, inv: &Invocation) -> CliResult<()> {
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &inv.out.join("manifest.json"),
        &RunManifest {
            command,
            config: inv.config.clone(),
            out: inv.out.clone(),
            seed: inv.seed,
            timestamp,
        },
    )
}

pub fn run_verify(inv: &Invocation) -> CliResult<Exit> {
    let mut cfg: VerifyConfig = load_config(inv.config.as_deref())?;
    if let Some(seed) = inv.seed {
        cfg.seed = seed;
        cfg.propositions.seed = seed;
    }
    cfg.validate()?;
    prepare_out(inv, &["config.json", "report.json", "manifest.json"])?;
    write_json(&inv.out.join("config.json"), &cfg)?;
    let report = run_all(&cfg)?;
    write_json(&inv.out.join("report.json"), &report)?;
    write_manifest(Command::Verify, inv)?;
    for suite in &report.suites {
        for a in &suite.assertions {
            let status = if a.passed() { "PASS" } else { "FAIL" };
            println!("{status} {}/{} (worst {:e})", suite.suite, a.assertion, a.worst_gap);
        }
    }
    Ok(if report.all_passed { Exit::Success } else { Exit::Failure })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Row swept over temperature.
    pub pos: f64,
    pub negs: Vec<f64>,
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau_points: usize,
    /// Pair swept over the negative count `2^0 .. 2^k_max_pow2`.
    pub k_pos: f64,
    pub k_neg: f64,
    pub k_tau: f64,
    pub k_max_pow2: u32,
    /// Negatives whose hardness-weight entropy is swept over temperature.
    pub entropy_negs: Vec<f64>,
    pub propositions: PropositionConfig,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            pos: 1.0,
            negs: vec![-1.0; 4],
            tau_min: 0.01,
            tau_max: 1e4,
            tau_points: 61,
            k_pos: 0.9,
            k_neg: 0.0,
            k_tau: 0.1,
            k_max_pow2: 20,
            entropy_negs: vec![0.6, 0.3, 0.0, -0.3, -0.6],
            propositions: PropositionConfig::default(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct AnalyzeReport {
    pub config: AnalyzeConfig,
    pub tau_sweep: SweepResult,
    pub k_sweep: SweepResult,
    pub propositions: PropositionReport,
}

pub fn run_analyze(inv: &Invocation) -> CliResult<Exit> {
    let mut cfg: AnalyzeConfig = load_config(inv.config.as_deref())?;
    if let Some(seed) = inv.seed {
        cfg.propositions.seed = seed;
    }
    let row = LogitsRow::new(cfg.pos, cfg.negs.clone())?;
    let entropy_row = LogitsRow::new(0.0, cfg.entropy_negs.clone())?;
    LogitsRow::new(cfg.k_pos, vec![cfg.k_neg])?;
    let grid = log_grid(cfg.tau_min, cfg.tau_max, cfg.tau_points)?;
    let outputs = ["config.json", "sweep_tau.csv", "sweep_K.csv", "entropy.csv", "report.json", "manifest.json"];
    prepare_out(inv, &outputs)?;
    write_json(&inv.out.join("config.json"), &cfg)?;

    let tau_sweep = sweep_tau(&row, &grid)?;
    let k_sweep = sweep_k(cfg.k_pos, cfg.k_neg, cfg.k_tau, &pow2_grid(cfg.k_max_pow2))?;
    fs::write(inv.out.join("sweep_tau.csv"), sweep_csv(&tau_sweep))?;
    fs::write(inv.out.join("sweep_K.csv"), sweep_csv(&k_sweep))?;
    fs::write(inv.out.join("entropy.csv"), entropy_csv(&entropy_row, &grid)?)?;
    let propositions = proposition_report(&cfg.propositions)?;
    println!(
        "tau sweep: {:?}, max gap to bound {:e}; K sweep: {:?}",
        tau_sweep.pattern, tau_sweep.max_abs_gap_to_bound, k_sweep.pattern
    );
    write_json(
        &inv.out.join("report.json"),
        &AnalyzeReport {
            config: cfg,
            tau_sweep,
            k_sweep,
            propositions,
        },
    )?;
    write_manifest(Command::Analyze, inv)?;
    Ok(Exit::Success)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 200,
            dim: 32,
            spread_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    /// CIFAR-10 binary batch file, optionally restricted to `indices`.
    Cifar {
        path: PathBuf,
        #[serde(default)]
        indices: Option<Vec<usize>>,
    },
    /// Dataset cache written by `datagen::write_cache`.
    Cache { path: PathBuf },
}

impl Default for DataSpec {
    fn default() -> Self {
        Self::Synthetic(SyntheticSpec::default())
    }
}

impl DataSpec {
    pub fn load(&self) -> contrast_lab::Result<LabeledDataset> {
        match self {
            Self::Synthetic(s) => synthetic_dataset(s.classes, s.per_class, s.dim, s.spread_sigma, s.seed),
            Self::Cifar { path, indices } => cifar_load(path, indices.as_deref()),
            Self::Cache { path } => read_cache(path),
        }
    }

    fn reseed(&mut self, seed: u64) {
        if let Self::Synthetic(s) = self {
            s.seed = seed;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data: DataSpec,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    /// Also write the final parameters to `params.bin`.
    pub snapshot: bool,
}

impl TrainRunConfig {
    /// Uses `seed` for data generation, augmentation and training.
    pub fn reseed(&mut self, seed: u64) {
        self.data.reseed(seed);
        self.augment.seed = seed;
        self.train.seed = seed;
    }
}

pub fn run_train(inv: &Invocation) -> CliResult<Exit> {
    let mut cfg: TrainRunConfig = load_config(inv.config.as_deref())?;
    if let Some(seed) = inv.seed {
        cfg.reseed(seed);
    }
    cfg.train.validate()?;
    cfg.augment.validate()?;
    let data = cfg.data.load()?;
    prepare_out(inv, &["config.json", "record.json", "params.bin", "manifest.json"])?;
    write_json(&inv.out.join("config.json"), &cfg)?;
    let record = train_run(&data, &cfg.augment, &cfg.train)?;
    write_json(&inv.out.join("record.json"), &record)?;
    if cfg.snapshot {
        write_snapshot(&record.final_params, &inv.out.join("params.bin"))?;
    }
    write_manifest(Command::Train, inv)?;
    match record.knn_accuracy.last() {
        Some(knn) => println!("trained {} epochs, final kNN accuracy {knn:.4}", record.epochs()),
        None => println!("no epochs run"),
    }
    Ok(Exit::Success)
}

/// A loss spec with the label used in comparison tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedLoss {
    pub name: String,
    pub loss: LossSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub data: DataSpec,
    pub augment: AugmentConfig,
    /// Settings shared by every cell; loss, batch size and seeds come from
    /// the lists below.
    pub train: TrainConfig,
    pub variants: Vec<NamedLoss>,
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let tau = 0.1;
        let fixed = |spec: contrast_lab::Result<LossSpec>| spec.expect("positive tau");
        Self {
            data: DataSpec::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            variants: vec![
                NamedLoss {
                    name: "infonce".into(),
                    loss: fixed(LossSpec::infonce(tau)),
                },
                NamedLoss {
                    name: "ntxent".into(),
                    loss: fixed(LossSpec::ntxent(tau)),
                },
                NamedLoss {
                    name: "dcl".into(),
                    loss: fixed(LossSpec::dcl(tau)),
                },
                NamedLoss {
                    name: "macl".into(),
                    loss: LossSpec::macl(TemperatureConfig::default(), true, true),
                },
            ],
            batch_sizes: vec![16],
            seeds: (0..5).collect(),
        }
    }
}

/// Final metrics of one `(variant, batch size, seed)` run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub variant: String,
    pub batch_size: usize,
    pub seed: u64,
    pub knn: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub final_tau: f64,
}

impl CompareConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.variants.is_empty() || self.batch_sizes.is_empty() || self.seeds.is_empty() {
            return Err(CliError::Usage("variants, batch_sizes and seeds must be non-empty".into()));
        }
        if self.train.epochs == 0 {
            return Err(CliError::Usage("comparison needs epochs >= 1".into()));
        }
        for (_, cell) in self.cells() {
            cell.train.validate()?;
        }
        self.augment.validate()?;
        Ok(())
    }

    /// Every cell in config order: variants, then batch sizes, then seeds.
    pub fn cells(&self) -> Vec<(String, TrainRunConfig)> {
        let mut out = Vec::new();
        for v in &self.variants {
            for &batch_size in &self.batch_sizes {
                for &seed in &self.seeds {
                    let mut cell = TrainRunConfig {
                        data: self.data.clone(),
                        augment: self.augment,
                        train: TrainConfig {
                            loss: v.loss,
                            batch_size,
                            ..self.train.clone()
                        },
                        snapshot: false,
                    };
                    cell.reseed(seed);
                    out.push((v.name.clone(), cell));
                }
            }
        }
        out
    }
}

fn run_cell(name: &str, cell: &TrainRunConfig) -> CliResult<CompareRow> {
    let data = cell.data.load()?;
    let record: RunRecord = train_run(&data, &cell.augment, &cell.train)?;
    let last = |s: &[f64]| *s.last().expect("epochs >= 1");
    Ok(CompareRow {
        variant: name.to_string(),
        batch_size: cell.train.batch_size,
        seed: cell.train.seed,
        knn: last(&record.knn_accuracy),
        alignment: last(&record.alignment_loss),
        uniformity: last(&record.uniformity),
        final_tau: last(&record.tau_used),
    })
}

/// Runs every cell, concurrently unless `threads` is `Some(0)`. Rows come
/// back in config order.
pub fn compare_rows(cfg: &CompareConfig, threads: Option<usize>) -> CliResult<Vec<CompareRow>> {
    let cells = cfg.cells();
    let run_all = || -> CliResult<Vec<CompareRow>> {
        cells.par_iter().map(|(name, cell)| run_cell(name, cell)).collect()
    };
    match threads {
        Some(0) => cells.iter().map(|(name, cell)| run_cell(name, cell)).collect(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(run_all),
        None => run_all(),
    }
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("variant,batch_size,seed,knn,alignment,uniformity,final_tau\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.batch_size,
            r.seed,
            fmt17(r.knn),
            fmt17(r.alignment),
            fmt17(r.uniformity),
            fmt17(r.final_tau)
        )
        .expect("writing to a String");
    }
    out
}

/// Per `(variant, batch size)` means over seeds, in first-seen order.
pub fn summary_csv(rows: &[CompareRow]) -> String {
    let mut cells: Vec<(&str, usize, Vec<&CompareRow>)> = Vec::new();
    for r in rows {
        match cells.iter_mut().find(|(v, n, _)| *v == r.variant && *n == r.batch_size) {
            Some((_, _, members)) => members.push(r),
            None => cells.push((&r.variant, r.batch_size, vec![r])),
        }
    }
    let mut out = String::from("variant,batch_size,seeds,knn_mean,alignment_mean,uniformity_mean,final_tau_mean\n");
    for (variant, batch_size, members) in cells {
        let mean = |f: fn(&CompareRow) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / members.len() as f64;
        writeln!(
            out,
            "{variant},{batch_size},{},{},{},{},{}",
            members.len(),
            fmt17(mean(|r| r.knn)),
            fmt17(mean(|r| r.alignment)),
            fmt17(mean(|r| r.uniformity)),
            fmt17(mean(|r| r.final_tau))
        )
        .expect("writing to a String");
    }
    out
}

pub fn run_compare(inv: &Invocation) -> CliResult<Exit> {
    let mut cfg: CompareConfig = load_config(inv.config.as_deref())?;
    if let Some(seed) = inv.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    prepare_out(inv, &["config.json", "compare.csv", "summary.csv", "manifest.json"])?;
    write_json(&inv.out.join("config.json"), &cfg)?;
    let rows = compare_rows(&cfg, inv.threads)?;
    fs::write(inv.out.join("compare.csv"), compare_csv(&rows))?;
    let summary = summary_csv(&rows);
    fs::write(inv.out.join("summary.csv"), &summary)?;
    write_manifest(Command::Compare, inv)?;
    print!("{summary}");
    Ok(Exit::Success)
}
