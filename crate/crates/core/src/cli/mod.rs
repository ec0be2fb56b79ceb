//! The `cdlm` command line: run configs, the train / sample / eval / verify
//! pipelines and artifact persistence.
//!
//! Exit codes: 0 success, 1 failed verification, 2 bad input (schema, missing
//! file, mismatched checkpoint or vocabulary, empty samples), 3 numeric abort.
//! Every output file is written to a temporary sibling and renamed into place,
//! and a command writes nothing unless all of its outputs were computed.

pub mod verify;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chain::{CorruptionKernel, KernelVariant, NoiseSchedule};
use crate::data_eval::{eval_distribution, DatasetFile, DatasetSpec, EvalRow, EVAL_HEADER};
use crate::denoiser::{Architecture, Checkpoint, DenoiserParams};
use crate::error::CdlmError;
use crate::objective::{Divergence, MaxStepMixer, StepSizeScheduler};
use crate::sampler::{generate_batch, read_jsonl, SampleBatch, SampleMode};
use crate::trainer::{metrics_csv, train_loop, Optimizer, Seeds, TrainState, TrainingConfig};

pub const OUTPUT_DIR_ENV: &str = "CDLM_OUTPUT_DIR";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DATASET_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_FILE: &str = "eval.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CdlmError> for CliError {
    fn from(e: CdlmError) -> Self {
        let code = match e {
            CdlmError::Numeric(_) | CdlmError::InfiniteDivergence => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub variant: KernelVariant,
    #[serde(default)]
    pub schedule: NoiseSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    #[serde(default)]
    pub divergence: Divergence,
    #[serde(default)]
    pub scheduler: StepSizeScheduler,
    #[serde(default)]
    pub mixer: MaxStepMixer,
    #[serde(default)]
    pub exact_mixture: bool,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            divergence: Divergence::default(),
            scheduler: StepSizeScheduler::default(),
            mixer: MaxStepMixer::default(),
            exact_mixture: false,
        }
    }
}

/// Optimizer and learning rate fall back to the per-architecture defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub total_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Optimizer>,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_update_every: Option<u64>,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

fn default_batch() -> usize {
    256
}
fn default_steps() -> u64 {
    1000
}
fn default_ema() -> f64 {
    0.999
}
fn default_t_min() -> f64 {
    1e-3
}
fn default_log_every() -> u64 {
    100
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            total_steps: default_steps(),
            learning_rate: None,
            optimizer: None,
            ema_decay: default_ema(),
            hard_update_every: None,
            t_min: default_t_min(),
            log_every: default_log_every(),
        }
    }
}

/// Optional post-training sweep: one sample file per step budget, all
/// scored into `eval.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default)]
    pub steps: Vec<usize>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: SampleMode,
}

fn default_n() -> usize {
    10_000
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            steps: Vec::new(),
            n: default_n(),
            seed: 0,
            mode: SampleMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kernel: KernelSection,
    pub denoiser: Architecture,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    pub data: DatasetSpec,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seeds: Seeds,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::input(format!("config error at `{path}`: {}", e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Vocabulary size and sequence length follow from the dataset recipe.
    pub fn data_shape(&self) -> (usize, usize) {
        match &self.data {
            DatasetSpec::Moons(m) => (m.bins, 2),
            DatasetSpec::Markov(m) => (m.vocab, m.seq_len),
        }
    }

    pub fn corruption_kernel(&self) -> crate::Result<CorruptionKernel> {
        let (clean, _) = self.data_shape();
        let k = match self.kernel.variant {
            KernelVariant::Masked => CorruptionKernel::masked(clean)?,
            KernelVariant::Uniform => CorruptionKernel::uniform(clean)?,
        };
        Ok(k.with_schedule(self.kernel.schedule))
    }

    pub fn training_config(&self) -> crate::Result<TrainingConfig> {
        let (_, seq_len) = self.data_shape();
        let mut cfg = TrainingConfig::new(self.corruption_kernel()?, self.denoiser, seq_len);
        let t = &self.trainer;
        cfg.divergence = self.objective.divergence;
        cfg.scheduler = self.objective.scheduler.clone();
        cfg.mixer = self.objective.mixer.clone();
        cfg.exact_mixture = self.objective.exact_mixture;
        cfg.batch_size = t.batch_size;
        cfg.total_steps = t.total_steps;
        if let Some(lr) = t.learning_rate {
            cfg.learning_rate = lr;
        }
        if let Some(opt) = t.optimizer {
            cfg.optimizer = opt;
        }
        cfg.ema_decay = t.ema_decay;
        cfg.hard_update_every = t.hard_update_every;
        cfg.t_min = t.t_min;
        cfg.log_every = t.log_every;
        cfg.seeds = self.seeds;
        cfg.validate()?;
        if self.sampler.steps.contains(&0) {
            return Err(CdlmError::Config("sampler steps must be at least 1".into()));
        }
        Ok(cfg)
    }

    /// `CDLM_OUTPUT_DIR` wins over the config's `output_dir`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a file's content the way git hashes a blob object
/// (`"blob <len>\0" + content`), with SHA-256.
pub fn blob_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    pub artifacts: BTreeMap<String, ManifestEntry>,
    /// Digest over the sorted `(name, digest)` list, like a git tree.
    pub content_digest: String,
}

impl Manifest {
    pub fn new(config: &RunConfig, artifacts: &[(String, Vec<u8>)]) -> crate::Result<Self> {
        let canonical = serde_json::to_vec(config)?;
        let entries: BTreeMap<String, ManifestEntry> = artifacts
            .iter()
            .map(|(name, bytes)| {
                (
                    name.clone(),
                    ManifestEntry {
                        bytes: bytes.len(),
                        sha256: blob_digest(bytes),
                    },
                )
            })
            .collect();
        let mut tree = String::new();
        for (name, e) in &entries {
            tree.push_str(&format!("{} {name}\n", e.sha256));
        }
        Ok(Self {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: sha256_hex(&canonical),
            seeds: config.seeds,
            artifacts: entries,
            content_digest: sha256_hex(tree.as_bytes()),
        })
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).map_err(|e| CdlmError::Io(e.error))?;
    Ok(())
}

fn write_all_atomic(dir: &Path, files: &[(String, Vec<u8>)]) -> crate::Result<()> {
    for (name, bytes) in files {
        write_atomic(&dir.join(name), bytes)?;
    }
    Ok(())
}

fn samples_file_name(k: usize) -> String {
    format!("samples_K{k}.jsonl")
}

fn sample_jsonl(params: &DenoiserParams<f64>, k: usize, n: usize, seed: u64, mode: SampleMode) -> crate::Result<String> {
    if n == 0 {
        return Ok(String::new());
    }
    let batch: SampleBatch =
        generate_batch::<f64, _>(params, params.kernel(), k, n, params.seq_len(), seed, mode)?;
    batch.to_jsonl()
}

/// Trains, writes checkpoint, metrics, dataset and manifest, and runs the
/// optional sampling sweep. Returns the output directory.
pub fn cmd_train(config_path: &Path) -> CliResult<PathBuf> {
    let config = RunConfig::load(config_path)?;
    let train_cfg = config.training_config()?;
    let dataset = config.data.generate()?;
    let out_dir = config.resolved_output_dir();

    let state = TrainState::<f64>::new(&train_cfg)?;
    let outcome = train_loop(&train_cfg, state, &dataset.sequences)?;
    let ckpt = Checkpoint::new(&outcome.state.online, &outcome.state.ema, outcome.state.step)?
        .with_schedules(train_cfg.scheduler.clone(), train_cfg.mixer.clone());
    let data_file = DatasetFile {
        spec: dataset.spec.clone(),
        distribution: dataset.distribution.clone(),
    };
    let mut files: Vec<(String, Vec<u8>)> = vec![
        (CHECKPOINT_FILE.into(), ckpt.to_json()?.into_bytes()),
        (METRICS_FILE.into(), metrics_csv(&outcome.metrics).into_bytes()),
        (
            DATASET_FILE.into(),
            serde_json::to_string_pretty(&data_file).map_err(CdlmError::from)?.into_bytes(),
        ),
    ];
    if !config.sampler.steps.is_empty() {
        let s = &config.sampler;
        let mut eval = format!("{EVAL_HEADER}\n");
        for &k in &s.steps {
            let text = sample_jsonl(&outcome.state.online, k, s.n, s.seed, s.mode)?;
            if s.n > 0 {
                let records = read_jsonl(&text)?;
                let metrics =
                    eval_distribution(records.iter().map(|r| r.tokens.as_slice()), &dataset.distribution)?;
                let row = EvalRow {
                    run_id: samples_file_name(k).trim_end_matches(".jsonl").to_string(),
                    k,
                    metrics,
                };
                eval.push_str(&row.csv_line());
                eval.push('\n');
            }
            files.push((samples_file_name(k), text.into_bytes()));
        }
        files.push((EVAL_FILE.into(), eval.into_bytes()));
    }
    let manifest = Manifest::new(&config, &files)?;
    files.push((
        MANIFEST_FILE.into(),
        serde_json::to_string_pretty(&manifest).map_err(CdlmError::from)?.into_bytes(),
    ));
    write_all_atomic(&out_dir, &files)?;
    Ok(out_dir)
}

/// Which parameter set of a checkpoint to sample from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Weights {
    #[default]
    Online,
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Stochastic,
    Greedy,
}

impl From<ModeArg> for SampleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Stochastic => SampleMode::Stochastic,
            ModeArg::Greedy => SampleMode::GreedyX0,
        }
    }
}

/// Draws `n` samples with `steps` denoising steps into a JSON-lines file
/// (default `samples_K<steps>.jsonl` next to the checkpoint).
pub fn cmd_sample(
    checkpoint: &Path,
    steps: usize,
    n: usize,
    seed: u64,
    mode: SampleMode,
    weights: Weights,
    out: Option<&Path>,
) -> CliResult<PathBuf> {
    if steps == 0 {
        return Err(CliError::input("--steps must be at least 1"));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let (online, ema) = ckpt.restore::<f64>()?;
    let params = match weights {
        Weights::Online => online,
        Weights::Ema => ema.target,
    };
    let text = sample_jsonl(&params, steps, n, seed, mode)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(samples_file_name(steps)),
    };
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Scores sample files against a dataset, one row per (file, K). Rows are
/// appended to `out`, or replace its contents with `overwrite`.
pub fn cmd_eval(
    samples: &[PathBuf],
    dataset: &Path,
    out: &Path,
    run_id: Option<&str>,
    overwrite: bool,
) -> CliResult<Vec<EvalRow>> {
    let text = std::fs::read_to_string(dataset)
        .map_err(|e| CliError::input(format!("cannot read dataset {}: {e}", dataset.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let data: DatasetFile = serde_path_to_error::deserialize(de)
        .map_err(|e| {
            let path = e.path().to_string();
            CliError::input(format!("dataset error at `{path}`: {}", e.into_inner()))
        })?;
    data.distribution.validate()?;
    let mut rows = Vec::new();
    for path in samples {
        let body = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read samples {}: {e}", path.display())))?;
        let records = read_jsonl(&body)?;
        if records.is_empty() {
            return Err(CliError::input(format!("{} holds no samples", path.display())));
        }
        let mut by_k: BTreeMap<usize, Vec<&[usize]>> = BTreeMap::new();
        for r in &records {
            by_k.entry(r.steps).or_default().push(&r.tokens);
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for (k, seqs) in by_k {
            let metrics = eval_distribution(seqs, &data.distribution).map_err(|e| {
                CliError::input(format!("{}: samples do not match the dataset vocabulary: {e}", path.display()))
            })?;
            rows.push(EvalRow {
                run_id: run_id.unwrap_or(&stem).to_string(),
                k,
                metrics,
            });
        }
    }
    let mut content = if overwrite || !out.exists() {
        format!("{EVAL_HEADER}\n")
    } else {
        let existing = std::fs::read_to_string(out)
            .map_err(|e| CliError::input(format!("cannot read {}: {e}", out.display())))?;
        if !existing.starts_with(EVAL_HEADER) {
            return Err(CliError::input(format!("{} is not an eval table", out.display())));
        }
        let mut s = existing;
        if !s.ends_with('\n') {
            s.push('\n');
        }
        s
    };
    for r in &rows {
        content.push_str(&r.csv_line());
        content.push('\n');
    }
    write_atomic(out, content.as_bytes())?;
    Ok(rows)
}

/// Runs a suite and returns its pretty JSON report.
pub fn cmd_verify(suite: verify::Suite, size: verify::Size) -> CliResult<(verify::Report, String)> {
    let report = verify::run_suite(suite, size)?;
    let json = serde_json::to_string_pretty(&report).map_err(CdlmError::from)?;
    Ok((report, json))
}

#[derive(Debug, Parser)]
#[command(name = "cdlm", version, about = "Consistency-trained discrete diffusion on enumerable toy data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON run config.
    Train { config: PathBuf },
    /// Generate samples from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "stochastic")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "online")]
        weights: Weights,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score sample files against a dataset; the last path is the dataset.
    Eval {
        #[arg(required = true, num_args = 2..)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Run an exact property suite and print a JSON report.
    Verify {
        #[arg(long, value_enum)]
        suite: verify::Suite,
        #[arg(long, value_enum, default_value = "small")]
        size: verify::Size,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config).map(|dir| {
            println!("wrote {}", dir.display());
            0
        }),
        Command::Sample {
            checkpoint,
            steps,
            n,
            seed,
            mode,
            weights,
            out,
        } => cmd_sample(&checkpoint, steps, n, seed, mode.into(), weights, out.as_deref()).map(|p| {
            println!("wrote {}", p.display());
            0
        }),
        Command::Eval {
            mut paths,
            out,
            run_id,
            overwrite,
        } => {
            let dataset = paths.pop().expect("at least two paths");
            let out = out.unwrap_or_else(|| {
                paths[0].parent().unwrap_or(Path::new(".")).join(EVAL_FILE)
            });
            cmd_eval(&paths, &dataset, &out, run_id.as_deref(), overwrite).map(|rows| {
                for r in rows {
                    println!("{}", r.csv_line());
                }
                0
            })
        }
        Command::Verify { suite, size } => cmd_verify(suite, size).map(|(report, json)| {
            println!("{json}");
            for c in report.failures() {
                eprintln!("FAILED {}: {:e} vs {:e}", c.name, c.max_discrepancy, c.tolerance);
            }
            if report.passed {
                0
            } else {
                1
            }
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "kernel": {"variant": "masked"},
        "denoiser": {"variant": "tabular", "time_bins": 4},
        "data": {"kind": "moons", "n_points": 500, "noise": 0.1, "bins": 4, "seed": 1},
        "output_dir": "out"
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        let t = c.training_config().unwrap();
        assert_eq!(t.seq_len, 2);
        assert_eq!(t.kernel.size(), 5);
        assert_eq!(t.batch_size, 256);
        assert_eq!(t.optimizer, Optimizer::Sgd);
        assert_eq!(c.seeds, Seeds::default());
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let bad = MINIMAL.replace("\"seed\": 1", "\"seed\": 1, \"colour\": 3");
        let e = RunConfig::from_json(&bad).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("data"), "{}", e.message);
        let bad = MINIMAL.replace("\"time_bins\": 4", "\"time_bins\": \"four\"");
        let e = RunConfig::from_json(&bad).unwrap_err();
        assert!(e.message.contains("denoiser"), "{}", e.message);
        let bad = MINIMAL.replace("\"output_dir\"", "\"trainer\": {\"lr\": 1}, \"output_dir\"");
        let e = RunConfig::from_json(&bad).unwrap_err();
        assert!(e.message.contains("trainer"), "{}", e.message);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let bad = MINIMAL.replace("\"output_dir\"", "\"trainer\": {\"learning_rate\": -1}, \"output_dir\"");
        let c = RunConfig::from_json(&bad).unwrap();
        let e: CliError = c.training_config().unwrap_err().into();
        assert_eq!(e.code, 2);
    }

    #[test]
    fn numeric_errors_map_to_three() {
        assert_eq!(CliError::from(CdlmError::Numeric("nan".into())).code, 3);
        assert_eq!(CliError::from(CdlmError::Config("x".into())).code, 2);
    }

    #[test]
    fn blob_digest_matches_git_sha256_objects() {
        // `git hash-object --object-format=sha256` of an empty file
        assert_eq!(
            blob_digest(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested").join("a.txt");
        write_atomic(&p, b"first version").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "second");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
