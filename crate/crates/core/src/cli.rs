//! Command-line front end: corpus generation, training, evaluation and
//! report comparison, all driven by one TOML run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    corpus_stats, generate_corpus, load_corpus, read_manifest, save_corpus, CorpusSpec, DatasetError, Split,
    MANIFEST_FILE,
};
use crate::model::{
    compare, evaluate, format_comparison, parse_metrics_csv, peek_header, train, Checkpoint, EpochRecord, ModelConfig,
    ModelError, SystemKind, TrainState,
};

/// Overrides `paths.corpus_dir`, for users with their own recordings.
pub const USER_CORPUS_DIR: &str = "USER_CORPUS_DIR";
/// Effective configuration echoed into every output directory.
pub const CONFIG_ECHO: &str = "config.toml";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const LOSS_CURVE_HEADER: &str = "epoch,steps,ccc_term,bbb_term,kl_term,alpha,total,improved";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus_dir: "corpus".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

/// Everything a run needs. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Systems compared pairwise by `compare` without explicit reports.
    pub systems: Vec<SystemKind>,
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            systems: vec![SystemKind::Mu, SystemKind::Lu],
            model: ModelConfig::default(),
            corpus: CorpusSpec::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.corpus.validate().map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// `--seed` reaches the corpus generator and every model stream.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.model.seed = seed;
            self.corpus.seed = seed;
        }
        self
    }

    pub fn corpus_dir(&self) -> PathBuf {
        std::env::var_os(USER_CORPUS_DIR)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.paths.corpus_dir.clone())
    }

    pub fn checkpoint_dir(&self, system: SystemKind) -> PathBuf {
        self.paths.checkpoint_dir.join(system.as_str())
    }

    pub fn report_dir(&self, system: SystemKind, split: Split) -> PathBuf {
        self.paths.report_dir.join(system.as_str()).join(split.as_str())
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: config, arguments, refused overwrite, mismatched files.
    #[error("{0}")]
    Validation(String),
    /// Anything that failed while doing the work.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_)
            | ModelError::EmptySplit(_)
            | ModelError::ReportMismatch(_)
            | ModelError::Report(_)
            | ModelError::Checkpoint(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidSpec(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "affect-bnn", version, about = "Arousal regression with label-uncertainty-aware Bayesian heads")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the corpus and every model stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Evaluate a checkpoint whose config hash differs from the run config.
    #[arg(long, global = true)]
    pub allow_mismatch: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the train and dev corpus.
    Generate {
        /// Recording length override, in seconds.
        #[arg(long)]
        duration_s: Option<f64>,
    },
    /// Train one system and keep its best and last checkpoints.
    Train {
        /// mu, lu, stl or mtl_pu
        system: SystemKind,
    },
    /// Score a checkpoint on a split and write reports.
    Evaluate {
        /// Defaults to the best checkpoint of `--system`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        system: Option<SystemKind>,
        #[arg(long, default_value = "dev")]
        split: Split,
    },
    /// Paired one-tailed t-tests between two reports.
    Compare {
        /// Report directories, metrics CSVs or system names. Without
        /// arguments every pair of the configured systems is compared.
        reports: Vec<String>,
        #[arg(long, default_value = "dev")]
        split: Split,
    },
}

/// Runs a parsed command line; returns what should go to stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    }
    .with_seed(cli.seed);
    match &cli.command {
        Command::Generate { duration_s } => {
            let mut config = config;
            if let Some(d) = duration_s {
                config.corpus.duration_s = *d;
            }
            config.validate()?;
            cmd_generate(&config, cli.force)
        }
        Command::Train { system } => cmd_train(&config, *system, cli.force),
        Command::Evaluate {
            checkpoint,
            system,
            split,
        } => {
            let path = match (checkpoint, system) {
                (Some(p), _) => p.clone(),
                (None, Some(s)) => config.checkpoint_dir(*s).join(BEST_CHECKPOINT),
                (None, None) => return Err(CliError::Validation("evaluate needs --checkpoint or --system".into())),
            };
            cmd_evaluate(&config, &path, *split, cli.force, cli.allow_mismatch)
        }
        Command::Compare { reports, split } => cmd_compare(&config, reports, *split),
    }
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation errors; help and version are not errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn write_echo(dir: &Path, config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, config.to_toml()).map_err(io(&path))
}

fn refuse(what: &Path) -> CliError {
    CliError::Validation(format!("{} already exists; pass --force to overwrite", what.display()))
}

pub fn cmd_generate(config: &RunConfig, force: bool) -> Result<String, CliError> {
    let dir = config.corpus_dir();
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        if !force {
            return Err(refuse(&manifest));
        }
        // remove only what the previous generation wrote
        for entry in read_manifest(&dir)? {
            for file in [&entry.wav, &entry.csv] {
                let path = dir.join(file);
                if path.exists() {
                    fs::remove_file(&path).map_err(io(&path))?;
                }
            }
        }
        fs::remove_file(&manifest).map_err(io(&manifest))?;
    }
    let recordings = generate_corpus(&config.corpus)?;
    save_corpus(&dir, &recordings)?;
    write_echo(&dir, config)?;
    let mut out = String::new();
    for split in [Split::Train, Split::Dev] {
        let part: Vec<_> = recordings.iter().filter(|r| r.split == split).cloned().collect();
        let stats = corpus_stats(&part);
        let _ = writeln!(
            out,
            "{split}: {} recordings, {} frames, mean of m {:.4}, mean of s {:.4}",
            stats.recordings, stats.frames, stats.mean_of_m, stats.mean_of_s
        );
    }
    let stats = corpus_stats(&recordings);
    let _ = writeln!(
        out,
        "wrote {} recordings to {} (mean of m {:.4}, mean of s {:.4})",
        stats.recordings,
        dir.display(),
        stats.mean_of_m,
        stats.mean_of_s
    );
    Ok(out)
}

fn loss_curve_row(r: &EpochRecord, improved: bool) -> String {
    let l = &r.loss;
    format!(
        "{},{},{},{},{},{},{},{}\n",
        r.epoch, r.steps, l.ccc_term, l.bbb_term, l.kl_term, l.alpha, l.total, improved
    )
}

pub fn cmd_train(config: &RunConfig, system: SystemKind, force: bool) -> Result<String, CliError> {
    let out_dir = config.checkpoint_dir(system);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    if best_path.exists() && !force {
        return Err(refuse(&best_path));
    }
    let corpus_dir = config.corpus_dir();
    if !corpus_dir.join(MANIFEST_FILE).exists() {
        return Err(CliError::Validation(format!(
            "no corpus at {} (run `generate` first or set {USER_CORPUS_DIR})",
            corpus_dir.display()
        )));
    }
    let train_set = load_corpus(&corpus_dir, Some(Split::Train))?;
    if train_set.is_empty() {
        return Err(ModelError::EmptySplit("train".into()).into());
    }
    fs::create_dir_all(&out_dir).map_err(io(&out_dir))?;
    write_echo(&out_dir, config)?;
    let model_config = config.model.for_system(system);
    let mut state = TrainState::new(&model_config, system)?;
    let mut curve = String::from(LOSS_CURVE_HEADER);
    curve.push('\n');
    let curve_path = out_dir.join(LOSS_CURVE);
    let records = train(&mut state, &train_set, model_config.epochs, |s, record, improved| {
        curve.push_str(&loss_curve_row(record, improved));
        fs::write(&curve_path, &curve).map_err(|e| ModelError::io(&curve_path, e))?;
        if improved {
            s.checkpoint().save(&best_path)?;
        }
        Ok(())
    })?;
    let mut last = state.checkpoint();
    if system == SystemKind::MtlPu {
        // the adjustment is fitted on the selected model, then saved with it
        let mut best = Checkpoint::load(&best_path)?;
        let beta = crate::model::fit_tuning(&mut best.model, &train_set)?;
        best.save(&best_path)?;
        crate::model::fit_tuning(&mut last.model, &train_set)?;
        log::info!("mtl_pu tuning beta {beta:.5}");
    }
    last.save(&out_dir.join(LAST_CHECKPOINT))?;
    let best = records
        .iter()
        .map(|r| r.loss.total)
        .fold(f64::INFINITY, f64::min);
    Ok(format!(
        "trained {system} for {} epochs; best epoch-mean loss {best:.6}; checkpoints in {}\n",
        records.len(),
        out_dir.display()
    ))
}

pub fn cmd_evaluate(
    config: &RunConfig,
    checkpoint: &Path,
    split: Split,
    force: bool,
    allow_mismatch: bool,
) -> Result<String, CliError> {
    let bytes = fs::read(checkpoint).map_err(|e| CliError::Validation(format!("{}: {e}", checkpoint.display())))?;
    let header = peek_header(&bytes)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let system = ck.model.kind;
    let expected = config.model.for_system(system).hash();
    if header.config_hash != expected {
        let msg = format!(
            "checkpoint {} was trained with config hash {:016x}, the run config gives {expected:016x}",
            checkpoint.display(),
            header.config_hash
        );
        if !allow_mismatch {
            return Err(CliError::Validation(msg + " (pass --allow-mismatch to evaluate anyway)"));
        }
        log::warn!("{msg}; continuing because of --allow-mismatch");
    }
    let out_dir = config.report_dir(system, split);
    let metrics_path = out_dir.join("metrics.csv");
    if metrics_path.exists() && !force {
        return Err(refuse(&metrics_path));
    }
    let recordings = load_corpus(&config.corpus_dir(), Some(split))?;
    let eval = evaluate(&ck.model, &recordings, split)?;
    if out_dir.exists() {
        // stale per-recording files from an earlier corpus must not survive
        fs::remove_dir_all(&out_dir).map_err(io(&out_dir))?;
    }
    crate::model::write_evaluation(&out_dir, &eval)?;
    write_echo(&out_dir, config)?;
    let s = &eval.summary;
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    Ok(format!(
        "{system} on {split} ({} recordings): ccc_m {:.4}, ccc_s {}, kl {}\nreports in {}\n",
        s.recordings,
        s.ccc_m,
        show(s.ccc_s),
        show(s.kl),
        out_dir.display()
    ))
}

/// A report given as a directory, a metrics CSV or a system name.
fn resolve_report(config: &RunConfig, arg: &str, split: Split) -> PathBuf {
    let path = PathBuf::from(arg);
    if path.is_dir() {
        return path.join("metrics.csv");
    }
    if path.exists() {
        return path;
    }
    match arg.parse::<SystemKind>() {
        Ok(system) => config.report_dir(system, split).join("metrics.csv"),
        Err(_) => path,
    }
}

pub fn cmd_compare(config: &RunConfig, reports: &[String], split: Split) -> Result<String, CliError> {
    let pairs: Vec<(String, String)> = match reports {
        [a, b] => vec![(a.clone(), b.clone())],
        [] => {
            let names: Vec<String> = config.systems.iter().map(|s| s.to_string()).collect();
            let mut pairs = Vec::new();
            for (i, a) in names.iter().enumerate() {
                for b in &names[i + 1..] {
                    pairs.push((a.clone(), b.clone()));
                }
            }
            if pairs.is_empty() {
                return Err(CliError::Validation("compare needs two reports or two configured systems".into()));
            }
            pairs
        }
        _ => return Err(CliError::Validation("compare takes exactly two reports".into())),
    };
    let mut out = String::new();
    for (a, b) in pairs {
        let load = |arg: &str| -> Result<_, CliError> {
            let path = resolve_report(config, arg, split);
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::Validation(format!("cannot read report {}: {e}", path.display())))?;
            Ok(parse_metrics_csv(&text)?)
        };
        let (ra, rb) = (load(&a)?, load(&b)?);
        let rows = compare(&a, &ra, &b, &rb)?;
        out.push_str(&format_comparison(&rows));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[model]\nlstm_width = 3", "[paths]\ncorpus = \"x\""] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Validation(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_validation_errors() {
        let err = RunConfig::parse("[model]\nwindow_frames = 0").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn seed_reaches_corpus_and_model() {
        let c = RunConfig::default().with_seed(Some(42));
        assert_eq!((c.model.seed, c.corpus.seed), (42, 42));
    }
}
