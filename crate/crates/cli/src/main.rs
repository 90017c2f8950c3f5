//! `mfcon` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mfcon::checkpoint;
use mfcon::config::RunConfig;
use mfcon::exec::Execution;
use mfcon::features::{AugmentSource, Fbank, Waveform};
use mfcon::losses::{ContrastiveKind, Objective};
use mfcon::metrics::{self, Trial};
use mfcon::synthdata;
use mfcon::trainer::{self, Dataset, EvalResult, EvalSet, LogRecord, Trainer};

#[derive(Parser, Debug)]
#[command(name = "mfcon", version, about = "Train and evaluate multi-scale contrastive speaker embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and evaluate it on the run's trial list.
    Train(TrainArgs),
    /// Score a trial list with a trained checkpoint.
    Eval(EvalArgs),
    /// Train once per value of one configuration axis and tabulate EER/minDCF.
    Sweep(SweepArgs),
    /// Write the synthetic corpus as WAV files, a manifest and a trial list.
    ExportSynthetic(ExportArgs),
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML configuration; missing keys take the desk preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named preset (desk or full) instead of a file.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Train on the generated synthetic corpus.
    #[arg(long, conflicts_with = "data")]
    synthetic: bool,
    /// Directory holding `manifest.txt` (and optionally `trials.txt`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of noise WAVs for augmentation (default: synthetic noise).
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    /// Directory of impulse-response WAVs (default: synthetic responses).
    #[arg(long)]
    rir_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run every loop on one thread.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// am_softmax, am_supcon, mfcon, combined, or a contrastive kind
    /// (triplet, npair, ntxent, supcon) for the per-block term of mfcon.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Lines of `<label> <enroll_id> <test_id>`.
    #[arg(long)]
    trials: PathBuf,
    /// Lines of `<utt_id> <speaker_id> <path>`.
    #[arg(long)]
    manifest: PathBuf,
    /// Per-trial score file (default: next to the trial list).
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Axis {
    Lambda,
    Lambda12,
    #[value(name = "contrastive_kind", alias = "contrastive-kind")]
    ContrastiveKind,
    Sharing,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated values; defaults to the standard grid of the axis.
    /// `lambda12` values are written `l1:l2`.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Error with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn classify(err: anyhow::Error) -> Failure {
    let code = match err.downcast_ref::<mfcon::Error>() {
        Some(mfcon::Error::Config(_) | mfcon::Error::Parse { .. }) => EXIT_USAGE,
        Some(mfcon::Error::NonFinite { .. }) => EXIT_NUMERIC,
        Some(_) => EXIT_DATA,
        None => EXIT_USAGE,
    };
    Failure { code, err }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_USAGE, err: anyhow!("{msg}") }
}

type CmdResult<T = ()> = Result<T, Failure>;

trait OrFail<T> {
    fn or_fail(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn or_fail(self) -> CmdResult<T> {
        self.map_err(|e| classify(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::ExportSynthetic(a) => cmd_export(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>, preset: Option<&str>) -> CmdResult<RunConfig> {
    match (path, preset) {
        (Some(p), _) => RunConfig::load(p).or_fail(),
        (None, Some(name)) => RunConfig::preset(name).or_fail(),
        (None, None) => Ok(RunConfig::desk()),
    }
}

/// Apply `--loss` and the coefficient flags.
fn apply_loss_flags(cfg: &mut RunConfig, a: &TrainArgs) -> CmdResult {
    let loss = &mut cfg.train.loss;
    if let Some(name) = &a.loss {
        if let Ok(obj) = name.parse::<Objective>() {
            loss.objective = obj;
        } else if let Ok(kind) = name.parse::<ContrastiveKind>() {
            // Contrastive-kind comparisons use a fixed coefficient of 0.1.
            loss.objective = Objective::Mfcon;
            loss.contrastive_kind = kind;
            loss.lambda = 0.1;
        } else {
            return Err(usage(format!("unknown loss `{name}`")));
        }
    }
    if let Some(v) = a.lambda {
        loss.lambda = v;
    }
    if let Some(v) = a.lambda1 {
        loss.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        loss.lambda2 = v;
    }
    Ok(())
}

fn apply_run_flags(cfg: &mut RunConfig, a: &RunArgs) -> CmdResult {
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if a.sequential {
        cfg.train.exec = Execution::Sequential;
    }
    cfg.validate().or_fail()
}

/// Where the training utterances come from.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
enum DataSource {
    Synthetic,
    Directory(PathBuf),
}

fn data_source(a: &RunArgs) -> CmdResult<DataSource> {
    match (&a.data, a.synthetic) {
        (_, true) => Ok(DataSource::Synthetic),
        (Some(d), false) => {
            if !d.is_dir() {
                return Err(usage(format!("data directory {} does not exist", d.display())));
            }
            let m = d.join(synthdata::MANIFEST);
            if !m.is_file() {
                return Err(usage(format!("{} not found", m.display())));
            }
            Ok(DataSource::Directory(d.clone()))
        }
        (None, false) => Err(usage("pass --synthetic or --data <dir>")),
    }
}

/// Utterances and, when available, a trial list.
fn load_data(src: &DataSource, cfg: &RunConfig) -> CmdResult<(Vec<Waveform>, Option<Vec<Trial>>)> {
    let exec = cfg.train.exec;
    match src {
        DataSource::Synthetic => {
            let corpus = synthdata::generate_corpus(&cfg.synth, exec).or_fail()?;
            let t = &cfg.trials;
            let trials = synthdata::generate_trials(&corpus, t.n_target, t.n_nontarget, t.seed).or_fail()?;
            Ok((corpus, Some(trials)))
        }
        DataSource::Directory(d) => {
            let corpus = synthdata::load_manifest(&d.join(synthdata::MANIFEST), exec).or_fail()?;
            let tp = d.join("trials.txt");
            let trials = if tp.is_file() { Some(metrics::read_trials(&tp).or_fail()?) } else { None };
            Ok((corpus, trials))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct RunManifest {
    command: String,
    version: String,
    git: Option<String>,
    seed: u64,
    data: DataSource,
    /// Complete configuration, as TOML.
    config: String,
    outputs: Vec<PathBuf>,
    started_at: String,
    finished_at: Option<String>,
    status: String,
    eer: Option<f64>,
    mindcf: Option<f64>,
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "--short", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string()).filter(|s| !s.is_empty())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl RunManifest {
    fn save(&self, dir: &Path) -> CmdResult {
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join("run.json"), &json).map_err(|e| Failure { code: EXIT_DATA, err: e })
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// One training run in `out`, returning its final evaluation if trials exist.
fn run_training(cfg: &RunConfig, src: &DataSource, a: &RunArgs, command: &str, out: &Path) -> CmdResult<Option<EvalResult>> {
    let (corpus, trials) = load_data(src, cfg)?;
    let source = AugmentSource::from_dirs(a.noise_dir.as_deref(), a.rir_dir.as_deref()).or_fail()?;

    fs::create_dir_all(out).or_fail()?;
    let mut manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        git: git_revision(),
        seed: cfg.train.seed,
        data: src.clone(),
        config: cfg.to_toml(),
        outputs: ["config.toml", "train.jsonl", "model.ckpt", "scores.txt", "trials.txt"].iter().map(|f| out.join(f)).collect(),
        started_at: now(),
        finished_at: None,
        status: "running".into(),
        eer: None,
        mindcf: None,
    };
    manifest.save(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).or_fail()?;

    let result = train_and_eval(cfg, corpus, trials, source, out);
    manifest.finished_at = Some(now());
    match &result {
        Ok(r) => {
            manifest.status = "ok".into();
            manifest.eer = r.as_ref().map(|r| r.eer);
            manifest.mindcf = r.as_ref().map(|r| r.mindcf);
        }
        Err(f) => manifest.status = format!("failed: {:#}", f.err),
    }
    manifest.save(out)?;
    result
}

fn train_and_eval(
    cfg: &RunConfig,
    corpus: Vec<Waveform>,
    trials: Option<Vec<Trial>>,
    source: AugmentSource,
    out: &Path,
) -> CmdResult<Option<EvalResult>> {
    let exec = cfg.train.exec;
    let fbank = Fbank::new(&cfg.features).or_fail()?;
    let eval = match trials {
        Some(t) => {
            metrics::write_trials(&out.join("trials.txt"), &t).or_fail()?;
            Some(EvalSet::new(t, &corpus, &fbank, exec).or_fail()?)
        }
        None => None,
    };
    let data = Dataset::new(corpus).or_fail()?;
    let mut trainer = Trainer::new(cfg.model(data.num_classes()), cfg.train.clone(), fbank, source).or_fail()?;

    let mut log = std::io::BufWriter::new(fs::File::create(out.join("train.jsonl")).or_fail()?);
    let summary = trainer.fit(&data, eval.as_ref(), &mut |rec: &LogRecord| {
        let line = serde_json::to_string(rec).expect("log record serializes");
        writeln!(log, "{line}").map_err(mfcon::Error::from)?;
        if let LogRecord::Eval { step, result, .. } = rec {
            log::info!("step {step}: EER {:.2}%  minDCF {:.4}", 100.0 * result.eer, result.mindcf);
        }
        Ok(())
    });
    log.flush().or_fail()?;
    let summary = summary.or_fail()?;

    checkpoint::save(&out.join("model.ckpt"), &trainer.model, Some(&cfg.to_toml()), &data.classes).or_fail()?;
    if let Some(r) = &summary.final_eval {
        metrics::write_scores(&out.join("scores.txt"), &r.scores).or_fail()?;
    }
    Ok(summary.final_eval)
}

fn report(r: &EvalResult) -> String {
    format!("EER {:.2}%  minDCF(p=0.01) {:.4}", 100.0 * r.eer, r.mindcf)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(a.run.config.as_deref(), a.run.preset.as_deref())?;
    apply_loss_flags(&mut cfg, &a)?;
    apply_run_flags(&mut cfg, &a.run)?;
    let src = data_source(&a.run)?;
    if let Some(r) = run_training(&cfg, &src, &a.run, "train", &a.run.out)? {
        println!("{}", report(&r));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    for p in [&a.checkpoint, &a.trials, &a.manifest] {
        if !p.is_file() {
            return Err(usage(format!("{} not found", p.display())));
        }
    }
    let exec = if a.sequential { Execution::Sequential } else { Execution::Parallel };
    let ck = checkpoint::load(&a.checkpoint).or_fail()?;
    let features = match &ck.run_config {
        Some(text) => RunConfig::from_toml(text).or_fail()?.features,
        None => RunConfig::desk().features,
    };
    let trials = metrics::read_trials(&a.trials).or_fail()?;
    let entries = synthdata::read_manifest(&a.manifest).or_fail()?;
    let known: std::collections::HashSet<&str> = entries.iter().map(|e| e.utterance_id.as_str()).collect();
    let mut missing: Vec<&str> =
        trials.iter().flat_map(|t| [t.enroll_utt.as_str(), t.test_utt.as_str()]).filter(|id| !known.contains(id)).collect();
    missing.sort_unstable();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Failure { code: EXIT_DATA, err: anyhow!("utterances missing from {}: {}", a.manifest.display(), missing.join(", ")) });
    }
    let utts = synthdata::load_manifest(&a.manifest, exec).or_fail()?;
    let fbank = Fbank::new(&features).or_fail()?;
    let set = EvalSet::new(trials, &utts, &fbank, exec).or_fail()?;
    let r = trainer::evaluate(&ck.model, &set, exec).or_fail()?;
    let scores = a.scores.unwrap_or_else(|| a.trials.with_extension("scores"));
    metrics::write_scores(&scores, &r.scores).or_fail()?;
    println!("{}", report(&r));
    Ok(())
}

fn default_values(axis: Axis) -> Vec<String> {
    let v: &[&str] = match axis {
        Axis::Lambda => &["0.01", "0.03", "0.1", "0.3"],
        Axis::Lambda12 => &["0.01:0", "0:0.03", "0.01:0.01", "0.03:0.03", "0.1:0.1", "0.3:0.3"],
        Axis::ContrastiveKind => &["triplet", "npair", "ntxent", "supcon"],
        Axis::Sharing => &["none", "pool", "proj", "both"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

fn parse_f64(s: &str) -> CmdResult<f64> {
    s.trim().parse().map_err(|_| usage(format!("`{s}` is not a number")))
}

/// Configure one sweep row.
fn apply_axis(cfg: &mut RunConfig, axis: Axis, value: &str) -> CmdResult {
    let loss = &mut cfg.train.loss;
    match axis {
        Axis::Lambda => {
            loss.objective = Objective::Mfcon;
            loss.lambda = parse_f64(value)?;
        }
        Axis::Lambda12 => {
            let (l1, l2) = value.split_once(':').ok_or_else(|| usage(format!("lambda12 value `{value}` must be `l1:l2`")))?;
            loss.objective = Objective::Combined;
            loss.lambda1 = parse_f64(l1)?;
            loss.lambda2 = parse_f64(l2)?;
        }
        Axis::ContrastiveKind => {
            loss.objective = Objective::Mfcon;
            loss.contrastive_kind = value.parse().map_err(|e: mfcon::Error| usage(e))?;
            loss.lambda = 0.1;
        }
        Axis::Sharing => {
            loss.objective = Objective::Mfcon;
            let (pool, proj) = match value {
                "none" => (false, false),
                "pool" => (true, false),
                "proj" => (false, true),
                "both" => (true, true),
                other => return Err(usage(format!("sharing value `{other}` must be none, pool, proj or both"))),
            };
            cfg.head.share_pooling = pool;
            cfg.head.share_projection = proj;
        }
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let mut base = load_config(a.run.config.as_deref(), a.run.preset.as_deref())?;
    apply_run_flags(&mut base, &a.run)?;
    let src = data_source(&a.run)?;
    let values = if a.values.is_empty() { default_values(a.axis) } else { a.values.clone() };
    let axis_name = a.axis.to_possible_value().expect("named axis").get_name().to_string();

    // Reject bad values before any run starts.
    let mut rows = Vec::new();
    for v in &values {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, a.axis, v)?;
        cfg.validate().or_fail()?;
        rows.push((v.clone(), cfg));
    }

    fs::create_dir_all(&a.run.out).or_fail()?;
    let mut table = format!("{axis_name}\teer\tmindcf\n");
    for (v, cfg) in rows {
        let dir = a.run.out.join(format!("{axis_name}_{}", v.replace([':', '/'], "_")));
        log::info!("sweep {axis_name} = {v}");
        let r = run_training(&cfg, &src, &a.run, &format!("sweep {axis_name}={v}"), &dir)?;
        match r {
            Some(r) => writeln!(table, "{v}\t{:.6}\t{:.6}", r.eer, r.mindcf),
            None => writeln!(table, "{v}\tNA\tNA"),
        }
        .expect("string write");
    }
    let path = a.run.out.join("results.tsv");
    fs::write(&path, &table).or_fail()?;
    print!("{table}");
    Ok(())
}

fn cmd_export(a: ExportArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref(), None)?;
    let corpus = synthdata::generate_corpus(&cfg.synth, cfg.train.exec).or_fail()?;
    let t = &cfg.trials;
    let trials = synthdata::generate_trials(&corpus, t.n_target, t.n_nontarget, t.seed).or_fail()?;
    fs::create_dir_all(&a.out).or_fail()?;
    let manifest = synthdata::export_corpus(&a.out, &corpus).or_fail()?;
    metrics::write_trials(&a.out.join("trials.txt"), &trials).or_fail()?;
    println!("{} utterances, {} trials -> {}", corpus.len(), trials.len(), manifest.display());
    Ok(())
}
