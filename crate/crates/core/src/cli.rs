//! Command-line front end. [`run`] parses, dispatches and maps every outcome
//! to an exit code; the binary only forwards `argv` and the standard streams.
//!
//! Each subcommand accepts `--config FILE` holding `flag=value` lines. Those
//! are spliced in front of the real arguments, and a repeated flag keeps its
//! last value, so precedence is defaults < config file < command line. The
//! fully resolved flag set goes to stderr in the same format, which means
//! any run can be replayed from that block plus its input files.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::baselines::{fit_intervention_markov, fit_markov, rank_codes, DEFAULT_ALPHA};
use crate::cells::{forget_time_contribution, TimeMode};
use crate::data::{
    generate_cohort, load_jsonl_many, load_jsonl_with_vocab, split, write_jsonl, GeneratorConfig, PatientRecord,
    Vocabulary,
};
use crate::embedding::{PoolingMode, DEFAULT_INIT_SCALE};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_interventions, evaluate_progression, evaluate_risk, EvalReport, Predictor, DEFAULT_THRESHOLD,
};
use crate::gradients::{gradcheck_cases, DEFAULT_FD_STEP, DEFAULT_GRAD_TOLERANCE, GRADCHECK_SEED};
use crate::network::{next_diagnosis_distributions, predict_risk, CellKind, CellParams, ModelConfig, Task};
use crate::training::{
    init_model, load_checkpoint, pretrain_auxiliary, save_checkpoint, train, with_embeddings, Checkpoint, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "deepcare", version, about = "Time- and intervention-aware LSTM models over admission histories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cohort as JSONL.
    #[command(args_override_self = true)]
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Learn code embeddings on the next-diagnosis and intervention tasks.
    #[command(args_override_self = true)]
    Pretrain(PretrainArgs),
    /// Per-patient risk probability and top-ranked next diagnoses.
    #[command(args_override_self = true)]
    Predict(PredictArgs),
    /// Score a checkpoint or a Markov baseline on a test file.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with finite differences on small models.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Dump the learned time term of the forget gate as CSV.
    #[command(args_override_self = true)]
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// File of `flag=value` lines applied before the command line.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
    Both,
}

/// Comma-separated look-back windows in months; `inf` is the whole history.
#[derive(Clone, Debug, PartialEq)]
struct Lookbacks(Vec<f64>);

impl FromStr for Lookbacks {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|v| match v.trim() {
                "inf" => Ok(f64::INFINITY),
                v => v.parse::<f64>().map_err(|e| format!("bad look-back {v:?}: {e}")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Lookbacks)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct KList(Vec<usize>);

impl FromStr for KList {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|e| format!("bad k {v:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(KList)
    }
}

fn default_gen() -> GeneratorConfig {
    GeneratorConfig::default()
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = default_gen().n_patients)]
    patients: usize,
    #[arg(long, default_value_t = default_gen().seed)]
    seed: u64,
    #[arg(long, default_value_t = default_gen().n_diagnoses)]
    diagnoses: usize,
    #[arg(long, default_value_t = default_gen().n_clusters)]
    clusters: usize,
    #[arg(long, default_value_t = default_gen().n_chronic)]
    chronic: usize,
    #[arg(long, default_value_t = default_gen().n_acute)]
    acute: usize,
    #[arg(long, default_value_t = default_gen().mean_admissions)]
    mean_admissions: f64,
    #[arg(long, default_value_t = default_gen().gap_log_mu)]
    gap_log_mu: f64,
    #[arg(long, default_value_t = default_gen().gap_log_sigma)]
    gap_log_sigma: f64,
    #[arg(long, default_value_t = default_gen().baseline_risk)]
    baseline_risk: f64,
    #[arg(long, default_value_t = default_gen().chronic_prevalence)]
    chronic_prevalence: f64,
    #[arg(long, default_value_t = default_gen().chronic_boost)]
    chronic_boost: f64,
    #[arg(long, default_value_t = default_gen().acute_rate_per_year)]
    acute_rate: f64,
    #[arg(long, default_value_t = default_gen().acute_boost)]
    acute_boost: f64,
    #[arg(long, default_value_t = default_gen().acute_half_life_days)]
    acute_half_life: f64,
    #[arg(long, default_value_t = default_gen().intervention_reduction)]
    intervention_reduction: f64,
    #[arg(long, default_value_t = default_gen().treatment_prob)]
    treatment_prob: f64,
    #[arg(long, default_value_t = default_gen().chronic_horizon_days)]
    chronic_horizon: f64,
    #[arg(long, default_value_t = default_gen().recurrence_prob)]
    recurrence_prob: f64,
    #[arg(long, default_value_t = default_gen().primary_prob)]
    primary_prob: f64,
    #[arg(long, default_value_t = default_gen().label_horizon_months)]
    label_horizon: f64,
}

impl GenerateArgs {
    fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            n_patients: self.patients,
            n_diagnoses: self.diagnoses,
            n_clusters: self.clusters,
            n_chronic: self.chronic,
            n_acute: self.acute,
            mean_admissions: self.mean_admissions,
            gap_log_mu: self.gap_log_mu,
            gap_log_sigma: self.gap_log_sigma,
            baseline_risk: self.baseline_risk,
            chronic_prevalence: self.chronic_prevalence,
            chronic_boost: self.chronic_boost,
            acute_rate_per_year: self.acute_rate,
            acute_boost: self.acute_boost,
            acute_half_life_days: self.acute_half_life,
            intervention_reduction: self.intervention_reduction,
            treatment_prob: self.treatment_prob,
            chronic_horizon_days: self.chronic_horizon,
            recurrence_prob: self.recurrence_prob,
            primary_prob: self.primary_prob,
            label_horizon_months: self.label_horizon,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Training records, one patient per line.
    #[arg(long)]
    data: PathBuf,
    /// Validation records. Without it a sixth of `--data` is held out.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Checkpoint written at the end of the run.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log `epoch train_loss valid_loss lr n_wait`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value = "deepcare")]
    cell: CellKind,
    #[arg(long, default_value = "max")]
    pooling: PoolingMode,
    #[arg(long, default_value = "param")]
    time: TimeMode,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    interventions: Switch,
    /// Embedding width.
    #[arg(long = "M", default_value_t = 10)]
    m: usize,
    /// Hidden width of the recurrent cell.
    #[arg(long = "K", default_value_t = 20)]
    k: usize,
    /// Hidden width of the risk head; 0 for logistic regression.
    #[arg(long = "D", default_value_t = 10)]
    d: usize,
    #[arg(long, default_value = "12,24,inf")]
    lookbacks: Lookbacks,
    #[arg(long, default_value_t = DEFAULT_INIT_SCALE)]
    init_scale: f64,
}

impl ModelArgs {
    fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            time: self.time,
            pooling: self.pooling,
            interventions: self.interventions == Switch::On,
            embed_dim: self.m,
            hidden_dim: self.k,
            head_dim: self.d,
            lookbacks_months: self.lookbacks.0.clone(),
            init_scale: self.init_scale,
            ..ModelConfig::new(self.cell, vocab.n_diagnoses(), vocab.n_interventions())
        }
    }
}

fn default_train() -> TrainConfig {
    TrainConfig::default()
}

#[derive(Args, Debug)]
struct OptimArgs {
    #[arg(long, default_value_t = default_train().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = default_train().lr_init)]
    lr: f64,
    #[arg(long, default_value_t = default_train().lr_floor)]
    lr_floor: f64,
    #[arg(long, default_value_t = default_train().n_epoch_max)]
    epochs: usize,
    #[arg(long, default_value_t = default_train().n_wait_init)]
    n_wait: usize,
    #[arg(long, default_value_t = default_train().n_wait_cap)]
    n_wait_cap: usize,
    #[arg(long, default_value_t = default_train().n_wait_step)]
    n_wait_step: usize,
    #[arg(long, default_value_t = default_train().l2_lambda)]
    l2: f64,
    /// Keep probability of each code in an admission.
    #[arg(long, default_value_t = default_train().keep_code)]
    keep_code: f64,
    /// Keep probability of each pooled embedding feature.
    #[arg(long, default_value_t = default_train().keep_feat)]
    keep_feat: f64,
    /// Keep probability at the input of the prediction heads.
    #[arg(long, default_value_t = default_train().keep_in)]
    keep_in: f64,
    /// Keep probability of the risk head's hidden layer.
    #[arg(long, default_value_t = default_train().keep_hidden)]
    keep_hidden: f64,
    /// Clip each batch gradient to this global L2 norm.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long, default_value_t = default_train().improvement_tol)]
    improvement_tol: f64,
    #[arg(long, default_value_t = default_train().seed)]
    seed: u64,
    #[arg(long, default_value_t = default_train().threads)]
    threads: usize,
}

impl OptimArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr_init: self.lr,
            lr_floor: self.lr_floor,
            n_epoch_max: self.epochs,
            n_wait_init: self.n_wait,
            n_wait_cap: self.n_wait_cap,
            n_wait_step: self.n_wait_step,
            l2_lambda: self.l2,
            keep_code: self.keep_code,
            keep_feat: self.keep_feat,
            keep_in: self.keep_in,
            keep_hidden: self.keep_hidden,
            seed: self.seed,
            threads: self.threads,
            clip_norm: self.clip,
            improvement_tol: self.improvement_tol,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "risk")]
    task: Task,
    /// Start from the code embeddings (and vocabulary) of this checkpoint.
    #[arg(long)]
    init_embeddings: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Number of next diagnoses listed per patient.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("predictor").required(true).args(["model", "markov"]))]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Test records.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Fit the Markov baseline on this training file instead of loading a model.
    #[arg(long)]
    markov: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value = "next-diagnosis")]
    task: Task,
    #[arg(long, default_value = "1,2,3")]
    k: KList,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = GRADCHECK_SEED)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    h: f64,
    #[arg(long, default_value_t = DEFAULT_GRAD_TOLERANCE)]
    tolerance: f64,
    /// Only cases whose label contains this text.
    #[arg(long)]
    filter: Option<String>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1095.0)]
    max_days: f64,
    #[arg(long, default_value_t = 15.0)]
    step_days: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T = i32> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    match parse_and_run(argv, stdout, stderr) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = write!(stderr, "{msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn parse_and_run(argv: Vec<OsString>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Outcome {
    let argv = splice_config(argv)?;
    let command = Cli::command();
    let matches = match command.clone().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{}", e.render());
            return Ok(EXIT_OK);
        }
        Err(e) => return Err(Failure::Usage(e.render().to_string())),
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Failure::Usage(e.render().to_string()))?;
    if let Some((name, sub)) = matches.subcommand() {
        let def = command.find_subcommand(name).expect("parsed subcommand exists");
        print_resolved(name, def, sub, stderr);
    }
    match cli.command {
        Command::Generate(a) => generate(&a, stdout, stderr),
        Command::Train(a) => train_cmd(&a, stdout),
        Command::Pretrain(a) => pretrain_cmd(&a, stdout),
        Command::Predict(a) => predict_cmd(&a, stdout),
        Command::Evaluate(a) => evaluate_cmd(&a, stdout),
        Command::Gradcheck(a) => gradcheck_cmd(&a, stdout),
        Command::Inspect(a) => inspect_cmd(&a, stdout),
    }
}

/// Reads `flag=value` lines; blank lines and `#` comments are skipped.
fn read_config_file(path: &Path) -> Outcome<Vec<OsString>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Failure::Usage(format!("{}:{}: expected flag=value, got {line:?}\n", path.display(), i + 1)));
        };
        let key = key.trim();
        if key.is_empty() || key.starts_with('-') || key == "config" {
            return Err(Failure::Usage(format!("{}:{}: bad key {key:?}\n", path.display(), i + 1)));
        }
        out.push(format!("--{key}={}", value.trim()).into());
    }
    Ok(out)
}

/// Inserts the flags of the last `--config FILE` right after the subcommand
/// name so that anything on the command line overrides them.
fn splice_config(mut argv: Vec<OsString>) -> Outcome<Vec<OsString>> {
    let mut path = None;
    let mut i = 2;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy();
        if arg == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if let Some(p) = arg.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else if arg == "--" {
            break;
        }
        i += 1;
    }
    if let Some(path) = path {
        let flags = read_config_file(&path)?;
        let at = 2.min(argv.len());
        argv.splice(at..at, flags);
    }
    Ok(argv)
}

fn print_resolved(name: &str, def: &clap::Command, sub: &ArgMatches, stderr: &mut dyn Write) {
    let _ = writeln!(stderr, "# deepcare {name}");
    for arg in def.get_arguments() {
        let (Some(long), id) = (arg.get_long(), arg.get_id().as_str()) else { continue };
        if long == "config" || long == "help" || long == "version" {
            continue;
        }
        if let Ok(Some(values)) = sub.try_get_raw(id) {
            let joined: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
            let _ = writeln!(stderr, "{long}={}", joined.join(","));
        }
    }
}

fn open_out<'a>(path: Option<&Path>, stdout: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(stdout),
    })
}

fn flush(mut w: Box<dyn Write + '_>, label: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(label, e))
}

fn generate(a: &GenerateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Outcome {
    let cohort = generate_cohort(&a.generator_config())?;
    let label = a.out.clone().unwrap_or_else(|| "stdout".into());
    let mut out = open_out(a.out.as_deref(), stdout)?;
    write_jsonl(&mut out, &cohort.records, &cohort.vocabulary).map_err(|e| Error::io(&label, e))?;
    flush(out, &label)?;
    let positives = cohort.records.iter().filter(|r| r.risk_label == Some(true)).count();
    let _ = writeln!(
        stderr,
        "# wrote {} patients ({} positive, {} excluded)",
        cohort.records.len(),
        positives,
        cohort.excluded
    );
    Ok(EXIT_OK)
}

struct Loaded {
    train: Vec<PatientRecord>,
    valid: Vec<PatientRecord>,
    vocab: Vocabulary,
}

/// Training and validation sets on one vocabulary. A fixed vocabulary (from
/// a pretrained checkpoint) makes unknown codes an error.
fn load_training_data(a: &DataArgs, seed: u64, vocab: Option<Vocabulary>) -> Result<Loaded> {
    let mut paths = vec![a.data.clone()];
    paths.extend(a.valid.clone());
    let (mut sets, vocab) = match vocab {
        Some(v) => (paths.iter().map(|p| load_jsonl_with_vocab(p, &v)).collect::<Result<Vec<_>>>()?, v),
        None => load_jsonl_many(&paths)?,
    };
    if a.valid.is_some() {
        let valid = sets.pop().expect("two files");
        return Ok(Loaded { train: sets.pop().expect("two files"), valid, vocab });
    }
    let parts = split(&sets[0], seed)?;
    let mut train = parts.train;
    train.extend(parts.test);
    Ok(Loaded { train, valid: parts.valid, vocab })
}

fn write_metrics_to(path: Option<&Path>) -> Result<Option<(BufWriter<File>, PathBuf)>> {
    path.map(|p| Ok((BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?), p.to_path_buf()))).transpose()
}

fn train_cmd(a: &TrainArgs, stdout: &mut dyn Write) -> Outcome {
    let cfg = a.optim.train_config();
    let pretrained = a.init_embeddings.as_deref().map(load_checkpoint).transpose()?;
    let data = load_training_data(&a.data, cfg.seed, pretrained.as_ref().map(|c| c.vocabulary.clone()))?;
    let config = a.model.model_config(&data.vocab);
    let model = match pretrained {
        Some(c) => with_embeddings(config, cfg.seed, c.model.params.embedding)?,
        None => init_model(config, cfg.seed)?,
    };
    let mut metrics = write_metrics_to(a.data.metrics.as_deref())?;
    let outcome =
        train(model, &data.train, &data.valid, a.task, &cfg, metrics.as_mut().map(|(w, _)| w as &mut dyn Write))?;
    if let Some((mut w, p)) = metrics {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let checkpoint =
        Checkpoint { model: outcome.best, vocabulary: data.vocab, train: Some(cfg), state: Some(outcome.state) };
    save_checkpoint(&checkpoint, &a.data.out)?;
    let _ = writeln!(
        stdout,
        "best_epoch={} best_valid_loss={} epochs={}",
        outcome.best_epoch,
        outcome.best_valid_loss,
        outcome.log.len() - 1
    );
    Ok(EXIT_OK)
}

fn pretrain_cmd(a: &PretrainArgs, stdout: &mut dyn Write) -> Outcome {
    let cfg = a.optim.train_config();
    let data = load_training_data(&a.data, cfg.seed, None)?;
    let config = a.model.model_config(&data.vocab);
    let mut metrics = write_metrics_to(a.data.metrics.as_deref())?;
    let embedding = pretrain_auxiliary(
        &config,
        &data.train,
        &data.valid,
        &cfg,
        metrics.as_mut().map(|(w, _)| w as &mut dyn Write),
    )?;
    if let Some((mut w, p)) = metrics {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let model = with_embeddings(config, cfg.seed, embedding)?;
    let checkpoint = Checkpoint { model, vocabulary: data.vocab, train: Some(cfg), state: None };
    save_checkpoint(&checkpoint, &a.data.out)?;
    let _ = writeln!(stdout, "wrote {}", a.data.out.display());
    Ok(EXIT_OK)
}

fn predict_cmd(a: &PredictArgs, stdout: &mut dyn Write) -> Outcome {
    let ckpt = load_checkpoint(&a.model)?;
    let records = load_jsonl_with_vocab(&a.data, &ckpt.vocabulary)?;
    let label = a.out.clone().unwrap_or_else(|| "stdout".into());
    let mut out = open_out(a.out.as_deref(), stdout)?;
    for r in &records {
        let risk = predict_risk(&ckpt.model, r)?;
        let last = next_diagnosis_distributions(&ckpt.model, r)?.pop().expect("records are non-empty");
        let next: Vec<&str> = rank_codes(last.as_slice())
            .into_iter()
            .take(a.k)
            .map(|c| ckpt.vocabulary.diagnosis_codes[c].as_str())
            .collect();
        let line = serde_json::json!({ "patient_id": r.patient_id, "risk": risk, "next_diagnoses": next });
        writeln!(out, "{line}").map_err(|e| Error::io(&label, e))?;
    }
    flush(out, &label)?;
    Ok(EXIT_OK)
}

fn evaluate_cmd(a: &EvaluateArgs, stdout: &mut dyn Write) -> Outcome {
    let report: EvalReport = match (&a.model, &a.markov) {
        (Some(path), _) => {
            let ckpt = load_checkpoint(path)?;
            let test = load_jsonl_with_vocab(&a.data, &ckpt.vocabulary)?;
            let model = Predictor::Model(&ckpt.model);
            match a.task {
                Task::Risk => evaluate_risk(&ckpt.model, &test, a.threshold)?,
                Task::NextDiagnosis => evaluate_progression(model, &test, &a.k.0)?,
                Task::Intervention => evaluate_interventions(model, &test, &a.k.0)?,
                Task::Auxiliary => return Err(Failure::Usage("error: --task auxiliary has no evaluation\n".into())),
            }
        }
        (None, Some(train_path)) => {
            let (sets, vocab) = load_jsonl_many(&[train_path, &a.data])?;
            let (train, test) = (&sets[0], &sets[1]);
            match a.task {
                Task::NextDiagnosis => {
                    let m = fit_markov(train, vocab.n_diagnoses(), a.alpha)?;
                    evaluate_progression(Predictor::Markov(&m), test, &a.k.0)?
                }
                Task::Intervention => {
                    let m = fit_intervention_markov(train, vocab.n_interventions(), a.alpha)?;
                    evaluate_interventions(Predictor::Markov(&m), test, &a.k.0)?
                }
                t => {
                    return Err(Failure::Usage(format!(
                        "error: the Markov baseline cannot score --task {}\n",
                        t.name()
                    )))
                }
            }
        }
        (None, None) => unreachable!("clap requires one predictor"),
    };
    if matches!(a.format, Format::Table | Format::Both) {
        let _ = write!(stdout, "{}", report.table());
    }
    if matches!(a.format, Format::Json | Format::Both) {
        let _ = writeln!(stdout, "{}", report.json_line());
    }
    Ok(EXIT_OK)
}

fn gradcheck_cmd(a: &GradcheckArgs, stdout: &mut dyn Write) -> Outcome {
    let cases: Vec<_> = gradcheck_cases()
        .into_iter()
        .filter(|c| a.filter.as_ref().is_none_or(|f| c.label.contains(f.as_str())))
        .collect();
    if cases.is_empty() {
        return Err(Failure::Usage("error: --filter matches no gradient-check case\n".into()));
    }
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for case in &cases {
        let report = case.run(a.seed, a.h)?;
        let pass = report.passed(a.tolerance);
        failed += usize::from(!pass);
        worst = worst.max(report.max_rel_error());
        let _ = writeln!(stdout, "{} {}", if pass { "ok  " } else { "FAIL" }, case.label);
        for t in &report.tensors {
            if t.checked > 0 || t.skipped_ties > 0 {
                let _ = writeln!(
                    stdout,
                    "     {:<10} worst_rel={:.3e} checked={} ties={}",
                    t.name, t.worst_rel_error, t.checked, t.skipped_ties
                );
            }
        }
    }
    let _ = writeln!(
        stdout,
        "{} of {} cases within tolerance {:e}; max relative error {:.3e}",
        cases.len() - failed,
        cases.len(),
        a.tolerance,
        worst
    );
    Ok(if failed == 0 { EXIT_OK } else { EXIT_GRADCHECK })
}

fn inspect_cmd(a: &InspectArgs, stdout: &mut dyn Write) -> Outcome {
    if !(a.step_days > 0.0 && a.max_days >= 0.0) {
        return Err(Failure::Usage("error: --step-days must be positive and --max-days non-negative\n".into()));
    }
    let ckpt = load_checkpoint(&a.model)?;
    let q_f = match &ckpt.model.params.cell {
        CellParams::DeepCare(p) => p.q_f.as_ref(),
        _ => None,
    };
    let label = a.out.clone().unwrap_or_else(|| "stdout".into());
    let mut out = open_out(a.out.as_deref(), stdout)?;
    let io = |e| Error::io(&label, e);
    writeln!(out, "delta_days,channel,contribution").map_err(io)?;
    let n_steps = (a.max_days / a.step_days).floor() as usize;
    for s in 0..=n_steps {
        let dt = s as f64 * a.step_days;
        let contribution = forget_time_contribution(dt, q_f)?;
        for (k, v) in contribution.as_slice().iter().enumerate() {
            writeln!(out, "{dt},{k},{v}").map_err(io)?;
        }
    }
    flush(out, &label)?;
    Ok(EXIT_OK)
}
