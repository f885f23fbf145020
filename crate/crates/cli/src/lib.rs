//! The `kinedecode` command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
//! divergence, 1 anything else.

pub mod config;
pub mod preprocess;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kinedecode::dataio::{load_bundle, write_bundle, DataError, ParticipantBundle};
use kinedecode::decoders::{Decoder, DecoderError, MlrModel, PreMovNet};
use kinedecode::harness::{
    cell_seed, export_trajectories, lag_samples, prepare, run_cell, run_experiment, score,
    split_seed, synth_generate, ArtifactOptions, CellResult, HarnessError, ModelKind, PccReport,
    SynthSpec,
};
use thiserror::Error;

use config::{RunConfig, RunRecord, RUN_RECORD_FILE};
use preprocess::{preprocess_bundle, PreprocessError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<DecoderError> for CliError {
    fn from(e: DecoderError) -> Self {
        match e {
            DecoderError::SequenceTooShort { .. }
            | DecoderError::UnknownModel(_)
            | DecoderError::InvalidLambda(_) => CliError::Config(e.to_string()),
            DecoderError::CorruptModel(_) | DecoderError::Io(_) | DecoderError::SingularSystem => {
                CliError::Data(e.to_string())
            }
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidConfig(m) => CliError::Config(m),
            HarnessError::DivergedTraining { .. } => CliError::Diverged(e.to_string()),
            HarnessError::Decoder(d) => d.into(),
            HarnessError::Io { .. } => CliError::Internal(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::InvalidConfig(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Internal(format!("{}: {e}", path.display()))
}

/// Decode 3-D hand trajectories from pre-movement delta-band EEG.
#[derive(Debug, Parser)]
#[command(name = "kinedecode", version)]
pub struct Cli {
    /// JSON run configuration; flags given here override its fields
    #[arg(long, global = true, value_name = "JSON", help_heading = "Global Options")]
    pub config: Option<PathBuf>,
    /// Base seed for splits, initialization and shuffling [default: 0]
    #[arg(long, global = true, value_name = "U64", help_heading = "Global Options")]
    pub seed: Option<u64>,
    /// Directory receiving run directories and generated bundles [default: runs]
    #[arg(long, global = true, value_name = "DIR", help_heading = "Global Options")]
    pub out: Option<PathBuf>,
    /// Worker threads for sweep cells [default: 1]
    #[arg(long, global = true, value_name = "N", help_heading = "Global Options")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, re-reference, downsample and select channels of a raw bundle
    Preprocess(PreprocessArgs),
    /// Train one model at one lag and write checkpoint, report and trajectories
    Train(TrainArgs),
    /// Re-score a trained run from its artifacts
    Evaluate(EvaluateArgs),
    /// Train and score every (participant, model, lag) cell
    Sweep(SweepArgs),
    /// Write synthetic bundles with a known EEG-to-kinematics coupling
    Synth(SynthArgs),
    /// Print a run's correlations as a table with per-cell averages
    Report(ReportArgs),
    /// Validate a bundle and print its summary
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Raw input bundle
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    /// Destination of the preprocessed bundle
    #[arg(long, value_name = "DIR")]
    pub output: PathBuf,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: HarnessError| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preprocessed bundle [default: the first bundle in the config]
    #[arg(long, value_name = "DIR")]
    pub bundle: Option<PathBuf>,
    /// mlr, mlp (PreMovNet-I) or cnnlstm (PreMovNet-II)
    #[arg(long, value_name = "MODEL", value_parser = parse_model)]
    pub model: Option<ModelKind>,
    /// Lag window in milliseconds, converted to samples at the bundle rate
    #[arg(long, value_name = "MS")]
    pub lag_ms: Option<u32>,
    /// Epoch cap for network training
    #[arg(long, value_name = "N")]
    pub max_epochs: Option<usize>,
    /// Skip per-trial trajectory CSVs
    #[arg(long)]
    pub no_trajectories: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory written by `train`
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    /// Bundle to score on [default: the one the run was trained on]
    #[arg(long, value_name = "DIR")]
    pub bundle: Option<PathBuf>,
    /// Skip per-trial trajectory CSVs
    #[arg(long)]
    pub no_trajectories: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Preprocessed bundle; repeat for several participants
    #[arg(long, value_name = "DIR")]
    pub bundle: Vec<PathBuf>,
    /// Comma-separated models [default: mlr,mlp,cnnlstm]
    #[arg(long, value_name = "LIST", value_delimiter = ',', value_parser = parse_model)]
    pub models: Option<Vec<ModelKind>>,
    /// Comma-separated lags in milliseconds [default: 150,200,250,300,350]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub lags: Option<Vec<u32>>,
    /// Epoch cap for network training
    #[arg(long, value_name = "N")]
    pub max_epochs: Option<usize>,
    /// Skip per-trial trajectory CSVs
    #[arg(long)]
    pub no_trajectories: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Linear,
    Nonlinear,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Built-in specification to start from
    #[arg(long, value_enum, default_value_t = Preset::Nonlinear)]
    pub preset: Preset,
    /// JSON synthetic specification replacing the preset
    #[arg(long, value_name = "JSON")]
    pub spec: Option<PathBuf>,
    /// Number of participants; participant i uses seed + i
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub participants: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Markdown,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory holding report.json
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    /// Output table format
    #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
    pub format: TableFormat,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Bundle to validate
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(&cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Sweep(a) => cmd_sweep(cfg, a),
        Command::Synth(a) => cmd_synth(cli, &cfg, a),
        Command::Report(a) => cmd_report(a),
        Command::Check(a) => cmd_check(a),
    }
}

fn load(path: &Path) -> Result<ParticipantBundle, CliError> {
    if !path.is_dir() {
        return Err(CliError::Data(format!("bundle not found: {}", path.display())));
    }
    load_bundle(path).map_err(|e| CliError::Data(format!("bundle {}: {e}", path.display())))
}

/// Creates `<out>/<UTC timestamp>-<config hash>`, suffixed if taken, and
/// records the command and resolved configuration in it.
fn create_run_dir(command: &str, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-{}", cfg.hash());
    let mut dir = cfg.out.join(&base);
    let mut k = 2;
    while dir.exists() {
        dir = cfg.out.join(format!("{base}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let record = RunRecord {
        command: command.to_string(),
        config: cfg.clone(),
    };
    let p = dir.join(RUN_RECORD_FILE);
    let mut json = serde_json::to_string_pretty(&record).expect("record serializes");
    json.push('\n');
    fs::write(&p, json).map_err(io_error(&p))?;
    Ok(dir)
}

fn cmd_preprocess(cfg: &RunConfig, a: &PreprocessArgs) -> Result<(), CliError> {
    let raw = load(&a.input)?;
    if a.output.exists() && fs::canonicalize(&a.output).ok() == fs::canonicalize(&a.input).ok() {
        return Err(CliError::Config("output must differ from input".into()));
    }
    let out = preprocess_bundle(&raw, &cfg.preprocess)?;
    write_bundle(&out, &a.output)?;
    println!(
        "{}: {} channels at {} Hz, {} samples, {} trials -> {}",
        out.participant_id,
        out.recording.n_channels(),
        out.recording.sample_rate_hz(),
        out.recording.n_samples(),
        out.events.len(),
        a.output.display()
    );
    Ok(())
}

fn single<T: Copy>(flag: Option<T>, from_config: &[T], name: &str) -> Result<T, CliError> {
    match (flag, from_config) {
        (Some(v), _) => Ok(v),
        (None, [v]) => Ok(*v),
        _ => Err(CliError::Config(format!(
            "train needs exactly one {name}; pass --{name} or list one in the config"
        ))),
    }
}

fn first_bundle(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| cfg.bundles.first().cloned())
        .ok_or_else(|| CliError::Config("no bundle given; pass --bundle or set bundles in the config".into()))
}

fn write_history(dir: &Path, history: &impl serde::Serialize) -> Result<(), CliError> {
    let p = dir.join("history.json");
    let mut json = serde_json::to_string_pretty(history).expect("history serializes");
    json.push('\n');
    fs::write(&p, json).map_err(io_error(&p))
}

fn cmd_train(mut cfg: RunConfig, a: &TrainArgs) -> Result<(), CliError> {
    let model = single(a.model, &cfg.models, "model")?;
    let lag_ms = single(a.lag_ms, &cfg.lags_ms, "lag-ms")?;
    let bundle_path = first_bundle(&a.bundle, &cfg)?;
    cfg.models = vec![model];
    cfg.lags_ms = vec![lag_ms];
    cfg.bundles = vec![bundle_path.clone()];
    if let Some(n) = a.max_epochs {
        cfg.train.max_epochs = n;
    }
    cfg.trajectories &= !a.no_trajectories;
    cfg.validate()?;
    let bundle = load(&bundle_path)?;
    let exp = cfg.experiment();
    let outcome = run_cell(&bundle, model, lag_ms, &exp, cfg.seed)?;

    let dir = create_run_dir("train", &cfg)?;
    match &outcome.fitted.decoder {
        Decoder::Mlr(m) => {
            let p = dir.join("model.mlr.json");
            fs::write(&p, m.to_json()).map_err(io_error(&p))?;
        }
        Decoder::Net(n) => {
            n.save(&dir, "model", &cfg.hash())?;
        }
    }
    if let Some(h) = &outcome.fitted.history {
        write_history(&dir, h)?;
    }
    if cfg.trajectories {
        export_trajectories(&outcome.evaluation, &dir.join("trajectories"))?;
    }
    let cell = outcome.cell;
    print_cell(&cell);
    PccReport::from_cells(cfg.seed, exp, vec![cell]).write(&dir)?;
    println!("run: {}", dir.display());
    Ok(())
}

fn print_cell(c: &CellResult) {
    match (&c.r, &c.error) {
        (Some([x, y, z]), _) => println!(
            "{} {} {} ms: r_x = {x:.4}, r_y = {y:.4}, r_z = {z:.4}",
            c.participant, c.model, c.lag_ms
        ),
        (None, Some(e)) => eprintln!("{} {} {} ms failed: {e}", c.participant, c.model, c.lag_ms),
        (None, None) => {}
    }
}

fn load_decoder(run: &Path, model: ModelKind) -> Result<Decoder, CliError> {
    match model.net() {
        None => {
            let p = run.join("model.mlr.json");
            let text = fs::read_to_string(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Ok(Decoder::Mlr(MlrModel::from_json(&text)?))
        }
        Some(kind) => {
            let p = run.join("model.json");
            if !p.is_file() {
                return Err(CliError::Data(format!("checkpoint not found: {}", p.display())));
            }
            let net = PreMovNet::load(&p)?;
            if net.kind != kind {
                return Err(CliError::Data(format!("{} holds a {} model, not {model}", p.display(), net.kind)));
            }
            Ok(Decoder::Net(net))
        }
    }
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<(), CliError> {
    let record = RunRecord::load(&a.run)?;
    if record.command != "train" {
        return Err(CliError::Data(format!("{} is a {} run, not a train run", a.run.display(), record.command)));
    }
    let mut cfg = record.config;
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let bundle_path = first_bundle(&a.bundle, &cfg)?;
    cfg.bundles = vec![bundle_path.clone()];
    cfg.trajectories &= !a.no_trajectories;
    let (model, lag_ms) = match (cfg.models.as_slice(), cfg.lags_ms.as_slice()) {
        ([m], [l]) => (*m, *l),
        _ => return Err(CliError::Data("run record must name one model and one lag".into())),
    };
    let decoder = load_decoder(&a.run, model)?;
    let bundle = load(&bundle_path)?;
    let participant = bundle.participant_id.clone();
    let lag = lag_samples(lag_ms, bundle.recording.sample_rate_hz())?;
    let data = prepare(&bundle, lag, cfg.split, split_seed(&participant, cfg.seed), cfg.fit_on_all)?;
    let (eval, r) = score(&decoder, &data, cfg.per_trial_pcc)?;
    let cell = CellResult {
        seed: cell_seed(&participant, model, lag_ms, cfg.seed),
        participant,
        model,
        lag_ms,
        lag_samples: lag,
        r: Some(r),
        error: None,
        note: None,
        epochs_run: None,
        best_epoch: None,
        trials: Some([data.split.train.len(), data.split.val.len(), data.split.test.len()]),
    };
    let dir = create_run_dir("evaluate", &cfg)?;
    if cfg.trajectories {
        export_trajectories(&eval, &dir.join("trajectories"))?;
    }
    print_cell(&cell);
    PccReport::from_cells(cfg.seed, cfg.experiment(), vec![cell]).write(&dir)?;
    println!("run: {}", dir.display());
    Ok(())
}

fn cmd_sweep(mut cfg: RunConfig, a: &SweepArgs) -> Result<(), CliError> {
    if !a.bundle.is_empty() {
        cfg.bundles = a.bundle.clone();
    }
    if let Some(m) = &a.models {
        cfg.models = m.clone();
    }
    if let Some(l) = &a.lags {
        cfg.lags_ms = l.clone();
    }
    if let Some(n) = a.max_epochs {
        cfg.train.max_epochs = n;
    }
    cfg.trajectories &= !a.no_trajectories;
    if cfg.bundles.is_empty() {
        return Err(CliError::Config("no bundles; pass --bundle or set bundles in the config".into()));
    }
    cfg.validate()?;
    let bundles = cfg.bundles.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    for b in &bundles {
        for &lag in &cfg.lags_ms {
            lag_samples(lag, b.recording.sample_rate_hz())?;
        }
    }
    let dir = create_run_dir("sweep", &cfg)?;
    let artifacts = ArtifactOptions {
        trajectories: cfg.trajectories.then(|| dir.join("trajectories")),
    };
    let report = run_experiment(&bundles, &cfg.experiment(), cfg.seed, cfg.jobs, &artifacts)?;
    for c in &report.cells {
        print_cell(c);
    }
    report.write(&dir)?;
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see report.json", report.cells.len());
    }
    println!("run: {}", dir.display());
    Ok(())
}

fn cmd_synth(cli: &Cli, cfg: &RunConfig, a: &SynthArgs) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read spec {}: {e}", p.display())))?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| CliError::Config(format!("spec {}: {e}", p.display())))?
        }
        None => match a.preset {
            Preset::Linear => SynthSpec::linear_preset(),
            Preset::Nonlinear => SynthSpec::nonlinear_preset(),
        },
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if a.participants == 0 {
        return Err(CliError::Config("participants must be at least 1".into()));
    }
    let base_id = spec.participant_id.clone();
    let base_seed = spec.seed;
    for i in 0..a.participants {
        if a.participants > 1 {
            spec.participant_id = format!("{base_id}-{}", i + 1);
        }
        spec.seed = base_seed.wrapping_add(i as u64);
        let out = synth_generate(&spec)?;
        let dir = cfg.out.join(&spec.participant_id);
        write_bundle(&out.bundle, &dir)?;
        let p = dir.join("synth_spec.json");
        let mut json = serde_json::to_string_pretty(&spec).expect("spec serializes");
        json.push('\n');
        fs::write(&p, json).map_err(io_error(&p))?;
        println!("{}", dir.display());
    }
    Ok(())
}

/// Renders a report as one row per participant cell plus mean ± std rows.
pub fn render_table(report: &PccReport, format: TableFormat) -> String {
    let mut s = String::new();
    let sep = |cells: &[String]| match format {
        TableFormat::Markdown => format!("| {} |", cells.join(" | ")),
        TableFormat::Csv => cells.join(","),
    };
    let header = ["participant", "model", "lag_ms", "x", "y", "z"].map(String::from);
    writeln!(s, "{}", sep(&header)).unwrap();
    if format == TableFormat::Markdown {
        writeln!(s, "|{}", "---|".repeat(header.len())).unwrap();
    }
    for c in &report.cells {
        let rs: Vec<String> = match c.r {
            Some(r) => r.iter().map(|v| format!("{v:.4}")).collect(),
            None => vec!["failed".into(); 3],
        };
        let row = [c.participant.clone(), c.model.to_string(), c.lag_ms.to_string()];
        writeln!(s, "{}", sep(&[row.to_vec(), rs].concat())).unwrap();
    }
    for &model in &report.config.models {
        for &lag in &report.config.lags_ms {
            let cells: Vec<String> = ["x", "y", "z"]
                .iter()
                .map(|axis| match report.aggregate_for(model, lag, axis) {
                    Some(a) => format!("{:.4} ± {:.4}", a.mean, a.std),
                    None => "n/a".into(),
                })
                .collect();
            let row = ["Average".to_string(), model.to_string(), lag.to_string()];
            writeln!(s, "{}", sep(&[row.to_vec(), cells].concat())).unwrap();
        }
    }
    s
}

fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let p = a.run.join("report.json");
    let text = fs::read_to_string(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    let report: PccReport =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    print!("{}", render_table(&report, a.format));
    Ok(())
}

fn cmd_check(a: &CheckArgs) -> Result<(), CliError> {
    let b = load(&a.bundle)?;
    println!("participant: {}", b.participant_id);
    println!(
        "eeg: {} channels x {} samples at {} Hz",
        b.recording.n_channels(),
        b.recording.n_samples(),
        b.recording.sample_rate_hz()
    );
    println!(
        "kinematics: {} samples at {} Hz",
        b.kinematics.n_samples(),
        b.kinematics.sample_rate_hz()
    );
    println!("trials: {}", b.events.len());
    println!("preprocessing steps: {}", b.recording.log().len() + b.kinematics.log().len());
    println!("source: {} (ica_cleaned = {})", b.provenance.source, b.provenance.ica_cleaned);
    Ok(())
}
